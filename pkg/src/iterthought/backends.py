"""Chat-completion backends: live HTTP, scripted, and cassette record/replay.

Every agent call goes through the same :class:`BackendRequest` /
:class:`BackendResponse` exchange regardless of transport, which is what
makes the loop logic testable fully offline. Requests are keyed by a digest
of their canonical form; a cassette is an append-only JSONL file of
``{key, request, response}`` entries, so replaying the exact recorded
request sequence reproduces every response byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import random
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Union

import requests as _requests

from .core import UsageStats


class BackendError(Exception):
    """Base class for transport and cassette failures."""


class NetworkError(BackendError):
    """Transport failed after all retry attempts."""


class RateLimited(BackendError):
    """Request budget exhausted and the caller opted out of waiting."""


class ReplayMiss(BackendError):
    """No cassette entry matches the request key."""


class AuthMissing(BackendError):
    """The configured API-key environment variable is unset."""


class ScriptExhausted(BackendError):
    """A scripted backend ran out of programmed responses."""


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if self.role in (Role.SYSTEM, Role.USER) and not self.content:
            raise ValueError(f"{self.role.value} message content must be non-empty")


@dataclass(frozen=True)
class BackendRequest:
    model_id: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    schema_hint: str | None = None
    max_output_tokens: int = 1024

    def __post_init__(self) -> None:
        object.__setattr__(self, "messages", tuple(self.messages))
        if not self.messages:
            raise ValueError("request must carry at least one message")
        if self.messages[0].role is not Role.SYSTEM:
            raise ValueError("first message must be a system message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class BackendResponse:
    text: str
    usage: UsageStats = UsageStats()
    latency_s: float = 0.0


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    backoff_base: float = 0.5

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_base < 0:
            raise ValueError("backoff_base must be >= 0")


class BackendKind(str, Enum):
    HTTP_CHAT = "http_chat"
    SCRIPTED = "scripted"
    REPLAY = "replay"
    RECORD = "record"


@dataclass(frozen=True)
class BackendConfig:
    """Transport settings plus the model identity behind an agent.

    The model id doubles as the name of the knowledge base an agent draws
    on; giving the guide and answering agents distinct configs yields a
    two-model system, sharing one config keeps them on a single model.
    """

    kind: BackendKind
    model_id: str = "default"
    endpoint_url: str = ""
    api_key_source: str = "OPENAI_API_KEY"
    retry_policy: RetryPolicy = RetryPolicy()
    rate_limit: int = 60
    cassette_path: str | None = None

    def __post_init__(self) -> None:
        if self.rate_limit <= 0:
            raise ValueError("rate_limit must be > 0 requests per minute")
        if self.kind in (BackendKind.REPLAY, BackendKind.RECORD) and not self.cassette_path:
            raise ValueError(f"{self.kind.value} backend requires cassette_path")
        if self.kind is BackendKind.HTTP_CHAT and not self.endpoint_url:
            raise ValueError("http_chat backend requires endpoint_url")


def request_to_dict(request: BackendRequest) -> dict[str, Any]:
    return {
        "model_id": request.model_id,
        "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
        "temperature": request.temperature,
        "schema_hint": request.schema_hint,
    }


def request_key(request: BackendRequest) -> str:
    """Deterministic digest over model id, messages, temperature, and schema hint."""
    canonical = json.dumps(
        request_to_dict(request), sort_keys=True, ensure_ascii=False, separators=(",", ":")
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class RateLimiter:
    """Sliding-window request limiter: grants per rolling minute never exceed the budget.

    ``clock`` and ``sleep`` are injectable so the windowing property can be
    verified under a simulated clock.
    """

    WINDOW_S = 60.0

    def __init__(
        self,
        budget_per_minute: int,
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if budget_per_minute <= 0:
            raise ValueError("budget must be positive")
        self.budget = budget_per_minute
        self._clock = clock
        self._sleep = sleep
        self._grants: deque[float] = deque()
        self._lock = threading.Lock()

    def _prune(self, now: float) -> None:
        while self._grants and now - self._grants[0] >= self.WINDOW_S:
            self._grants.popleft()

    def try_acquire(self) -> bool:
        with self._lock:
            now = self._clock()
            self._prune(now)
            if len(self._grants) < self.budget:
                self._grants.append(now)
                return True
            return False

    def acquire_slot(self) -> None:
        """Block until a slot is available, then take it."""
        while True:
            with self._lock:
                now = self._clock()
                self._prune(now)
                if len(self._grants) < self.budget:
                    self._grants.append(now)
                    return
                wait = self.WINDOW_S - (now - self._grants[0])
            self._sleep(max(wait, 1e-4))


ScriptItem = Union[str, BackendResponse, Exception]


def _word_usage(request: BackendRequest, text: str) -> UsageStats:
    prompt_tokens = sum(len(m.content.split()) for m in request.messages)
    return UsageStats(prompt_tokens=prompt_tokens, completion_tokens=len(text.split()))


class Backend:
    """Uniform completion interface; implementations are thread-safe."""

    model_id: str = "default"

    def complete(self, request: BackendRequest) -> BackendResponse:
        raise NotImplementedError


class ScriptedBackend(Backend):
    """Deterministic backend programmed with responses, for offline testing.

    The script is either a sequence consumed in order or a callable of the
    request (useful when completion order is not deterministic, e.g. under
    concurrency). Items may be plain text, full responses, or exceptions to
    raise. Every request is logged on ``requests``.
    """

    def __init__(
        self,
        script: Iterable[ScriptItem] | Callable[[BackendRequest], ScriptItem],
        model_id: str = "scripted",
    ) -> None:
        self.model_id = model_id
        self._fn = script if callable(script) else None
        self._queue: deque[ScriptItem] | None = None if callable(script) else deque(script)
        self.requests: list[BackendRequest] = []
        self._lock = threading.Lock()

    @property
    def call_count(self) -> int:
        return len(self.requests)

    def complete(self, request: BackendRequest) -> BackendResponse:
        with self._lock:
            self.requests.append(request)
            if self._fn is not None:
                item = self._fn(request)
            else:
                assert self._queue is not None
                if not self._queue:
                    raise ScriptExhausted(f"no scripted response left for request {len(self.requests)}")
                item = self._queue.popleft()
        if isinstance(item, Exception):
            raise item
        if isinstance(item, BackendResponse):
            return item
        return BackendResponse(text=item, usage=_word_usage(request, item))


# One lock per cassette path so concurrent recorders never interleave lines.
_cassette_locks: dict[str, threading.Lock] = {}
_cassette_locks_guard = threading.Lock()


def _cassette_lock(path: str) -> threading.Lock:
    with _cassette_locks_guard:
        return _cassette_locks.setdefault(str(Path(path).resolve()), threading.Lock())


def load_cassette(path: str) -> dict[str, dict[str, Any]]:
    """Read a cassette into a key -> entry map; later entries win on duplicate keys."""
    entries: dict[str, dict[str, Any]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError as exc:
                raise BackendError(f"malformed cassette line {lineno} in {path}") from exc
            entries[entry["key"]] = entry
    return entries


def append_cassette_entry(path: str, request: BackendRequest, response: BackendResponse) -> None:
    entry = {
        "key": request_key(request),
        "request": request_to_dict(request),
        "response": {
            "text": response.text,
            "usage": {
                "prompt_tokens": response.usage.prompt_tokens,
                "completion_tokens": response.usage.completion_tokens,
            },
        },
    }
    line = json.dumps(entry, ensure_ascii=False, sort_keys=True)
    with _cassette_lock(path):
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
            fh.flush()


class ReplayBackend(Backend):
    """Serve recorded responses; any request without an exact key match fails loudly."""

    def __init__(self, config: BackendConfig) -> None:
        assert config.cassette_path is not None
        self.model_id = config.model_id
        self._entries = load_cassette(config.cassette_path)
        self._path = config.cassette_path

    def complete(self, request: BackendRequest) -> BackendResponse:
        key = request_key(request)
        entry = self._entries.get(key)
        if entry is None:
            raise ReplayMiss(f"no cassette entry for key {key} in {self._path}")
        usage = entry["response"]["usage"]
        return BackendResponse(
            text=entry["response"]["text"],
            usage=UsageStats(usage["prompt_tokens"], usage["completion_tokens"]),
            latency_s=0.0,
        )


class RecordBackend(Backend):
    """Pass requests to an inner backend and append every exchange to the cassette."""

    def __init__(self, config: BackendConfig, inner: Backend | None = None) -> None:
        assert config.cassette_path is not None
        self.model_id = config.model_id
        self._inner = inner if inner is not None else HttpChatBackend(config)
        self._path = config.cassette_path

    def complete(self, request: BackendRequest) -> BackendResponse:
        response = self._inner.complete(request)
        append_cassette_entry(self._path, request, response)
        return response


Transport = Callable[[str, dict[str, str], dict[str, Any], float], "tuple[int, dict[str, Any]]"]


def _http_transport(url: str, headers: dict[str, str], body: dict[str, Any], timeout: float):
    resp = _requests.post(url, headers=headers, json=body, timeout=timeout)
    try:
        payload = resp.json()
    except ValueError:
        payload = {"error": resp.text}
    return resp.status_code, payload


class HttpChatBackend(Backend):
    """OpenAI-compatible chat-completions client with retries and rate limiting.

    POSTs to ``{endpoint_url}/chat/completions`` with a bearer token read
    from the environment variable named in the config. Transport failures
    and retryable status codes back off exponentially with full jitter; at
    most ``retry_policy.max_attempts`` attempts are ever made per call.
    """

    RETRYABLE_STATUS = frozenset({429, 500, 502, 503, 504})

    def __init__(
        self,
        config: BackendConfig,
        transport: Transport | None = None,
        limiter: RateLimiter | None = None,
        wait_for_slot: bool = True,
        sleep: Callable[[float], None] = time.sleep,
        env: Callable[[str], str | None] | None = None,
        timeout_s: float = 120.0,
    ) -> None:
        self.config = config
        self.model_id = config.model_id
        self._transport = transport or _http_transport
        self._limiter = limiter or RateLimiter(config.rate_limit)
        self._wait_for_slot = wait_for_slot
        self._sleep = sleep
        self._timeout_s = timeout_s
        if env is None:
            import os

            env = os.environ.get
        self._env = env
        self._rng = random.Random()

    def _api_key(self) -> str:
        key = self._env(self.config.api_key_source)
        if not key:
            raise AuthMissing(
                f"environment variable {self.config.api_key_source!r} is unset or empty"
            )
        return key

    def _body(self, request: BackendRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": request.model_id,
            "messages": [{"role": m.role.value, "content": m.content} for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        if request.schema_hint is not None:
            body["response_format"] = {"type": "json_object"}
        return body

    def complete(self, request: BackendRequest) -> BackendResponse:
        key = self._api_key()
        if self._wait_for_slot:
            self._limiter.acquire_slot()
        elif not self._limiter.try_acquire():
            raise RateLimited(
                f"rate budget of {self.config.rate_limit}/min exhausted and waiting disabled"
            )
        url = self.config.endpoint_url.rstrip("/") + "/chat/completions"
        headers = {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}
        body = self._body(request)
        policy = self.config.retry_policy
        last_error: str = "no attempt made"
        started = time.monotonic()
        for attempt in range(policy.max_attempts):
            if attempt:
                self._sleep(self._rng.uniform(0, policy.backoff_base * (2 ** (attempt - 1))))
            try:
                status, payload = self._transport(url, headers, body, self._timeout_s)
            except Exception as exc:  # transport-level failure, retryable
                last_error = f"transport error: {exc}"
                continue
            if status in self.RETRYABLE_STATUS:
                last_error = f"HTTP {status}: {payload.get('error', '')}"
                continue
            if status != 200:
                raise NetworkError(f"HTTP {status}: {payload.get('error', payload)}")
            return self._parse_payload(payload, time.monotonic() - started)
        raise NetworkError(
            f"gave up after {policy.max_attempts} attempt(s); last error: {last_error}"
        )

    @staticmethod
    def _parse_payload(payload: dict[str, Any], latency_s: float) -> BackendResponse:
        try:
            text = payload["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise NetworkError(f"malformed completion payload: {payload}") from exc
        usage = payload.get("usage") or {}
        return BackendResponse(
            text=text,
            usage=UsageStats(
                prompt_tokens=int(usage.get("prompt_tokens", 0)),
                completion_tokens=int(usage.get("completion_tokens", 0)),
            ),
            latency_s=latency_s,
        )


def make_backend(config: BackendConfig, inner: Backend | None = None) -> Backend:
    """Materialize a backend instance from its config.

    Scripted backends carry their programmed responses in code, not config;
    construct :class:`ScriptedBackend` directly for those.
    """
    if config.kind is BackendKind.HTTP_CHAT:
        return HttpChatBackend(config)
    if config.kind is BackendKind.REPLAY:
        return ReplayBackend(config)
    if config.kind is BackendKind.RECORD:
        if inner is None and not config.endpoint_url:
            raise ValueError("record backend without an explicit inner backend requires endpoint_url")
        return RecordBackend(config, inner=inner)
    raise ValueError(f"cannot build a {config.kind.value} backend from config alone")
