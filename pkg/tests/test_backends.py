import json
import random

import pytest

from iterthought.backends import (
    AuthMissing,
    BackendConfig,
    BackendKind,
    BackendRequest,
    BackendResponse,
    ChatMessage,
    HttpChatBackend,
    NetworkError,
    RateLimited,
    RateLimiter,
    RecordBackend,
    ReplayBackend,
    ReplayMiss,
    RetryPolicy,
    Role,
    ScriptedBackend,
    append_cassette_entry,
    load_cassette,
    request_key,
)
from iterthought.core import UsageStats


def req(user: str = "hi", temperature: float = 0.0, model: str = "m1", system: str = "sys") -> BackendRequest:
    return BackendRequest(
        model_id=model,
        messages=(ChatMessage(Role.SYSTEM, system), ChatMessage(Role.USER, user)),
        temperature=temperature,
    )


class TestRequestValidation:
    def test_messages_required(self):
        with pytest.raises(ValueError):
            BackendRequest(model_id="m", messages=())

    def test_first_message_system(self):
        with pytest.raises(ValueError):
            BackendRequest(model_id="m", messages=(ChatMessage(Role.USER, "hi"),))

    def test_empty_user_content_rejected(self):
        with pytest.raises(ValueError):
            ChatMessage(Role.USER, "")


class TestRequestKey:
    def test_identical_requests_identical_keys(self):
        assert request_key(req()) == request_key(req())

    def test_temperature_changes_key(self):
        assert request_key(req(temperature=0.0)) != request_key(req(temperature=0.5))

    def test_message_changes_key(self):
        assert request_key(req(user="hi")) != request_key(req(user="hi!"))

    def test_schema_hint_changes_key(self):
        base = req()
        hinted = BackendRequest(
            model_id=base.model_id, messages=base.messages, schema_hint='{"answer":"string"}'
        )
        assert request_key(base) != request_key(hinted)

    def test_no_collisions_over_random_requests(self):
        rng = random.Random(1234)
        keys = set()
        for i in range(10_000):
            r = req(user=f"question {i} {rng.random()}", temperature=rng.choice([0.0, 0.3, 0.7]))
            keys.add(request_key(r))
        assert len(keys) == 10_000


class TestScripted:
    def test_programmed_echo(self):
        backend = ScriptedBackend(["hello"])
        assert backend.complete(req()).text == "hello"
        assert backend.call_count == 1

    def test_consumed_in_order(self):
        backend = ScriptedBackend(["a", "b"])
        assert backend.complete(req()).text == "a"
        assert backend.complete(req()).text == "b"

    def test_callable_script(self):
        backend = ScriptedBackend(lambda r: r.messages[-1].content.upper())
        assert backend.complete(req(user="shout")).text == "SHOUT"

    def test_exception_items_raise(self):
        backend = ScriptedBackend([NetworkError("boom")])
        with pytest.raises(NetworkError):
            backend.complete(req())


class FakeClock:
    def __init__(self) -> None:
        self.t = 0.0

    def monotonic(self) -> float:
        return self.t

    def sleep(self, seconds: float) -> None:
        self.t += seconds


class TestRateLimiter:
    def test_under_budget_immediate(self):
        clock = FakeClock()
        limiter = RateLimiter(60, clock=clock.monotonic, sleep=clock.sleep)
        limiter.acquire_slot()
        assert clock.t == 0.0

    def test_over_budget_delays_third_grant(self):
        clock = FakeClock()
        limiter = RateLimiter(2, clock=clock.monotonic, sleep=clock.sleep)
        limiter.acquire_slot()
        limiter.acquire_slot()
        limiter.acquire_slot()
        assert clock.t >= 60.0

    def test_try_acquire_refuses_over_budget(self):
        clock = FakeClock()
        limiter = RateLimiter(1, clock=clock.monotonic, sleep=clock.sleep)
        assert limiter.try_acquire()
        assert not limiter.try_acquire()
        clock.t += 60.0
        assert limiter.try_acquire()

    @pytest.mark.parametrize("budget,minutes", [(3, 4), (5, 3), (1, 5)])
    def test_all_grants_within_window_budget(self, budget, minutes):
        clock = FakeClock()
        limiter = RateLimiter(budget, clock=clock.monotonic, sleep=clock.sleep)
        grant_times = []
        for _ in range(budget * minutes):
            limiter.acquire_slot()
            grant_times.append(clock.t)
        # Everyone got a slot, and no rolling minute ever exceeded the budget.
        assert len(grant_times) == budget * minutes
        for i, start in enumerate(grant_times):
            in_window = [t for t in grant_times[i:] if t - start < 60.0]
            assert len(in_window) <= budget


def http_config(**overrides) -> BackendConfig:
    defaults = dict(
        kind=BackendKind.HTTP_CHAT,
        model_id="m1",
        endpoint_url="https://example.test/v1",
        api_key_source="FAKE_KEY_VAR",
        retry_policy=RetryPolicy(max_attempts=3, backoff_base=0.0),
    )
    defaults.update(overrides)
    return BackendConfig(**defaults)


def ok_payload(text: str = "pong") -> dict:
    return {
        "choices": [{"message": {"content": text}}],
        "usage": {"prompt_tokens": 7, "completion_tokens": 3},
    }


class TestHttpChat:
    def env(self, mapping):
        return mapping.get

    def test_auth_missing(self):
        backend = HttpChatBackend(http_config(), transport=lambda *a: (200, ok_payload()), env=self.env({}))
        with pytest.raises(AuthMissing):
            backend.complete(req())

    def test_success_parses_text_and_usage(self):
        backend = HttpChatBackend(
            http_config(), transport=lambda *a: (200, ok_payload("hi there")), env=self.env({"FAKE_KEY_VAR": "k"})
        )
        response = backend.complete(req())
        assert response.text == "hi there"
        assert response.usage == UsageStats(7, 3)

    def test_retries_capped_at_max_attempts(self):
        attempts = []

        def transport(url, headers, body, timeout):
            attempts.append(1)
            raise ConnectionError("down")

        backend = HttpChatBackend(
            http_config(), transport=transport, env=self.env({"FAKE_KEY_VAR": "k"}), sleep=lambda s: None
        )
        with pytest.raises(NetworkError):
            backend.complete(req())
        assert len(attempts) == 3

    def test_recovers_after_retryable_status(self):
        responses = iter([(429, {"error": "slow down"}), (200, ok_payload())])
        backend = HttpChatBackend(
            http_config(),
            transport=lambda *a: next(responses),
            env=self.env({"FAKE_KEY_VAR": "k"}),
            sleep=lambda s: None,
        )
        assert backend.complete(req()).text == "pong"

    def test_non_retryable_status_raises_immediately(self):
        attempts = []

        def transport(url, headers, body, timeout):
            attempts.append(1)
            return 400, {"error": "bad request"}

        backend = HttpChatBackend(
            http_config(), transport=transport, env=self.env({"FAKE_KEY_VAR": "k"})
        )
        with pytest.raises(NetworkError):
            backend.complete(req())
        assert len(attempts) == 1

    def test_wire_shape(self):
        seen = {}

        def transport(url, headers, body, timeout):
            seen.update(url=url, headers=headers, body=body)
            return 200, ok_payload()

        backend = HttpChatBackend(
            http_config(), transport=transport, env=self.env({"FAKE_KEY_VAR": "sk-test"})
        )
        request = BackendRequest(
            model_id="m1",
            messages=(ChatMessage(Role.SYSTEM, "s"), ChatMessage(Role.USER, "u")),
            schema_hint='{"answer":"string"}',
            max_output_tokens=77,
        )
        backend.complete(request)
        assert seen["url"] == "https://example.test/v1/chat/completions"
        assert seen["headers"]["Authorization"] == "Bearer sk-test"
        assert seen["body"]["model"] == "m1"
        assert seen["body"]["messages"] == [
            {"role": "system", "content": "s"},
            {"role": "user", "content": "u"},
        ]
        assert seen["body"]["temperature"] == 0.0
        assert seen["body"]["max_tokens"] == 77
        assert seen["body"]["response_format"] == {"type": "json_object"}

    def test_rate_limited_when_waiting_disabled(self):
        clock = FakeClock()
        limiter = RateLimiter(1, clock=clock.monotonic, sleep=clock.sleep)
        backend = HttpChatBackend(
            http_config(),
            transport=lambda *a: (200, ok_payload()),
            limiter=limiter,
            wait_for_slot=False,
            env=self.env({"FAKE_KEY_VAR": "k"}),
        )
        backend.complete(req())
        with pytest.raises(RateLimited):
            backend.complete(req())


class TestCassette:
    def cassette_config(self, path, kind=BackendKind.REPLAY):
        return BackendConfig(kind=kind, model_id="m1", cassette_path=str(path))

    def test_record_then_replay_identity(self, tmp_path):
        path = tmp_path / "tape.jsonl"
        recorder = RecordBackend(self.cassette_config(path, BackendKind.RECORD), inner=ScriptedBackend(["exact bytes é"]))
        recorded = recorder.complete(req(user="play me"))
        replay = ReplayBackend(self.cassette_config(path))
        replayed = replay.complete(req(user="play me"))
        assert replayed.text == recorded.text
        assert replayed.usage == recorded.usage

    def test_replay_miss_on_one_character_difference(self, tmp_path):
        path = tmp_path / "tape.jsonl"
        recorder = RecordBackend(self.cassette_config(path, BackendKind.RECORD), inner=ScriptedBackend(["x"]))
        recorder.complete(req(user="play me"))
        replay = ReplayBackend(self.cassette_config(path))
        with pytest.raises(ReplayMiss):
            replay.complete(req(user="play mE"))

    def test_cassette_entries_are_appended(self, tmp_path):
        path = tmp_path / "tape.jsonl"
        append_cassette_entry(str(path), req(user="one"), BackendResponse(text="1"))
        append_cassette_entry(str(path), req(user="two"), BackendResponse(text="2"))
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2
        entries = load_cassette(str(path))
        assert len(entries) == 2
        assert all({"key", "request", "response"} <= set(json.loads(line)) for line in lines)

    def test_replay_requires_cassette(self):
        with pytest.raises(ValueError):
            BackendConfig(kind=BackendKind.REPLAY)
