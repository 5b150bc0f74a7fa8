"""Shared domain types: queries, prompts, agent outputs, and the run trace.

Everything here is an immutable value object. A :class:`RunTrace` is the
complete record of one query's journey through a reasoning strategy: every
prompt sent to the answering agent, every structured response, every stop
decision, in order. Traces serialize losslessly to single-line JSON so a
benchmark run can be persisted one record per line and replayed or audited
later.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from enum import Enum
from typing import Any


class TaskKind(str, Enum):
    MULTIPLE_CHOICE = "multiple_choice"
    GAME_OF_24 = "game_of_24"
    MINI_CROSSWORD = "mini_crossword"
    MULTI_HOP_QA = "multi_hop_qa"
    FREEFORM = "freeform"


class PromptOrigin(str, Enum):
    INITIAL = "initial"
    IDA_GENERATED = "ida_generated"
    IDA_FINAL = "ida_final"


class StrategyKind(str, Enum):
    IO = "io"
    COT = "cot"
    AIOT = "aiot"
    GIOT = "giot"


class TerminatedBy(str, Enum):
    STOP_SIGNAL = "stop_signal"
    MAX_ITERATIONS = "max_iterations"
    SINGLE_SHOT = "single_shot"


class IndexMismatch(Exception):
    """A record was appended out of order."""


class EmptyTrace(Exception):
    """An operation required at least one iteration record."""


@dataclass(frozen=True)
class Query:
    """A user question headed into a reasoning loop."""

    id: str
    text: str
    task_kind: TaskKind = TaskKind.FREEFORM

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("query text must be non-empty")


@dataclass(frozen=True)
class Prompt:
    """One instruction sent to the answering agent."""

    text: str
    origin: PromptOrigin

    def __post_init__(self) -> None:
        if not self.text:
            raise ValueError("prompt text must be non-empty")


@dataclass(frozen=True)
class LlmaOutput:
    """Structured answering-agent response.

    ``iteration_stop`` is populated only when the strategy permits the model
    to declare its answer final (autonomous mode, or the declared final
    guided turn); otherwise it is ``None``.
    """

    answer: str
    reasoning: str = ""
    iteration_stop: bool | None = None


@dataclass(frozen=True)
class UsageStats:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be non-negative")

    def __add__(self, other: "UsageStats") -> "UsageStats":
        return UsageStats(
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
        )


@dataclass(frozen=True)
class IterationRecord:
    """One (prompt, response) exchange inside a run.

    ``backend_usage`` totals the tokens spent producing this record,
    including the guide-agent call and any validation-repair retries.
    """

    index: int
    prompt: Prompt
    response: LlmaOutput
    stop_decision: bool
    backend_usage: UsageStats = UsageStats()

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError("record index must be non-negative")


@dataclass(frozen=True)
class RunTrace:
    """Ordered record of one query's full run under a single strategy.

    An empty trace (no iterations yet) is a legal intermediate state for
    builders; all finished traces carry at least one record, and
    ``final_answer`` always mirrors the last record's answer.
    """

    query: Query
    strategy: StrategyKind
    iterations: tuple[IterationRecord, ...] = ()
    final_answer: str = ""
    terminated_by: TerminatedBy = TerminatedBy.SINGLE_SHOT
    wall_time_ms: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "iterations", tuple(self.iterations))
        for pos, record in enumerate(self.iterations):
            if record.index != pos:
                raise IndexMismatch(
                    f"record index {record.index} at position {pos}; indices must run 0..n-1"
                )
        if self.iterations:
            if self.iterations[0].prompt.origin is not PromptOrigin.INITIAL:
                raise ValueError("first record must carry the initial prompt")
            if self.final_answer != self.iterations[-1].response.answer:
                raise ValueError("final_answer must equal the last record's answer")
            if self.strategy in (StrategyKind.IO, StrategyKind.COT) and len(self.iterations) != 1:
                raise ValueError(f"{self.strategy.value} traces hold exactly one record")
        elif self.final_answer:
            raise ValueError("empty trace cannot carry a final answer")
        if self.wall_time_ms < 0:
            raise ValueError("wall_time_ms must be non-negative")


def trace_append(trace: RunTrace, record: IterationRecord) -> RunTrace:
    """Return ``trace`` extended by one record; indices must stay contiguous."""
    if record.index != len(trace.iterations):
        raise IndexMismatch(
            f"expected record index {len(trace.iterations)}, got {record.index}"
        )
    return dataclasses.replace(
        trace,
        iterations=trace.iterations + (record,),
        final_answer=record.response.answer,
    )


def trace_final_answer(trace: RunTrace) -> str:
    if not trace.iterations:
        raise EmptyTrace("trace has no iterations")
    return trace.iterations[-1].response.answer


def trace_to_dict(trace: RunTrace) -> dict[str, Any]:
    return {
        "query": {
            "id": trace.query.id,
            "text": trace.query.text,
            "task_kind": trace.query.task_kind.value,
        },
        "strategy": trace.strategy.value,
        "iterations": [
            {
                "index": rec.index,
                "prompt": {"text": rec.prompt.text, "origin": rec.prompt.origin.value},
                "response": {
                    "answer": rec.response.answer,
                    "reasoning": rec.response.reasoning,
                    "iteration_stop": rec.response.iteration_stop,
                },
                "stop_decision": rec.stop_decision,
                "usage": {
                    "prompt_tokens": rec.backend_usage.prompt_tokens,
                    "completion_tokens": rec.backend_usage.completion_tokens,
                },
            }
            for rec in trace.iterations
        ],
        "final_answer": trace.final_answer,
        "terminated_by": trace.terminated_by.value,
        "wall_time_ms": trace.wall_time_ms,
    }


def trace_from_dict(data: dict[str, Any]) -> RunTrace:
    return RunTrace(
        query=Query(
            id=data["query"]["id"],
            text=data["query"]["text"],
            task_kind=TaskKind(data["query"]["task_kind"]),
        ),
        strategy=StrategyKind(data["strategy"]),
        iterations=tuple(
            IterationRecord(
                index=rec["index"],
                prompt=Prompt(
                    text=rec["prompt"]["text"],
                    origin=PromptOrigin(rec["prompt"]["origin"]),
                ),
                response=LlmaOutput(
                    answer=rec["response"]["answer"],
                    reasoning=rec["response"]["reasoning"],
                    iteration_stop=rec["response"]["iteration_stop"],
                ),
                stop_decision=rec["stop_decision"],
                backend_usage=UsageStats(
                    prompt_tokens=rec["usage"]["prompt_tokens"],
                    completion_tokens=rec["usage"]["completion_tokens"],
                ),
            )
            for rec in data["iterations"]
        ),
        final_answer=data["final_answer"],
        terminated_by=TerminatedBy(data["terminated_by"]),
        wall_time_ms=data["wall_time_ms"],
    )


def trace_serialize(trace: RunTrace) -> str:
    """Serialize to a single JSON line; ``trace_deserialize`` inverts exactly."""
    return json.dumps(trace_to_dict(trace), ensure_ascii=False, sort_keys=True)


def trace_deserialize(line: str) -> RunTrace:
    return trace_from_dict(json.loads(line))
