"""The four reasoning strategies: single-shot IO and CoT, and the two
guide-driven refinement loops.

The autonomous loop lets the answering agent terminate itself through the
``iteration_stop`` flag, bounded by a maximum number of refinements; with
bound T it makes between 1 and T+1 answering calls and always one fewer
guide calls. The guided loop runs a fixed number of refinement rounds with
no early exit, then has the guide issue an explicit final instruction:
exactly N+1 answering calls and N guide calls.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from enum import Enum

from .agents import (
    AgentConfig,
    AgentError,
    UsageMeter,
    format_previous_response,
    ida_generate,
    llma_respond,
    llma_schema,
    render_template,
)
from .backends import BackendError
from .core import (
    IterationRecord,
    LlmaOutput,
    Prompt,
    PromptOrigin,
    Query,
    RunTrace,
    StrategyKind,
    TerminatedBy,
)


class StopSource(str, Enum):
    MODEL_SIGNAL = "model_signal"
    FORCED = "forced"


@dataclass(frozen=True)
class StrategyConfig:
    """Strategy kind plus its iteration bound (ignored by IO/CoT)."""

    kind: StrategyKind
    max_iterations: int | None = None

    def __post_init__(self) -> None:
        if self.kind in (StrategyKind.AIOT, StrategyKind.GIOT):
            if self.max_iterations is None or self.max_iterations < 1:
                raise ValueError(f"{self.kind.value} requires max_iterations >= 1")


@dataclass(frozen=True)
class StopDecision:
    """Whether iteration ends after a response; source is meaningful on stops."""

    stop: bool
    source: StopSource


class MissingSignal(Exception):
    """An autonomous-mode response lacked the iteration_stop flag."""


class RunError(Exception):
    """A backend or schema failure mid-run, carrying the partial trace."""

    def __init__(self, query: Query, strategy: StrategyKind, partial_records: tuple[IterationRecord, ...], cause: Exception) -> None:
        super().__init__(f"{strategy.value} run for query {query.id!r} failed after {len(partial_records)} record(s): {cause}")
        self.query = query
        self.strategy = strategy
        self.partial_records = partial_records
        self.cause = cause


def evaluate_stop(response: LlmaOutput, config: StrategyConfig, i: int) -> StopDecision:
    """Decide whether iteration ends after response ``i`` (0 = the initial response).

    Autonomous mode reads the model's flag, forcing a stop once the
    refinement bound is reached; guided mode ignores any signal before the
    final round and forces the stop there; single-shot strategies always
    stop.
    """
    if config.kind in (StrategyKind.IO, StrategyKind.COT):
        return StopDecision(stop=True, source=StopSource.FORCED)
    bound = config.max_iterations or 0
    if config.kind is StrategyKind.AIOT:
        if response.iteration_stop is None:
            raise MissingSignal("autonomous-mode response carries no iteration_stop flag")
        if response.iteration_stop:
            return StopDecision(stop=True, source=StopSource.MODEL_SIGNAL)
        if i >= bound:
            return StopDecision(stop=True, source=StopSource.FORCED)
        return StopDecision(stop=False, source=StopSource.MODEL_SIGNAL)
    # Guided: the schedule alone decides.
    if i >= bound:
        return StopDecision(stop=True, source=StopSource.FORCED)
    return StopDecision(stop=False, source=StopSource.MODEL_SIGNAL)


def _initial_prompt(agents: AgentConfig, template_name: str, query: Query) -> Prompt:
    template = agents.templates[template_name]
    return Prompt(text=render_template(template, {"query": query.text}), origin=PromptOrigin.INITIAL)


def _finish(
    query: Query,
    strategy: StrategyKind,
    records: list[IterationRecord],
    terminated_by: TerminatedBy,
    started: float,
) -> RunTrace:
    return RunTrace(
        query=query,
        strategy=strategy,
        iterations=tuple(records),
        final_answer=records[-1].response.answer,
        terminated_by=terminated_by,
        wall_time_ms=int((time.perf_counter() - started) * 1000),
    )


def _single_shot(agents: AgentConfig, query: Query, kind: StrategyKind, template_name: str) -> RunTrace:
    started = time.perf_counter()
    records: list[IterationRecord] = []
    try:
        prompt = _initial_prompt(agents, template_name, query)
        meter = UsageMeter()
        response = llma_respond(
            agents, query, prompt,
            schema=llma_schema(include_stop=False),
            template=agents.templates[template_name],
            meter=meter,
        )
        records.append(
            IterationRecord(
                index=0, prompt=prompt, response=response,
                stop_decision=True, backend_usage=meter.snapshot(),
            )
        )
    except (BackendError, AgentError, MissingSignal) as exc:
        raise RunError(query, kind, tuple(records), exc) from exc
    return _finish(query, kind, records, TerminatedBy.SINGLE_SHOT, started)


def run_io(agents: AgentConfig, query: Query) -> RunTrace:
    """One direct answering call, no guide involvement."""
    return _single_shot(agents, query, StrategyKind.IO, "io_single")


def run_cot(agents: AgentConfig, query: Query) -> RunTrace:
    """One answering call eliciting explicit step-by-step reasoning."""
    return _single_shot(agents, query, StrategyKind.COT, "cot_single")


def _iteration_prompt(agents: AgentConfig, query: Query, prev: LlmaOutput, directive: str, origin: PromptOrigin) -> Prompt:
    template = agents.templates["llma_iteration"]
    text = render_template(
        template,
        {
            "query": query.text,
            "previous_response": format_previous_response(prev),
            "mode_directive": directive,
        },
    )
    return Prompt(text=text, origin=origin)


def run_aiot(agents: AgentConfig, query: Query, max_iterations: int) -> RunTrace:
    """Autonomous loop: refine until the model signals stop or the bound is hit.

    The bound counts refinements after the initial response, so up to
    ``max_iterations + 1`` answering calls are made in total.
    """
    if max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    config = StrategyConfig(kind=StrategyKind.AIOT, max_iterations=max_iterations)
    started = time.perf_counter()
    records: list[IterationRecord] = []
    schema = llma_schema(include_stop=True)
    try:
        prompt = _initial_prompt(agents, "llma_initial", query)
        meter = UsageMeter()
        response = llma_respond(agents, query, prompt, schema=schema, meter=meter)
        decision = evaluate_stop(response, config, 0)
        records.append(
            IterationRecord(index=0, prompt=prompt, response=response,
                            stop_decision=decision.stop, backend_usage=meter.snapshot())
        )
        i = 1
        while not decision.stop and i <= max_iterations:
            meter = UsageMeter()
            guidance = ida_generate(agents, query, response, final_turn=False, meter=meter)
            prompt = _iteration_prompt(agents, query, response, guidance.next_prompt, PromptOrigin.IDA_GENERATED)
            response = llma_respond(agents, query, prompt, schema=schema, meter=meter)
            decision = evaluate_stop(response, config, i)
            records.append(
                IterationRecord(index=i, prompt=prompt, response=response,
                                stop_decision=decision.stop, backend_usage=meter.snapshot())
            )
            i += 1
    except (BackendError, AgentError, MissingSignal) as exc:
        raise RunError(query, StrategyKind.AIOT, tuple(records), exc) from exc
    terminated = (
        TerminatedBy.STOP_SIGNAL
        if decision.source is StopSource.MODEL_SIGNAL
        else TerminatedBy.MAX_ITERATIONS
    )
    return _finish(query, StrategyKind.AIOT, records, terminated, started)


def run_giot(agents: AgentConfig, query: Query, rounds: int) -> RunTrace:
    """Guided loop: a fixed number of refinement rounds with no early exit.

    Rounds 1..N-1 refine under guide instructions; round N carries the
    explicit final instruction, and only there may the model declare its
    answer final. Any stop signal volunteered earlier is ignored.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    config = StrategyConfig(kind=StrategyKind.GIOT, max_iterations=rounds)
    started = time.perf_counter()
    records: list[IterationRecord] = []
    try:
        prompt = _initial_prompt(agents, "llma_initial", query)
        meter = UsageMeter()
        response = llma_respond(agents, query, prompt, schema=llma_schema(include_stop=False), meter=meter)
        decision = evaluate_stop(response, config, 0)
        records.append(
            IterationRecord(index=0, prompt=prompt, response=response,
                            stop_decision=decision.stop, backend_usage=meter.snapshot())
        )
        for i in range(1, rounds):
            meter = UsageMeter()
            guidance = ida_generate(agents, query, response, final_turn=False, meter=meter)
            prompt = _iteration_prompt(agents, query, response, guidance.next_prompt, PromptOrigin.IDA_GENERATED)
            response = llma_respond(agents, query, prompt, schema=llma_schema(include_stop=False), meter=meter)
            decision = evaluate_stop(response, config, i)
            records.append(
                IterationRecord(index=i, prompt=prompt, response=response,
                                stop_decision=decision.stop, backend_usage=meter.snapshot())
            )
        meter = UsageMeter()
        guidance = ida_generate(agents, query, response, final_turn=True, meter=meter)
        prompt = _iteration_prompt(agents, query, response, guidance.next_prompt, PromptOrigin.IDA_FINAL)
        response = llma_respond(agents, query, prompt, schema=llma_schema(include_stop=True), meter=meter)
        decision = evaluate_stop(response, config, rounds)
        records.append(
            IterationRecord(index=rounds, prompt=prompt, response=response,
                            stop_decision=decision.stop, backend_usage=meter.snapshot())
        )
    except (BackendError, AgentError, MissingSignal) as exc:
        raise RunError(query, StrategyKind.GIOT, tuple(records), exc) from exc
    return _finish(query, StrategyKind.GIOT, records, TerminatedBy.MAX_ITERATIONS, started)


def run_strategy(agents: AgentConfig, config: StrategyConfig, query: Query) -> RunTrace:
    if config.kind is StrategyKind.IO:
        return run_io(agents, query)
    if config.kind is StrategyKind.COT:
        return run_cot(agents, query)
    if config.kind is StrategyKind.AIOT:
        assert config.max_iterations is not None
        return run_aiot(agents, query, config.max_iterations)
    assert config.max_iterations is not None
    return run_giot(agents, query, config.max_iterations)
