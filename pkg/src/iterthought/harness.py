"""Benchmark orchestration: config files, dataset loading, concurrent runs,
trace persistence, and report emission.

Runs execute on a worker pool with a single writer appending finished traces
to ``traces.jsonl`` (one self-contained JSON record per line, tagged with
its trial index). Resume scans that file and skips completed
(instance, trial) pairs, so an interrupted benchmark continues without
duplicates. Wall times live in a ``meta.json`` sidecar so that, under replay
backends, the primary artifacts are byte-identical across invocations.
"""
from __future__ import annotations

import dataclasses
import json
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .agents import AgentConfig, load_templates
from .backends import BackendConfig, BackendKind, RetryPolicy, make_backend
from .core import (
    RunTrace,
    StrategyKind,
    TaskKind,
    UsageStats,
    trace_from_dict,
    trace_to_dict,
)
from .loops import RunError, StrategyConfig, run_strategy
from .metrics import Aggregate, InstanceScore, ScoreReport
from .tasks import (
    CrosswordGrid,
    GameOf24,
    MiniCrossword,
    MultiHopQA,
    MultipleChoice,
    Passage,
    TaskInstance,
    instance_kind,
    metric_names,
    score_answer,
    to_query,
)


class ConfigError(Exception):
    pass


class FormatError(Exception):
    """A dataset record failed validation; names the line and field."""

    def __init__(self, line: int, field: str, message: str) -> None:
        super().__init__(f"line {line}, field {field!r}: {message}")
        self.line = line
        self.field = field


class KindMismatch(Exception):
    """Dataset record kind differs from the expected task kind."""


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class AgentSettings:
    """Data-level agent configuration; backends materialize at run start."""

    ida_backend: BackendConfig
    llma_backend: BackendConfig
    templates_path: str | None = None
    repair_attempts: int = 2
    temperature: float = 0.0
    max_output_tokens: int = 1024


@dataclass(frozen=True)
class RunConfig:
    strategy: StrategyConfig
    agents: AgentSettings
    dataset_path: str
    task_kind: TaskKind
    output_dir: str
    trials: int = 1
    concurrency: int = 1
    seed: int = 0
    resume: bool = False

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.concurrency < 1:
            raise ConfigError("concurrency must be >= 1")


def _require_keys(data: dict[str, Any], allowed: set[str], required: set[str], where: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in {where}")
    missing = required - set(data)
    if missing:
        raise ConfigError(f"missing key {sorted(missing)[0]!r} in {where}")


def _backend_config_from(data: dict[str, Any], where: str) -> BackendConfig:
    _require_keys(
        data,
        {"kind", "model_id", "endpoint_url", "api_key_source", "retry_policy", "rate_limit", "cassette_path"},
        {"kind"},
        where,
    )
    retry = data.get("retry_policy") or {}
    _require_keys(retry, {"max_attempts", "backoff_base"}, set(), f"{where}.retry_policy")
    try:
        kind = BackendKind(data["kind"])
    except ValueError as exc:
        raise ConfigError(f"{where}.kind: unknown backend kind {data['kind']!r}") from exc
    try:
        return BackendConfig(
            kind=kind,
            model_id=data.get("model_id", "default"),
            endpoint_url=data.get("endpoint_url", ""),
            api_key_source=data.get("api_key_source", "OPENAI_API_KEY"),
            retry_policy=RetryPolicy(
                max_attempts=retry.get("max_attempts", 3),
                backoff_base=retry.get("backoff_base", 0.5),
            ),
            rate_limit=data.get("rate_limit", 60),
            cassette_path=data.get("cassette_path"),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_run_config(path: str | Path) -> RunConfig:
    """Parse a YAML run config; unknown keys are errors at every level."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    _require_keys(
        data,
        {"strategy", "agents", "dataset_path", "task_kind", "trials", "concurrency", "output_dir", "seed", "resume"},
        {"strategy", "agents", "dataset_path", "task_kind", "output_dir"},
        "config",
    )
    strat = data["strategy"]
    _require_keys(strat, {"kind", "max_iterations"}, {"kind"}, "strategy")
    try:
        strategy = StrategyConfig(
            kind=StrategyKind(strat["kind"]), max_iterations=strat.get("max_iterations")
        )
    except ValueError as exc:
        raise ConfigError(f"strategy: {exc}") from exc
    ag = data["agents"]
    _require_keys(
        ag,
        {"ida_backend", "llma_backend", "templates_path", "repair_attempts", "temperature", "max_output_tokens"},
        {"ida_backend", "llma_backend"},
        "agents",
    )
    agents = AgentSettings(
        ida_backend=_backend_config_from(ag["ida_backend"], "agents.ida_backend"),
        llma_backend=_backend_config_from(ag["llma_backend"], "agents.llma_backend"),
        templates_path=ag.get("templates_path"),
        repair_attempts=ag.get("repair_attempts", 2),
        temperature=ag.get("temperature", 0.0),
        max_output_tokens=ag.get("max_output_tokens", 1024),
    )
    try:
        task_kind = TaskKind(data["task_kind"])
    except ValueError as exc:
        raise ConfigError(f"unknown task_kind {data['task_kind']!r}") from exc
    return RunConfig(
        strategy=strategy,
        agents=agents,
        dataset_path=data["dataset_path"],
        task_kind=task_kind,
        output_dir=data["output_dir"],
        trials=data.get("trials", 1),
        concurrency=data.get("concurrency", 1),
        seed=data.get("seed", 0),
        resume=data.get("resume", False),
    )


def build_agents(settings: AgentSettings) -> AgentConfig:
    """Materialize live backends and templates from data-level settings."""
    return AgentConfig(
        ida_backend=make_backend(settings.ida_backend),
        llma_backend=make_backend(settings.llma_backend),
        templates=load_templates(settings.templates_path),
        repair_attempts=settings.repair_attempts,
        temperature=settings.temperature,
        max_output_tokens=settings.max_output_tokens,
    )


# ---------------------------------------------------------------------------
# Dataset loading


def _field(record: dict[str, Any], name: str, lineno: int) -> Any:
    if name not in record:
        raise FormatError(lineno, name, "missing")
    return record[name]


def _instance_from_record(record: dict[str, Any], lineno: int, number_range: tuple[int, int]) -> TaskInstance:
    kind = TaskKind(_field(record, "kind", lineno))
    instance_id = record.get("id", f"line-{lineno}")
    if not isinstance(instance_id, str) or not instance_id:
        raise FormatError(lineno, "id", "must be a non-empty string")
    try:
        if kind is TaskKind.MULTIPLE_CHOICE:
            options = _field(record, "options", lineno)
            if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
                raise FormatError(lineno, "options", "must be a list of strings")
            key = _field(record, "answer_key", lineno)
            if not isinstance(key, int):
                raise FormatError(lineno, "answer_key", "must be an integer index")
            return MultipleChoice(
                id=instance_id,
                question=_field(record, "question", lineno),
                options=tuple(options),
                answer_key=key,
            )
        if kind is TaskKind.GAME_OF_24:
            numbers = _field(record, "numbers", lineno)
            if (
                not isinstance(numbers, list)
                or len(numbers) != 4
                or not all(isinstance(n, int) for n in numbers)
            ):
                raise FormatError(lineno, "numbers", "must be a list of exactly 4 integers")
            lo, hi = number_range
            if not all(lo <= n <= hi for n in numbers):
                raise FormatError(lineno, "numbers", f"values must lie in [{lo}, {hi}]")
            return GameOf24(id=instance_id, numbers=tuple(numbers))
        if kind is TaskKind.MINI_CROSSWORD:
            solution = _field(record, "solution", lineno)
            if (
                not isinstance(solution, list)
                or len(solution) != 5
                or not all(isinstance(row, str) and len(row) == 5 for row in solution)
            ):
                raise FormatError(lineno, "solution", "must be 5 strings of 5 letters")
            return MiniCrossword(
                id=instance_id,
                across_clues=tuple(_field(record, "across_clues", lineno)),
                down_clues=tuple(_field(record, "down_clues", lineno)),
                solution=CrosswordGrid.from_rows(solution),
            )
        if kind is TaskKind.MULTI_HOP_QA:
            contexts = _field(record, "supporting_contexts", lineno)
            if not isinstance(contexts, list):
                raise FormatError(lineno, "supporting_contexts", "must be a list")
            passages = []
            for ctx in contexts:
                if not isinstance(ctx, dict) or "title" not in ctx or "text" not in ctx:
                    raise FormatError(lineno, "supporting_contexts", "entries need title and text")
                passages.append(Passage(title=ctx["title"], text=ctx["text"]))
            return MultiHopQA(
                id=instance_id,
                question=_field(record, "question", lineno),
                gold_answer=_field(record, "gold_answer", lineno),
                supporting_contexts=tuple(passages),
            )
    except FormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise FormatError(lineno, "record", str(exc)) from exc
    raise FormatError(lineno, "kind", f"unsupported kind {kind.value!r}")


def load_dataset(
    path: str | Path,
    expected_kind: TaskKind,
    number_range: tuple[int, int] = (1, 13),
) -> list[TaskInstance]:
    """Load a JSONL dataset, validating every record against its kind's schema."""
    instances: list[TaskInstance] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(lineno, "record", f"invalid JSON: {exc}") from exc
            if not isinstance(record, dict):
                raise FormatError(lineno, "record", "must be a JSON object")
            try:
                kind = TaskKind(record.get("kind"))
            except ValueError as exc:
                raise FormatError(lineno, "kind", f"unknown kind {record.get('kind')!r}") from exc
            if kind is not expected_kind:
                raise KindMismatch(
                    f"line {lineno}: record kind {kind.value!r} but expected {expected_kind.value!r}"
                )
            instance = _instance_from_record(record, lineno, number_range)
            if instance.id in seen_ids:
                raise FormatError(lineno, "id", f"duplicate id {instance.id!r}")
            seen_ids.add(instance.id)
            instances.append(instance)
    return instances


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class StrategyReport:
    expected: int
    completed: int
    failed: int
    failures: dict[str, int]
    iteration_histogram: dict[int, int]
    usage_totals: UsageStats
    scores: ScoreReport

    def reconciles(self) -> bool:
        return self.completed + self.failed == self.expected


@dataclass(frozen=True)
class BenchmarkReport:
    task_kind: TaskKind
    seed: int
    strategies: dict[str, StrategyReport]


def iteration_histogram(traces: list[RunTrace]) -> dict[int, int]:
    """Bucket k counts runs that took k guide-driven refinements."""
    counts = Counter(len(t.iterations) - 1 for t in traces)
    return dict(sorted(counts.items()))


def relative_improvement(baseline_mean: float, mean: float) -> float:
    """Percent improvement of ``mean`` over ``baseline_mean``."""
    return (mean - baseline_mean) / baseline_mean * 100.0


def _aggregate_to_dict(agg: Aggregate) -> dict[str, Any]:
    return {
        "mean": agg.mean,
        "std": agg.std,
        "ci_low": agg.ci_low,
        "ci_high": agg.ci_high,
        "n": agg.n,
    }


def _strategy_report_to_dict(report: StrategyReport) -> dict[str, Any]:
    return {
        "counts": {
            "expected": report.expected,
            "completed": report.completed,
            "failed": report.failed,
        },
        "failures": dict(sorted(report.failures.items())),
        "iteration_histogram": {str(k): v for k, v in sorted(report.iteration_histogram.items())},
        "usage_totals": {
            "prompt_tokens": report.usage_totals.prompt_tokens,
            "completion_tokens": report.usage_totals.completion_tokens,
        },
        "metrics": {name: _aggregate_to_dict(agg) for name, agg in report.scores.aggregates.items()},
        "per_instance": [
            {"query_id": s.query_id, "trial": s.trial, "metric": s.metric, "value": s.value}
            for s in report.scores.per_instance
        ],
    }


def _strategy_report_from_dict(data: dict[str, Any]) -> StrategyReport:
    scores = ScoreReport(
        per_instance=tuple(
            InstanceScore(
                query_id=s["query_id"], trial=s["trial"], metric=s["metric"], value=s["value"]
            )
            for s in data["per_instance"]
        ),
        aggregates={
            name: Aggregate(
                mean=a["mean"], std=a["std"], ci_low=a["ci_low"], ci_high=a["ci_high"], n=a["n"]
            )
            for name, a in data["metrics"].items()
        },
    )
    return StrategyReport(
        expected=data["counts"]["expected"],
        completed=data["counts"]["completed"],
        failed=data["counts"]["failed"],
        failures=dict(data["failures"]),
        iteration_histogram={int(k): v for k, v in data["iteration_histogram"].items()},
        usage_totals=UsageStats(
            prompt_tokens=data["usage_totals"]["prompt_tokens"],
            completion_tokens=data["usage_totals"]["completion_tokens"],
        ),
        scores=scores,
    )


def report_to_dict(report: BenchmarkReport) -> dict[str, Any]:
    return {
        "task_kind": report.task_kind.value,
        "seed": report.seed,
        "strategies": {
            name: _strategy_report_to_dict(strat) for name, strat in sorted(report.strategies.items())
        },
    }


def report_from_dict(data: dict[str, Any]) -> BenchmarkReport:
    return BenchmarkReport(
        task_kind=TaskKind(data["task_kind"]),
        seed=data["seed"],
        strategies={
            name: _strategy_report_from_dict(strat) for name, strat in data["strategies"].items()
        },
    )


def load_report(output_dir: str | Path) -> BenchmarkReport:
    path = Path(output_dir) / "report.json"
    if not path.exists():
        raise ConfigError(f"no report.json under {output_dir}")
    return report_from_dict(json.loads(path.read_text(encoding="utf-8")))


def format_table(report: BenchmarkReport) -> str:
    """Plain-text table: per-strategy metric means and improvement vs the IO baseline."""
    lines = [f"task: {report.task_kind.value}"]
    io_report = report.strategies.get(StrategyKind.IO.value)
    metric_names = sorted({m for strat in report.strategies.values() for m in strat.scores.aggregates})
    show_improvement = io_report is not None and len(report.strategies) > 1
    for metric in metric_names:
        lines.append("")
        header = f"{'strategy':<10} {'n':>6} {metric:>12}"
        if show_improvement:
            header += f" {'vs io':>10}"
        lines.append(header)
        for name in sorted(report.strategies):
            strat = report.strategies[name]
            agg = strat.scores.aggregates.get(metric)
            if agg is None:
                continue
            row = f"{name:<10} {agg.n:>6} {agg.mean:>12.4f}"
            if show_improvement:
                baseline = io_report.scores.aggregates.get(metric) if io_report else None
                if name != StrategyKind.IO.value and baseline is not None and baseline.mean != 0:
                    row += f" {relative_improvement(baseline.mean, agg.mean):>+9.2f}%"
                else:
                    row += f" {'--':>10}"
            lines.append(row)
    lines.append("")
    for name in sorted(report.strategies):
        strat = report.strategies[name]
        hist = ", ".join(f"{k}:{v}" for k, v in sorted(strat.iteration_histogram.items()))
        lines.append(
            f"{name}: expected={strat.expected} completed={strat.completed} failed={strat.failed}"
            f" refinements=[{hist}] tokens={strat.usage_totals.prompt_tokens}+{strat.usage_totals.completion_tokens}"
        )
    return "\n".join(lines) + "\n"


def emit_report(report: BenchmarkReport, fmt: str, output_dir: str | Path) -> list[Path]:
    """Write report artifacts in the requested format; returns the paths written."""
    for name, strat in report.strategies.items():
        if not strat.reconciles():
            raise ValueError(
                f"report does not reconcile for {name}: "
                f"{strat.completed} completed + {strat.failed} failed != {strat.expected} expected"
            )
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if fmt == "machine":
        path = out / "report.json"
        path.write_text(
            json.dumps(report_to_dict(report), sort_keys=True, indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
        written.append(path)
        scores_path = out / "scores.jsonl"
        with open(scores_path, "w", encoding="utf-8") as fh:
            for name in sorted(report.strategies):
                for s in report.strategies[name].scores.per_instance:
                    fh.write(
                        json.dumps(
                            {
                                "strategy": name,
                                "query_id": s.query_id,
                                "trial": s.trial,
                                "metric": s.metric,
                                "value": s.value,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
        written.append(scores_path)
    elif fmt == "table":
        path = out / "report.txt"
        path.write_text(format_table(report), encoding="utf-8")
        written.append(path)
    elif fmt == "plotdata":
        rows = []
        for name in sorted(report.strategies):
            strat = report.strategies[name]
            by_trial: dict[tuple[str, int], list[float]] = {}
            for s in strat.scores.per_instance:
                by_trial.setdefault((s.metric, s.trial), []).append(s.value)
            for (metric, trial), values in sorted(by_trial.items()):
                rows.append(
                    {
                        "strategy": name,
                        "metric": metric,
                        "trial": trial,
                        "mean": sum(values) / len(values),
                        "n": len(values),
                    }
                )
        path = out / "plotdata.json"
        path.write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        written.append(path)
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    return written


# ---------------------------------------------------------------------------
# Benchmark execution


def _scan_trace_lines(path: Path) -> list[dict[str, Any]]:
    """Read persisted trace records, tolerating a trailing partial line."""
    records: list[dict[str, Any]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError:
                continue
    return records


def _canonicalize_traces(path: Path) -> list[dict[str, Any]]:
    """Rewrite the trace file sorted by (strategy, query id, trial)."""
    records = _scan_trace_lines(path)
    records.sort(key=lambda r: (r["strategy"], r["query"]["id"], r["trial"]))
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
    tmp.replace(path)
    return records


def _run_one(agents: AgentConfig, strategy: StrategyConfig, instance: TaskInstance) -> RunTrace:
    return run_strategy(agents, strategy, to_query(instance))


def run_benchmark(config: RunConfig, agents: AgentConfig | None = None) -> BenchmarkReport:
    """Execute every (instance, trial) pair exactly once and emit reports.

    Per-run failures are recorded, scored as incorrect, and never abort the
    suite; process-level interrupts leave a resumable trace file behind.
    """
    instances = load_dataset(config.dataset_path, config.task_kind)
    if not instances:
        raise ConfigError(f"dataset {config.dataset_path} is empty")
    if instance_kind(instances[0]) is not config.task_kind:
        raise KindMismatch("dataset kind does not match config.task_kind")
    if agents is None:
        agents = build_agents(config.agents)
    strategy_name = config.strategy.kind.value
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    traces_path = out / "traces.jsonl"

    done: set[tuple[str, int]] = set()
    if traces_path.exists():
        existing = {
            (r["query"]["id"], r["trial"])
            for r in _scan_trace_lines(traces_path)
            if r["strategy"] == strategy_name
        }
        if existing and not config.resume:
            raise ConfigError(
                f"{traces_path} already holds {strategy_name} runs; pass resume or use a fresh output_dir"
            )
        done = existing

    pending = [
        (instance, trial)
        for trial in range(config.trials)
        for instance in instances
        if (instance.id, trial) not in done
    ]
    failures: Counter[str] = Counter()
    failed_keys: list[tuple[str, int]] = []
    wall_times: dict[str, int] = {}

    with open(traces_path, "a", encoding="utf-8") as sink:
        pool = ThreadPoolExecutor(max_workers=config.concurrency)
        try:
            futures = {
                pool.submit(_run_one, agents, config.strategy, instance): (instance, trial)
                for instance, trial in pending
            }
            for future in as_completed(futures):
                instance, trial = futures[future]
                try:
                    trace = future.result()
                except RunError as exc:
                    failures[type(exc.cause).__name__] += 1
                    failed_keys.append((instance.id, trial))
                    continue
                record = trace_to_dict(dataclasses.replace(trace, wall_time_ms=0))
                record["trial"] = trial
                sink.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
                sink.flush()
                wall_times[f"{instance.id}#{trial}"] = trace.wall_time_ms
        except BaseException:
            pool.shutdown(wait=True, cancel_futures=True)
            raise
        pool.shutdown(wait=True)

    records = _canonicalize_traces(traces_path)
    by_id = {instance.id: instance for instance in instances}
    strategy_records = [r for r in records if r["strategy"] == strategy_name]
    traces = [trace_from_dict({k: v for k, v in r.items() if k != "trial"}) for r in strategy_records]

    scores: list[InstanceScore] = []
    usage = UsageStats()
    for record, trace in zip(strategy_records, traces):
        instance = by_id.get(trace.query.id)
        if instance is None:
            raise ConfigError(f"trace for unknown instance {trace.query.id!r} in {traces_path}")
        for metric, value in sorted(score_answer(instance, trace.final_answer).items()):
            scores.append(
                InstanceScore(query_id=trace.query.id, trial=record["trial"], metric=metric, value=value)
            )
        for rec in trace.iterations:
            usage = usage + rec.backend_usage
    # Failed runs score as incorrect and are counted separately.
    for query_id, trial in sorted(failed_keys):
        for metric in metric_names(config.task_kind):
            scores.append(InstanceScore(query_id=query_id, trial=trial, metric=metric, value=0.0))
    scores.sort(key=lambda s: (s.query_id, s.trial, s.metric))

    strategy_report = StrategyReport(
        expected=len(instances) * config.trials,
        completed=len(traces),
        failed=len(failed_keys),
        failures=dict(failures),
        iteration_histogram=iteration_histogram(traces),
        usage_totals=usage,
        scores=ScoreReport.build(scores, seed=config.seed),
    )

    report_path = out / "report.json"
    if report_path.exists():
        report = report_from_dict(json.loads(report_path.read_text(encoding="utf-8")))
        if report.task_kind is not config.task_kind:
            raise ConfigError(
                f"output_dir already holds a {report.task_kind.value} report; use a fresh directory"
            )
        strategies = dict(report.strategies)
    else:
        strategies = {}
    strategies[strategy_name] = strategy_report
    report = BenchmarkReport(task_kind=config.task_kind, seed=config.seed, strategies=strategies)

    emit_report(report, "machine", out)
    emit_report(report, "table", out)
    _update_meta(out, strategy_name, wall_times)
    return report


def _update_meta(out: Path, strategy_name: str, wall_times: dict[str, int]) -> None:
    meta_path = out / "meta.json"
    meta: dict[str, Any] = {}
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            meta = {}
    meta.setdefault("wall_times_ms", {}).setdefault(strategy_name, {}).update(wall_times)
    meta["updated_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", encoding="utf-8")
