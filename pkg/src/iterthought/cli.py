"""Command-line entry points: run benchmarks, re-emit reports, replay
cassettes, and verify 24-puzzle expressions."""
from __future__ import annotations

import dataclasses
import sys

import click

from .backends import BackendKind
from .core import StrategyKind
from .harness import (
    ConfigError,
    emit_report,
    format_table,
    load_report,
    load_run_config,
    run_benchmark,
)
from .loops import StrategyConfig
from .tasks import ExpressionError, parse_expression, verify_24


@click.group()
def main() -> None:
    """Iterative inner-dialogue prompting loops and their benchmark harness."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--strategy", type=click.Choice([k.value for k in StrategyKind]), default=None)
@click.option("--max-iterations", type=int, default=None)
@click.option("--concurrency", type=int, default=None)
@click.option("--resume", is_flag=True, default=False)
def run(config_path: str, strategy: str | None, max_iterations: int | None, concurrency: int | None, resume: bool) -> None:
    """Run a benchmark described by a YAML config file."""
    try:
        config = load_run_config(config_path)
        if strategy is not None or max_iterations is not None:
            kind = StrategyKind(strategy) if strategy is not None else config.strategy.kind
            bound = max_iterations if max_iterations is not None else config.strategy.max_iterations
            config = dataclasses.replace(config, strategy=StrategyConfig(kind=kind, max_iterations=bound))
        if concurrency is not None:
            config = dataclasses.replace(config, concurrency=concurrency)
        if resume:
            config = dataclasses.replace(config, resume=True)
        report = run_benchmark(config)
    except (ConfigError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(format_table(report))
    click.echo(f"artifacts written under {config.output_dir}")


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--format", "fmt", required=True, type=click.Choice(["table", "machine", "plotdata"]))
def report(input_dir: str, fmt: str) -> None:
    """Re-emit report artifacts from a completed run directory."""
    try:
        loaded = load_report(input_dir)
        paths = emit_report(loaded, fmt, input_dir)
    except (ConfigError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    if fmt == "table":
        click.echo(format_table(loaded))
    for path in paths:
        click.echo(f"wrote {path}")


@main.command()
@click.option("--cassette", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
def replay(cassette: str, config_path: str) -> None:
    """Run a benchmark entirely from a recorded cassette."""
    try:
        config = load_run_config(config_path)
        agents = config.agents
        agents = dataclasses.replace(
            agents,
            ida_backend=dataclasses.replace(
                agents.ida_backend, kind=BackendKind.REPLAY, cassette_path=cassette
            ),
            llma_backend=dataclasses.replace(
                agents.llma_backend, kind=BackendKind.REPLAY, cassette_path=cassette
            ),
        )
        config = dataclasses.replace(config, agents=agents)
        result = run_benchmark(config)
    except (ConfigError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(format_table(result))


@main.command()
@click.argument("numbers")
@click.argument("expression")
def verify24(numbers: str, expression: str) -> None:
    """Check that EXPRESSION uses NUMBERS exactly once each and equals 24."""
    try:
        values = [int(tok) for tok in numbers.replace(",", " ").split()]
    except ValueError as exc:
        raise click.ClickException(f"could not parse numbers from {numbers!r}") from exc
    if len(values) != 4:
        raise click.ClickException("exactly four numbers are required")
    try:
        expr = parse_expression(expression)
    except ExpressionError as exc:
        raise click.ClickException(str(exc)) from exc
    result = verify_24(expr, values)
    if result.valid:
        click.echo("valid")
    else:
        click.echo(f"invalid: {result.reason.value}")
        sys.exit(1)


if __name__ == "__main__":
    main()
