"""CLI commands using Typer."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Annotated

if TYPE_CHECKING:
    from orthounlearn.config import ExperimentConfig
    from orthounlearn.context import AppContext

import typer

from orthounlearn import __version__
from orthounlearn.config import config_from_mapping, dump_config, parse_config, resolved_config
from orthounlearn.console import Reporter, configure_logging
from orthounlearn.context import create_context
from orthounlearn.errors import IO_EXIT_CODE, SimulationError
from orthounlearn.plots import emit_plots

app = typer.Typer(
    name="orthounlearn",
    help="Federated unlearning simulator",
    no_args_is_help=True,
)

reporter = Reporter()

ConfigOption = Annotated[
    Path,
    typer.Option("--config", "-c", help="Experiment configuration (YAML)"),
]
OutputOption = Annotated[
    Path | None,
    typer.Option("--output", "-o", help="Run directory (overrides output_dir)"),
]


def version_callback(value: bool) -> None:
    """Show version and exit."""
    if value:
        reporter.console.print(f"orthounlearn v{__version__}")
        raise typer.Exit()


@app.callback()
def main(
    version: Annotated[
        bool,
        typer.Option(
            "--version",
            "-v",
            callback=version_callback,
            is_eager=True,
            help="Show version and exit",
        ),
    ] = False,
) -> None:
    """Federated unlearning simulator."""
    configure_logging()


# ============================================================================
# Helpers
# ============================================================================


def _load_config(
    path: Path, output: Path | None = None, seeds: list[int] | None = None
) -> ExperimentConfig:
    """Parse a configuration and re-validate it with command-line overrides."""
    config = parse_config(path)
    if output is None and not seeds:
        return config
    data = resolved_config(config)
    if output is not None:
        data["output_dir"] = str(output)
    if seeds:
        data["seeds"] = list(seeds)
    return config_from_mapping(data)


def _fail(out: Reporter, error: Exception) -> typer.Exit:
    """Report an error and build the matching exit."""
    out.show_error(str(error))
    if isinstance(error, SimulationError):
        return typer.Exit(error.exit_code)
    return typer.Exit(IO_EXIT_CODE)


# ============================================================================
# Commands
# ============================================================================


@app.command()
def run(
    config_path: ConfigOption,
    output: OutputOption = None,
    force: Annotated[
        bool, typer.Option("--force", "-f", help="Overwrite results of a previous run")
    ] = False,
    seed_override: Annotated[
        list[int] | None,
        typer.Option("--seed-override", "-s", help="Seed to run instead of the configured ones"),
    ] = None,
    _context=None,
) -> None:
    """Run every configured algorithm for every seed."""
    out = _context.reporter if _context else reporter
    try:
        config = _load_config(config_path, output, seed_override)
        ctx: AppContext = _context or create_context(config.output_dir, out)
        summary = ctx.runner.run(config, force=force)
    except (SimulationError, OSError) as e:
        raise _fail(out, e) from e

    out.show_summary(summary)
    for job in summary.jobs:
        if job.status != "completed":
            out.show_warning(f"{job.algorithm} (seed {job.seed}) unlearning ended: {job.status}")
    out.show_success(f"Wrote {len(summary.jobs)} job(s) to {config.output_dir}")


@app.command()
def plot(
    config_path: Annotated[
        Path | None,
        typer.Option("--config", "-c", help="Configuration whose output_dir holds the run"),
    ] = None,
    output: OutputOption = None,
    _context=None,
) -> None:
    """Render asr.svg, racc.svg and dist.svg for a finished run."""
    out = _context.reporter if _context else reporter
    try:
        if output is not None:
            run_dir = output
        elif config_path is not None:
            run_dir = parse_config(config_path).output_dir
        else:
            out.show_error("Pass --output or --config to locate the run directory")
            raise typer.Exit(2)
        written = emit_plots(run_dir)
    except (SimulationError, OSError) as e:
        raise _fail(out, e) from e

    for path in written:
        out.show_success(f"Wrote {path}")


@app.command()
def validate(
    config_path: ConfigOption,
    output: OutputOption = None,
    seed_override: Annotated[
        list[int] | None,
        typer.Option("--seed-override", "-s", help="Seed to use instead of the configured ones"),
    ] = None,
    _context=None,
) -> None:
    """Check a configuration and print it with defaults applied."""
    out = _context.reporter if _context else reporter
    try:
        config = _load_config(config_path, output, seed_override)
    except SimulationError as e:
        raise _fail(out, e) from e

    out.show_config(dump_config(config))
    out.show_success(f"{config_path} is valid")
