"""Rich console output and log handler setup for the CLI."""

from __future__ import annotations

import logging
import os

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.panel import Panel
from rich.syntax import Syntax
from rich.table import Table

from orthounlearn.metrics import RunSummary, StageMetrics

LOG_LEVEL_ENV = "ORTHOUNLEARN_LOG_LEVEL"
DEFAULT_LOG_LEVEL = logging.WARNING
_LEVELS = {
    "DEBUG": logging.DEBUG,
    "INFO": logging.INFO,
    "WARNING": logging.WARNING,
    "ERROR": logging.ERROR,
}


def resolve_log_level(value: str | None) -> int:
    """Map a level name to a logging level; unknown names give WARNING."""
    if not value:
        return DEFAULT_LOG_LEVEL
    return _LEVELS.get(value.strip().upper(), DEFAULT_LOG_LEVEL)


def configure_logging(level: str | None = None) -> logging.Logger:
    """Attach a single RichHandler to the package logger.

    Args:
        level: Level name; read from ``ORTHOUNLEARN_LOG_LEVEL`` when omitted.

    Returns:
        The configured package logger.
    """
    package_logger = logging.getLogger("orthounlearn")
    package_logger.setLevel(resolve_log_level(level or os.environ.get(LOG_LEVEL_ENV)))
    if not any(isinstance(h, RichHandler) for h in package_logger.handlers):
        handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        package_logger.addHandler(handler)
        package_logger.propagate = False
    return package_logger


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.3f}"


def _stage_cells(metrics: StageMetrics | None) -> list[str]:
    if metrics is None:
        return ["-", "-", "-"]
    return [_fmt(metrics.asr), _fmt(metrics.r_acc_mean), _fmt(metrics.dist_origin)]


class Reporter:
    """User-facing status output (non-interactive)."""

    def __init__(self, console: Console | None = None) -> None:
        """Initialize the reporter.

        Args:
            console: Console to print to; a new stdout console by default.
        """
        self.console = console or Console()

    def show_success(self, message: str) -> None:
        """Display success message.

        Args:
            message: Success message.
        """
        self.console.print(f"[green]✓[/green] {escape(message)}")

    def show_error(self, message: str) -> None:
        """Display error message.

        Args:
            message: Error message.
        """
        self.console.print(f"[red]✗[/red] {escape(message)}")

    def show_warning(self, message: str) -> None:
        """Display warning message."""
        self.console.print(f"[yellow]![/yellow] {escape(message)}")

    def show_config(self, document: str, title: str = "Resolved configuration") -> None:
        """Display a YAML document in a panel."""
        self.console.print(Panel(Syntax(document, "yaml"), title=title, border_style="blue"))

    def show_summary(self, summary: RunSummary) -> None:
        """Display one row per job with boundary metrics."""
        if not summary.jobs:
            self.console.print("[yellow]No jobs were run[/yellow]")
            return

        table = Table(title="Run summary")
        table.add_column("Algorithm", style="cyan")
        table.add_column("Seed", justify="right")
        table.add_column("Status")
        table.add_column("Unlearn rounds", justify="right")
        for label in ("unlearned", "final"):
            table.add_column(f"ASR ({label})", justify="right")
            table.add_column(f"R-Acc ({label})", justify="right")
            table.add_column(f"Dist ({label})", justify="right")
        table.add_column("Reverting", justify="right")

        for job in summary.jobs:
            table.add_row(
                job.algorithm,
                str(job.seed),
                job.status,
                str(job.unlearn_rounds),
                *_stage_cells(job.unlearned),
                *_stage_cells(job.final),
                _fmt(job.reverting_ratio),
            )
        self.console.print(table)
