"""Application context for dependency injection.

CLI commands receive their collaborators through :class:`AppContext`, so
tests can swap the runner or reporter for doubles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from orthounlearn.console import Reporter
from orthounlearn.runner import ExperimentRunner
from orthounlearn.store import ResultStore


@dataclass
class AppContext:
    """Container for the services a CLI command uses."""

    runner: ExperimentRunner
    reporter: Reporter = field(default_factory=Reporter)


def create_context(output_dir: Path, reporter: Reporter | None = None) -> AppContext:
    """Factory for application dependencies.

    Use this in production code. For tests, construct AppContext directly
    with test doubles.

    Args:
        output_dir: Run directory results are written to.
        reporter: Optional reporter override.

    Returns:
        Configured AppContext.
    """
    return AppContext(
        runner=ExperimentRunner.create(ResultStore.create(output_dir)),
        reporter=reporter or Reporter(),
    )
