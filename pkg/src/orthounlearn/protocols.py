"""Protocol definitions for pluggable simulator components.

Unlearning strategies and result persistence are consumed through these
structural interfaces, so the round loop and CLI commands accept test doubles
without inheritance.
"""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol, runtime_checkable

import numpy as np

if TYPE_CHECKING:
    from orthounlearn.linalg import DirectionOutcome, GradientMatrix
    from orthounlearn.metrics import JobSummary, RoundRecord, RunSummary
    from orthounlearn.nn_core import GradVec, LossKind, ModelParams


@runtime_checkable
class DirectionStrategy(Protocol):
    """Protocol for the server-side unlearning direction.

    Implementations turn the target client's gradient and the stacked
    remaining-client gradients into the vector the server adds to the model.
    """

    name: str
    target_loss: LossKind

    def direction(
        self, matrix: GradientMatrix, g_u: GradVec, rng: np.random.Generator
    ) -> DirectionOutcome:
        """Compute this round's unlearning direction.

        Args:
            matrix: Remaining-client gradients, one row per client.
            g_u: Gradient uploaded by the target client.
            rng: Generator for randomized strategies.

        Returns:
            Direction to apply as ``w + lr * d``, or Degenerate to skip the round.
        """
        ...


@runtime_checkable
class ResultSink(Protocol):
    """Protocol for persisting experiment outputs.

    Implementations own the output directory layout.
    """

    def prepare(self, force: bool = False) -> None:
        """Create the output directory, refusing to reuse a populated one.

        Args:
            force: Overwrite previous results instead of refusing.
        """
        ...

    def write_config(self, resolved: dict[str, Any]) -> Path:
        """Echo the resolved configuration.

        Args:
            resolved: Configuration with all defaults applied.

        Returns:
            Path of the written file.
        """
        ...

    def write_job(
        self,
        job: JobSummary,
        records: list[RoundRecord],
        checkpoints: dict[str, ModelParams],
    ) -> Path:
        """Persist one (algorithm, seed) job.

        Args:
            job: Job outcome, naming algorithm and seed.
            records: Round records in order.
            checkpoints: Named model snapshots.

        Returns:
            The job directory.
        """
        ...

    def write_summary(self, summary: RunSummary) -> Path:
        """Write the run-level summary.

        Args:
            summary: Aggregated per-job results.

        Returns:
            Path of the written file.
        """
        ...

    def write_error(self, payload: dict[str, Any]) -> Path:
        """Write a machine-readable error report.

        Args:
            payload: Error description.

        Returns:
            Path of the written file.
        """
        ...
