"""Exception hierarchy shared by the simulator.

Every error carries the process exit code the CLI maps it to, so command
handlers can translate failures without inspecting message text.
"""

from __future__ import annotations

__all__ = [
    "IO_EXIT_CODE",
    "ConfigurationError",
    "ExperimentAborted",
    "IngestionError",
    "NumericalError",
    "PreconditionError",
    "SimulationError",
]


IO_EXIT_CODE = 4


class SimulationError(Exception):
    """Base class for simulator errors."""

    exit_code: int = 1


class ConfigurationError(SimulationError):
    """Invalid configuration, shapes, or infeasible experiment settings."""

    exit_code = 2

    def __init__(self, message: str, key_path: str | None = None) -> None:
        """Initialize the error.

        Args:
            message: Human-readable description.
            key_path: Dotted configuration key the error refers to, if any.
        """
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class NumericalError(SimulationError):
    """Non-finite values or a numerical routine that failed to converge."""

    exit_code = 3


class PreconditionError(SimulationError, ValueError):
    """An operation was called with inputs outside its domain."""

    exit_code = 3


class IngestionError(SimulationError):
    """A dataset file could not be parsed."""

    exit_code = 4

    def __init__(self, message: str, field: str) -> None:
        """Initialize the error.

        Args:
            message: Human-readable description.
            field: Name of the offending header field or section.
        """
        self.field = field
        super().__init__(f"{field}: {message}")


class ExperimentAborted(SimulationError):
    """A stage failed; wraps the cause with where it happened."""

    def __init__(
        self,
        cause: Exception,
        *,
        algorithm: str,
        seed: int,
        stage: str,
        round_index: int,
    ) -> None:
        """Initialize the error.

        Args:
            cause: The underlying exception.
            algorithm: Algorithm name of the aborted job.
            seed: Seed of the aborted job.
            stage: Stage that was running.
            round_index: Global round index at the failure.
        """
        self.cause = cause
        self.algorithm = algorithm
        self.seed = seed
        self.stage = stage
        self.round_index = round_index
        self.exit_code = getattr(cause, "exit_code", SimulationError.exit_code)
        super().__init__(
            f"{algorithm} (seed {seed}) aborted in {stage} round {round_index}: {cause}"
        )
