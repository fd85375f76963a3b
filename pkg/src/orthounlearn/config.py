"""Experiment configuration: YAML documents validated by pydantic models."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Annotated, Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from orthounlearn.data import Corner, PartitionScheme, PartitionSpec, TriggerSpec
from orthounlearn.engine import GeometrySettings, StageSchedule, TrainingSettings
from orthounlearn.errors import ConfigurationError
from orthounlearn.strategies import ALGORITHMS

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BlobsSource(_Section):
    """Synthetic Gaussian-blob dataset."""

    kind: Literal["blobs"] = "blobs"
    n_classes: int = Field(default=4, ge=2)
    per_class: int = Field(default=100, ge=2)
    dim: int = Field(default=64, ge=1)
    spread: float = Field(default=0.1, ge=0.0)
    center_scale: float = Field(default=0.5, gt=0.0)


class IdxSource(_Section):
    """IDX image files; without a test pair the train files are split 80/20."""

    kind: Literal["idx"]
    train_images: Path
    train_labels: Path
    test_images: Path | None = None
    test_labels: Path | None = None
    n_classes: int = Field(default=10, ge=2)

    @model_validator(mode="after")
    def _check_test_pair(self) -> IdxSource:
        if (self.test_images is None) != (self.test_labels is None):
            raise ConfigurationError(
                "test_images and test_labels must be given together", "dataset.test_images"
            )
        return self


DatasetSource = Annotated[BlobsSource | IdxSource, Field(discriminator="kind")]


class PartitionConfig(_Section):
    """Client partition."""

    scheme: PartitionScheme = PartitionScheme.PAT
    percent: int | None = 50
    clients: int = Field(default=4, ge=2)
    target: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_percent(self) -> PartitionConfig:
        if self.scheme is PartitionScheme.PAT and self.percent not in (10, 20, 50):
            raise ConfigurationError(
                f"must be 10, 20 or 50 for the pat scheme, got {self.percent}", "partition.percent"
            )
        if self.target >= self.clients:
            raise ConfigurationError(
                f"{self.target} must be below clients {self.clients}", "partition.target"
            )
        return self


class TriggerConfig(_Section):
    """Backdoor trigger on the target client."""

    patch_size: int = Field(default=3, ge=1)
    patch_value: float = 1.0
    corner: Corner = Corner.BOTTOM_RIGHT
    label_shift: int = Field(default=5, ge=1)
    fraction: float = Field(default=0.5, gt=0.0, le=1.0)


class ScheduleConfig(_Section):
    """Round counts and learning rates."""

    pretrain_rounds: int = Field(default=300, ge=0)
    unlearn_rounds: int = Field(default=100, ge=0)
    total_rounds: int = Field(default=200, ge=0)
    lr0: float = Field(default=0.5, gt=0.0)
    lr_decay: float = Field(default=0.999, gt=0.0, le=1.0)
    early_stop: bool = True
    small_lr: float | None = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _check_rounds(self) -> ScheduleConfig:
        if self.total_rounds < self.unlearn_rounds:
            raise ConfigurationError(
                f"{self.total_rounds} must be >= unlearn_rounds {self.unlearn_rounds}",
                "schedule.total_rounds",
            )
        return self


class TrainingConfig(_Section):
    """Client-side training."""

    hidden: list[Annotated[int, Field(ge=1)]] = Field(default_factory=lambda: [32])
    local_epochs: int = Field(default=1, ge=1)
    batch_size: int | None = Field(default=None, ge=1)
    workers: int = Field(default=1, ge=1)


class GeometryConfig(_Section):
    """Kernel tolerances."""

    tol_rank: float = Field(default=1e-10, gt=0.0)
    tol_null: float = Field(default=1e-9, gt=0.0)
    conflict_tol: float = Field(default=1e-8, ge=0.0)
    ga_clip_factor: float = Field(default=1000.0, gt=0.0)


class ExperimentConfig(_Section):
    """A full experiment: dataset, clients, schedule and algorithms to compare."""

    dataset: DatasetSource
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    trigger: TriggerConfig = Field(default_factory=TriggerConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    geometry: GeometryConfig = Field(default_factory=GeometryConfig)
    algorithms: list[str] = Field(min_length=1)
    seeds: list[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: Path = Path("runs/default")

    @model_validator(mode="before")
    @classmethod
    def _default_dataset_kind(cls, data: Any) -> Any:
        if isinstance(data, dict) and isinstance(data.get("dataset"), dict):
            data = {**data, "dataset": {"kind": "blobs", **data["dataset"]}}
        return data

    @model_validator(mode="after")
    def _check_cross_fields(self) -> ExperimentConfig:
        unknown = [name for name in self.algorithms if name not in ALGORITHMS]
        if unknown:
            raise ConfigurationError(
                f"unknown algorithm(s) {', '.join(unknown)}. Supported: {', '.join(ALGORITHMS)}",
                "algorithms",
            )
        if len(set(self.algorithms)) != len(self.algorithms):
            raise ConfigurationError("must not repeat", "algorithms")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("must not repeat", "seeds")
        if self.trigger.label_shift % self.dataset.n_classes == 0:
            raise ConfigurationError(
                f"{self.trigger.label_shift} is a multiple of {self.dataset.n_classes} classes",
                "trigger.label_shift",
            )
        return self

    def schedule_settings(self) -> StageSchedule:
        """Engine schedule."""
        s = self.schedule
        return StageSchedule(
            pretrain_rounds=s.pretrain_rounds,
            unlearn_rounds=s.unlearn_rounds,
            total_rounds=s.total_rounds,
            lr0=s.lr0,
            lr_decay=s.lr_decay,
            early_stop=s.early_stop,
            small_lr=s.small_lr,
        )

    def training_settings(self) -> TrainingSettings:
        """Engine client settings."""
        t = self.training
        return TrainingSettings(
            hidden=tuple(t.hidden),
            local_epochs=t.local_epochs,
            batch_size=t.batch_size,
            workers=t.workers,
        )

    def geometry_settings(self) -> GeometrySettings:
        """Engine kernel tolerances."""
        return GeometrySettings(**self.geometry.model_dump())

    def partition_spec(self) -> PartitionSpec:
        """Partition settings for :func:`~orthounlearn.data.partition`."""
        p = self.partition
        percent = p.percent if p.scheme is PartitionScheme.PAT else None
        return PartitionSpec(scheme=p.scheme, clients=p.clients, percent=percent)

    def trigger_spec(self) -> TriggerSpec:
        """Trigger geometry for :func:`~orthounlearn.data.poison`."""
        t = self.trigger
        return TriggerSpec(
            patch_size=t.patch_size,
            patch_value=t.patch_value,
            corner=t.corner,
            label_shift=t.label_shift,
        )


def _key_path(loc: tuple[int | str, ...]) -> str:
    return ".".join(str(part) for part in loc)


def config_from_mapping(data: Any) -> ExperimentConfig:
    """Validate an already-parsed document.

    Raises:
        ConfigurationError: On any schema violation, naming the key path.
    """
    if not isinstance(data, dict):
        raise ConfigurationError("configuration must be a mapping", "config")
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key_path = _key_path(first["loc"]) or "config"
        message = first["msg"]
        if e.error_count() > 1:
            message += f" (and {e.error_count() - 1} more)"
        raise ConfigurationError(message, key_path) from e

    if config.training.local_epochs > 1:
        logger.warning(
            "local_epochs=%d: uploaded displacements only approximate local gradients",
            config.training.local_epochs,
        )
    return config


def parse_config(path: Path) -> ExperimentConfig:
    """Read and validate a YAML configuration file.

    Args:
        path: Configuration file.

    Returns:
        Validated configuration with defaults applied.

    Raises:
        ConfigurationError: If the file is missing, malformed or invalid.
    """
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e}", "config") from e
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"invalid YAML: {e}", "config") from e
    logger.debug("parsed configuration from %s", path)
    return config_from_mapping(data)


def resolved_config(config: ExperimentConfig) -> dict[str, Any]:
    """Configuration with defaults applied, as plain data."""
    return config.model_dump(mode="json")


def dump_config(config: ExperimentConfig) -> str:
    """Resolved configuration as a YAML document."""
    return yaml.safe_dump(resolved_config(config), sort_keys=False)
