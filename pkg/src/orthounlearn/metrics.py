"""Evaluation metrics and round-record persistence."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from orthounlearn.data import ClientDataset
from orthounlearn.errors import IngestionError, PreconditionError
from orthounlearn.nn_core import Batch, LossKind, ModelParams, forward, loss_value, predict

logger = logging.getLogger(__name__)

RECORD_COLUMNS = (
    "round",
    "stage",
    "asr",
    "r_acc_mean",
    "r_acc_std",
    "r_acc_worst",
    "r_acc_best",
    "dist_origin",
    "nc",
    "target_uce_loss",
    "mean_remaining_ce_loss",
    "lr",
    "flags",
)
FLAG_SEPARATOR = ";"
# Slack for the worst <= mean <= best ordering under float summation
ORDER_SLACK = 1e-12


class RoundRecord(BaseModel):
    """Metrics captured after one communication round."""

    model_config = ConfigDict(frozen=True, extra="forbid", allow_inf_nan=False)

    round: int = Field(ge=0)
    stage: str
    asr: float = Field(ge=0.0, le=1.0)
    r_acc_mean: float = Field(ge=0.0, le=1.0)
    r_acc_std: float = Field(ge=0.0)
    r_acc_worst: float = Field(ge=0.0, le=1.0)
    r_acc_best: float = Field(ge=0.0, le=1.0)
    dist_origin: float = Field(ge=0.0)
    nc: int = Field(default=0, ge=0)
    target_uce_loss: float
    mean_remaining_ce_loss: float
    lr: float = Field(gt=0.0)
    flags: tuple[str, ...] = ()

    @model_validator(mode="after")
    def _check_accuracy_order(self) -> RoundRecord:
        if not (
            self.r_acc_worst - ORDER_SLACK <= self.r_acc_mean <= self.r_acc_best + ORDER_SLACK
        ):
            raise ValueError(
                f"expected worst <= mean <= best, got {self.r_acc_worst}, "
                f"{self.r_acc_mean}, {self.r_acc_best}"
            )
        return self

    def has_flag(self, prefix: str) -> bool:
        """True if any flag starts with ``prefix``."""
        return any(flag.startswith(prefix) for flag in self.flags)


class StageMetrics(BaseModel):
    """ASR and retained accuracy at a stage boundary."""

    round: int
    asr: float
    r_acc_mean: float
    r_acc_std: float
    r_acc_worst: float
    r_acc_best: float
    dist_origin: float

    @classmethod
    def from_record(cls, record: RoundRecord) -> StageMetrics:
        """Copy the boundary metrics out of a round record."""
        return cls.model_validate(record.model_dump(include=set(cls.model_fields)))


class JobSummary(BaseModel):
    """Outcome of one (algorithm, seed) job."""

    algorithm: str
    seed: int
    status: str
    unlearn_rounds: int
    origin: StageMetrics | None = None
    unlearned: StageMetrics | None = None
    final: StageMetrics | None = None
    reverting_ratio: float | None = Field(
        default=None,
        description="Minimum post-training distance to the origin over the distance at the "
        "end of unlearning; below 1 means the model moved back towards the origin.",
    )


class RunSummary(BaseModel):
    """All jobs of one run."""

    jobs: list[JobSummary] = Field(default_factory=list)


class RAccStats(NamedTuple):
    """Retained-client accuracy statistics."""

    mean: float
    std: float
    worst: float
    best: float


def accuracy(model: ModelParams, batch: Batch) -> float:
    """Fraction of rows whose arg-max prediction equals the label."""
    if len(batch) == 0:
        raise PreconditionError("accuracy of an empty batch is undefined")
    return float(np.mean(predict(model, batch.features) == batch.labels))


def asr(model: ModelParams, trigger_set: Batch) -> float:
    """Attack success rate: share of triggered rows predicted as the flipped label.

    Raises:
        PreconditionError: If the trigger set is empty.
    """
    if len(trigger_set) == 0:
        raise PreconditionError("trigger set is empty")
    return accuracy(model, trigger_set)


def r_acc(model: ModelParams, testsets: Sequence[Batch]) -> RAccStats:
    """Per-client test accuracy aggregated uniformly across clients."""
    if not testsets:
        raise PreconditionError("no remaining-client test sets")
    scores = np.array([accuracy(model, batch) for batch in testsets])
    return RAccStats(
        mean=float(scores.mean()),
        std=float(scores.std()),
        worst=float(scores.min()),
        best=float(scores.max()),
    )


def dist_origin(model: ModelParams, origin: ModelParams) -> float:
    """Euclidean distance ``||w - w0||``."""
    if model.shapes != origin.shapes:
        raise PreconditionError(f"model shapes {model.shapes} differ from origin {origin.shapes}")
    return float(np.linalg.norm(model.flat - origin.flat))


@dataclass(frozen=True, eq=False)
class EvaluationSets:
    """Fixed batches every round is evaluated on."""

    trigger: Batch
    target_train: Batch
    remaining_tests: tuple[Batch, ...]
    remaining_trains: tuple[Batch, ...]

    @classmethod
    def from_clients(
        cls, clients: Sequence[ClientDataset], target_id: int, trigger: Batch
    ) -> EvaluationSets:
        """Split clients into the target and the remaining ones."""
        remaining = [c for c in clients if c.client_id != target_id]
        target = next(c for c in clients if c.client_id == target_id)
        return cls(
            trigger=trigger,
            target_train=target.train,
            remaining_tests=tuple(c.test for c in remaining),
            remaining_trains=tuple(c.train for c in remaining),
        )


def snapshot(
    model: ModelParams,
    origin: ModelParams,
    sets: EvaluationSets,
    *,
    round_index: int,
    stage: str,
    lr: float,
    nc: int = 0,
    flags: Iterable[str] = (),
) -> RoundRecord:
    """Evaluate ``model`` and package the result as a RoundRecord."""
    stats = r_acc(model, sets.remaining_tests)
    target_probs = forward(model, sets.target_train)
    remaining_ce = [
        loss_value(forward(model, batch), batch.labels, LossKind.CE)
        for batch in sets.remaining_trains
    ]
    return RoundRecord(
        round=round_index,
        stage=stage,
        asr=asr(model, sets.trigger),
        r_acc_mean=stats.mean,
        r_acc_std=stats.std,
        r_acc_worst=stats.worst,
        r_acc_best=stats.best,
        dist_origin=dist_origin(model, origin),
        nc=nc,
        target_uce_loss=loss_value(target_probs, sets.target_train.labels, LossKind.UCE),
        mean_remaining_ce_loss=float(np.mean(remaining_ce)),
        lr=lr,
        flags=tuple(flags),
    )


def _format(value: object) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    if isinstance(value, tuple):
        return FLAG_SEPARATOR.join(value)
    return str(value)


def write_records(records: Sequence[RoundRecord], path: Path) -> Path:
    """Write records as CSV, overwriting any previous file.

    Floats use 17 significant digits so the file parses back losslessly.

    Args:
        records: Records in round order.
        path: Destination file.

    Returns:
        The written path.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for record in records:
            row = record.model_dump()
            writer.writerow([_format(row[column]) for column in RECORD_COLUMNS])
    logger.debug("wrote %d records to %s", len(records), path)
    return path


def read_records(path: Path) -> list[RoundRecord]:
    """Parse a records CSV written by :func:`write_records`.

    Raises:
        IngestionError: If the header or a row does not match the schema.
    """
    try:
        handle = path.open(encoding="utf-8", newline="")
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}", "records") from e

    with handle:
        reader = csv.DictReader(handle)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise IngestionError(f"unexpected columns {reader.fieldnames}", "records.header")
        records = []
        for line, row in enumerate(reader, start=2):
            flags = row["flags"]
            row["flags"] = tuple(flags.split(FLAG_SEPARATOR)) if flags else ()
            try:
                records.append(RoundRecord.model_validate(row))
            except ValueError as e:
                raise IngestionError(f"line {line}: {e}", "records.row") from e
    return records


def write_summary(summary: RunSummary, path: Path) -> Path:
    """Write the run summary as indented JSON."""
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path
