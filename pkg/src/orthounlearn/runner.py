"""Experiment orchestration: builds each seed's clients and runs every algorithm."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from orthounlearn.config import BlobsSource, ExperimentConfig, resolved_config
from orthounlearn.data import ClientDataset, FullDataset, generate_blobs, load_idx_dataset, partition, poison
from orthounlearn.engine import AlgorithmSpec, ExperimentResult, FederatedEngine
from orthounlearn.errors import IO_EXIT_CODE, ExperimentAborted, SimulationError
from orthounlearn.metrics import EvaluationSets, JobSummary, RoundRecord, RunSummary, StageMetrics
from orthounlearn.nn_core import Batch
from orthounlearn.protocols import ResultSink
from orthounlearn.strategies import get_algorithm

logger = logging.getLogger(__name__)

DATA_STREAM = 3
PARTITION_STREAM = 4
POISON_STREAM = 5


@dataclass(frozen=True, eq=False)
class FederatedWorld:
    """Clients, target and evaluation batches shared by every algorithm of one seed."""

    clients: tuple[ClientDataset, ...]
    target_id: int
    trigger: Batch
    n_classes: int
    evaluation: EvaluationSets


def load_dataset(config: ExperimentConfig, seed: int) -> FullDataset:
    """Generate or read the configured dataset."""
    source = config.dataset
    rng = np.random.default_rng([seed, DATA_STREAM])
    if isinstance(source, BlobsSource):
        return generate_blobs(
            source.n_classes,
            source.per_class,
            source.dim,
            source.spread,
            rng,
            center_scale=source.center_scale,
        )
    return load_idx_dataset(
        source.train_images,
        source.train_labels,
        source.n_classes,
        rng,
        test_images=source.test_images,
        test_labels=source.test_labels,
    )


def build_world(config: ExperimentConfig, seed: int) -> FederatedWorld:
    """Partition the dataset and poison the target client for one seed."""
    dataset = load_dataset(config, seed)
    clients = partition(
        dataset, config.partition_spec(), np.random.default_rng([seed, PARTITION_STREAM])
    )
    target_id = config.partition.target
    poisoned, trigger = poison(
        clients[target_id],
        config.trigger_spec(),
        config.trigger.fraction,
        np.random.default_rng([seed, POISON_STREAM]),
        n_classes=dataset.n_classes,
        image_shape=dataset.image_shape,
    )
    clients[target_id] = poisoned
    return FederatedWorld(
        clients=tuple(clients),
        target_id=target_id,
        trigger=trigger,
        n_classes=dataset.n_classes,
        evaluation=EvaluationSets.from_clients(clients, target_id, trigger),
    )


def summarize_job(
    algorithm: AlgorithmSpec, seed: int, result: ExperimentResult
) -> JobSummary:
    """Boundary metrics and the reverting ratio of one finished job."""
    records = result.records
    pre = result.pretrain_rounds
    origin = records[pre - 1] if pre > 0 else None
    final = records[-1] if records else None

    unlearned: RoundRecord | None
    post: list[RoundRecord]
    if algorithm.rebuild is not None:
        unlearned, post = final, []
    else:
        boundary = pre + result.unlearn_rounds
        unlearned = records[boundary - 1] if boundary > 0 else None
        post = records[boundary:]

    ratio = None
    if post and unlearned is not None and unlearned.dist_origin > 0:
        ratio = min(r.dist_origin for r in post) / unlearned.dist_origin

    def metrics(record: RoundRecord | None) -> StageMetrics | None:
        return StageMetrics.from_record(record) if record is not None else None

    return JobSummary(
        algorithm=algorithm.name,
        seed=seed,
        status=result.status.value,
        unlearn_rounds=result.unlearn_rounds,
        origin=metrics(origin),
        unlearned=metrics(unlearned),
        final=metrics(final),
        reverting_ratio=ratio,
    )


def error_payload(error: Exception) -> dict[str, object]:
    """Machine-readable description of a failure.

    Errors outside the simulator hierarchy, such as a full disk, map to
    the I/O exit code.
    """
    cause = error.cause if isinstance(error, ExperimentAborted) else error
    return {
        "error": type(cause).__name__,
        "message": str(error),
        "exit_code": getattr(error, "exit_code", IO_EXIT_CODE),
        "algorithm": getattr(error, "algorithm", None),
        "seed": getattr(error, "seed", None),
        "stage": getattr(error, "stage", None),
        "round": getattr(error, "round_index", None),
    }


class ExperimentRunner:
    """Runs every (algorithm, seed) job of a configuration.

    Follows Separate Use from Creation: the constructor takes the result sink.
    Use factory method `create()` for production instantiation.
    """

    def __init__(self, store: ResultSink) -> None:
        """Initialize the runner.

        Args:
            store: Destination for configuration echo, records and summaries.
        """
        self.store = store

    @classmethod
    def create(cls, store: ResultSink) -> ExperimentRunner:
        """Factory method for production instantiation."""
        return cls(store=store)

    def run_job(
        self, config: ExperimentConfig, world: FederatedWorld, name: str, seed: int
    ) -> tuple[JobSummary, ExperimentResult]:
        """Run one algorithm on one seed's world."""
        algorithm = get_algorithm(name, config.geometry_settings())
        engine = FederatedEngine.create(
            world.evaluation,
            seed=seed,
            schedule=config.schedule_settings(),
            training=config.training_settings(),
            geometry=config.geometry_settings(),
        )
        state = engine.initial_state(world.clients, world.target_id, world.n_classes)
        result = engine.run_experiment(state, algorithm)
        return summarize_job(algorithm, seed, result), result

    def run(self, config: ExperimentConfig, force: bool = False) -> RunSummary:
        """Run all jobs and persist their outputs.

        Args:
            config: Validated configuration.
            force: Overwrite results of a previous run.

        Returns:
            Summary over all jobs.

        Raises:
            SimulationError: On the first failing job, after writing the error report.
            OSError: When results cannot be written, after attempting the error report.
        """
        self.store.prepare(force=force)
        self.store.write_config(resolved_config(config))
        summary = RunSummary()
        try:
            for seed in config.seeds:
                world = build_world(config, seed)
                for name in config.algorithms:
                    logger.info("running %s with seed %d", name, seed)
                    job, result = self.run_job(config, world, name, seed)
                    self.store.write_job(job, result.records, result.checkpoints)
                    summary.jobs.append(job)
        except (SimulationError, OSError) as e:
            self._report(e)
            raise
        self.store.write_summary(summary)
        return summary

    def _report(self, error: Exception) -> None:
        try:
            self.store.write_error(error_payload(error))
        except OSError as e:
            logger.error("could not write error report: %s", e)
