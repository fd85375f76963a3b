"""Round-level federated training, unlearning and post-training.

A run moves through pretraining (FedAvg over every client), the unlearning
stage (the target client minimizes an unlearning loss while the server
steers the update away from the remaining clients' gradients) and
post-training (remaining clients only, with their gradients projected so
the model cannot drift back towards the pretrained origin).
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from orthounlearn.data import ClientDataset
from orthounlearn.errors import (
    ConfigurationError,
    ExperimentAborted,
    PreconditionError,
    SimulationError,
)
from orthounlearn.linalg import (
    DEFAULT_CONFLICT_TOL,
    DEFAULT_TOL_NULL,
    DEFAULT_TOL_RANK,
    Degenerate,
    DirectionOutcome,
    GradientMatrix,
    conflict_count,
    project_normal_plane,
)
from orthounlearn.metrics import EvaluationSets, RoundRecord, snapshot
from orthounlearn.nn_core import GradVec, LossKind, ModelParams, init_model, local_train
from orthounlearn.protocols import DirectionStrategy

logger = logging.getLogger(__name__)

# Tags mixed into generator seeds so every random stream is independent
INIT_STREAM = 1
RETRAIN_INIT_STREAM = 2
DIRECTION_STREAM = 20


class Stage(str, Enum):
    """Stage of a federated run."""

    PRETRAIN = "pretrain"
    UNLEARN = "unlearn"
    POSTTRAIN = "posttrain"
    RETRAIN = "retrain"
    DONE = "done"


_LOCAL_STREAMS = {
    Stage.PRETRAIN: 10,
    Stage.UNLEARN: 11,
    Stage.POSTTRAIN: 12,
    Stage.RETRAIN: 13,
}


class UnlearnStatus(str, Enum):
    """How the unlearning stage ended."""

    COMPLETED = "completed"
    EARLY_STOP = "early_stop"
    DEGENERATE_STOP = "degenerate_stop"


@dataclass(frozen=True)
class StageSchedule:
    """Round counts and learning-rate schedule.

    Attributes:
        pretrain_rounds: FedAvg rounds producing the origin model.
        unlearn_rounds: Maximum unlearning rounds T_u.
        total_rounds: Unlearning plus post-training rounds T.
        lr0: Initial learning rate.
        lr_decay: Multiplicative decay applied after every round.
        early_stop: End unlearning once the trigger ASR stays low.
        small_lr: Optional fixed step for unlearning rounds.
        early_stop_asr: ASR at or below which a round counts towards early stop.
        early_stop_patience: Consecutive low-ASR rounds that end unlearning.
        max_degenerate_skips: Consecutive skipped rounds that end unlearning.
    """

    pretrain_rounds: int = 300
    unlearn_rounds: int = 100
    total_rounds: int = 200
    lr0: float = 0.5
    lr_decay: float = 0.999
    early_stop: bool = True
    small_lr: float | None = None
    early_stop_asr: float = 0.01
    early_stop_patience: int = 3
    max_degenerate_skips: int = 5

    def __post_init__(self) -> None:
        """Validate round counts and rates."""
        if min(self.pretrain_rounds, self.unlearn_rounds, self.total_rounds) < 0:
            raise ConfigurationError("round counts must be non-negative", "schedule")
        if self.total_rounds < self.unlearn_rounds:
            raise ConfigurationError(
                f"total_rounds {self.total_rounds} < unlearn_rounds {self.unlearn_rounds}",
                "schedule.total_rounds",
            )
        if self.lr0 <= 0:
            raise ConfigurationError(f"must be positive, got {self.lr0}", "schedule.lr0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigurationError(f"must be in (0, 1], got {self.lr_decay}", "schedule.lr_decay")
        if self.small_lr is not None and self.small_lr <= 0:
            raise ConfigurationError(f"must be positive, got {self.small_lr}", "schedule.small_lr")


@dataclass(frozen=True)
class TrainingSettings:
    """Client-side training settings."""

    hidden: tuple[int, ...] = (32,)
    local_epochs: int = 1
    batch_size: int | None = None
    workers: int = 1


@dataclass(frozen=True)
class GeometrySettings:
    """Tolerances of the direction and conflict kernels."""

    tol_rank: float = DEFAULT_TOL_RANK
    tol_null: float = DEFAULT_TOL_NULL
    conflict_tol: float = DEFAULT_CONFLICT_TOL
    ga_clip_factor: float = 1000.0


@dataclass(frozen=True, eq=False)
class FlState:
    """Snapshot of a federated run between rounds.

    Attributes:
        model: Current global model.
        origin: Pretrained model the run measures drift against.
        round: Number of completed rounds.
        stage: Current stage.
        lr: Learning rate for the next round.
        clients: Every client, including the target.
        target_id: Client requesting unlearning.
        degenerate_streak: Consecutive skipped unlearning rounds.
        quiet_streak: Consecutive unlearning rounds with ASR at or below the early-stop level.
    """

    model: ModelParams
    origin: ModelParams
    round: int
    stage: Stage
    lr: float
    clients: tuple[ClientDataset, ...]
    target_id: int | None = None
    degenerate_streak: int = 0
    quiet_streak: int = 0

    def __post_init__(self) -> None:
        """Validate learning rate and target."""
        if not self.lr > 0:
            raise PreconditionError(f"learning rate must be positive, got {self.lr}")
        ids = [c.client_id for c in self.clients]
        if self.target_id is not None and self.target_id not in ids:
            raise ConfigurationError(f"target {self.target_id} is not one of clients {ids}")

    def participants(self) -> tuple[ClientDataset, ...]:
        """Clients training this round; the target is excluded after unlearning."""
        if self.stage in (Stage.POSTTRAIN, Stage.RETRAIN, Stage.DONE):
            return self.remaining()
        return self.clients

    def remaining(self) -> tuple[ClientDataset, ...]:
        """All clients except the target."""
        return tuple(c for c in self.clients if c.client_id != self.target_id)


RebuildFn = Callable[["FederatedEngine", FlState], tuple[FlState, list[RoundRecord]]]
PosttrainFn = Callable[["FederatedEngine", FlState], tuple[FlState, RoundRecord]]


@dataclass(frozen=True)
class AlgorithmSpec:
    """How a named algorithm runs the stages after pretraining.

    Attributes:
        name: Registry key.
        description: One-line summary for listings.
        strategy: Server direction during unlearning.
        posttrain: Replaces the projected post-training round when set.
        rebuild: Replaces unlearning and post-training entirely when set.
    """

    name: str
    description: str
    strategy: DirectionStrategy | None = None
    posttrain: PosttrainFn | None = None
    rebuild: RebuildFn | None = None


@dataclass(eq=False)
class ExperimentResult:
    """Records and checkpoints of one (algorithm, seed) job."""

    records: list[RoundRecord]
    checkpoints: dict[str, ModelParams]
    status: UnlearnStatus
    unlearn_rounds: int
    pretrain_rounds: int


class FederatedEngine:
    """Executes rounds for one seed.

    Client randomness is keyed by (seed, stage, round, client) so thread-pool
    execution gives the same results as sequential execution.
    """

    def __init__(
        self,
        schedule: StageSchedule,
        training: TrainingSettings,
        geometry: GeometrySettings,
        evaluation: EvaluationSets,
        seed: int,
    ) -> None:
        """Initialize the engine.

        Note:
            Prefer the factory method `create()`.
        """
        self.schedule = schedule
        self.training = training
        self.geometry = geometry
        self.evaluation = evaluation
        self.seed = seed

    @classmethod
    def create(
        cls,
        evaluation: EvaluationSets,
        seed: int = 0,
        schedule: StageSchedule | None = None,
        training: TrainingSettings | None = None,
        geometry: GeometrySettings | None = None,
    ) -> FederatedEngine:
        """Factory method with default settings for anything omitted.

        Args:
            evaluation: Batches each round is evaluated on.
            seed: Seed of all random streams.
            schedule: Round counts and learning rates.
            training: Client-side settings.
            geometry: Kernel tolerances.

        Returns:
            Configured FederatedEngine.
        """
        return cls(
            schedule=schedule or StageSchedule(),
            training=training or TrainingSettings(),
            geometry=geometry or GeometrySettings(),
            evaluation=evaluation,
            seed=seed,
        )

    def rng(self, *stream: int) -> np.random.Generator:
        """Generator for a named stream under this engine's seed."""
        return np.random.default_rng([self.seed, *stream])

    def layer_sizes(self, input_dim: int, n_classes: int) -> list[int]:
        """Widths from input through the hidden layers to the output."""
        return [input_dim, *self.training.hidden, n_classes]

    def initial_state(
        self,
        clients: Sequence[ClientDataset],
        target_id: int | None,
        n_classes: int,
    ) -> FlState:
        """Fresh pretraining state with a seeded initialization."""
        if not clients:
            raise ConfigurationError("no clients")
        sizes = self.layer_sizes(clients[0].train.dim, n_classes)
        model = init_model(sizes, self.rng(INIT_STREAM))
        return FlState(
            model=model,
            origin=model,
            round=0,
            stage=Stage.PRETRAIN,
            lr=self.schedule.lr0,
            clients=tuple(sorted(clients, key=lambda c: c.client_id)),
            target_id=target_id,
        )

    def _local_gradients(
        self,
        state: FlState,
        clients: Sequence[ClientDataset],
        losses: Mapping[int, LossKind],
        lr: float,
    ) -> dict[int, GradVec]:
        """Local training for each client, keyed and ordered by client id."""
        stream = _LOCAL_STREAMS[state.stage]

        def train(client: ClientDataset) -> tuple[int, GradVec]:
            rng = self.rng(stream, state.round, client.client_id)
            _, grad = local_train(
                state.model,
                client.train,
                lr=lr,
                epochs=self.training.local_epochs,
                batch_size=self.training.batch_size,
                loss=losses[client.client_id],
                rng=rng,
            )
            return client.client_id, grad

        if self.training.workers > 1 and len(clients) > 1:
            with ThreadPoolExecutor(max_workers=self.training.workers) as pool:
                results = list(pool.map(train, clients))
        else:
            results = [train(c) for c in clients]
        return dict(sorted(results, key=lambda item: item[0]))

    def _advance(self, state: FlState, model: ModelParams, **changes: object) -> FlState:
        return replace(
            state,
            model=model,
            round=state.round + 1,
            lr=state.lr * self.schedule.lr_decay,
            **changes,
        )

    def record(
        self,
        state: FlState,
        *,
        lr: float,
        nc: int = 0,
        flags: Sequence[str] = (),
    ) -> RoundRecord:
        """Evaluate the state's model for the round that produced it."""
        return snapshot(
            state.model,
            state.origin,
            self.evaluation,
            round_index=state.round,
            stage=state.stage.value,
            lr=lr,
            nc=nc,
            flags=flags,
        )

    def pretrain_round(self, state: FlState) -> FlState:
        """One FedAvg round with cross-entropy on every participant.

        Raises:
            PreconditionError: Outside the pretraining or retraining stage.
        """
        if state.stage not in (Stage.PRETRAIN, Stage.RETRAIN):
            raise PreconditionError(f"pretrain round called in stage {state.stage.value}")
        participants = state.participants()
        losses = {c.client_id: LossKind.CE for c in participants}
        grads = self._local_gradients(state, participants, losses, state.lr)
        mean = np.mean(np.stack(list(grads.values())), axis=0)
        return self._advance(state, state.model.with_flat(state.model.flat - state.lr * mean))

    def _direction(
        self, state: FlState, strategy: DirectionStrategy, matrix: GradientMatrix, g_u: GradVec
    ) -> DirectionOutcome:
        if not np.all(np.isfinite(g_u)):
            return Degenerate(reason="target gradient is not finite")
        if not np.any(g_u):
            return Degenerate(reason="target gradient vanished")
        return strategy.direction(matrix, g_u, self.rng(DIRECTION_STREAM, state.round))

    def unlearn_round(
        self, state: FlState, strategy: DirectionStrategy
    ) -> tuple[FlState, RoundRecord]:
        """One unlearning round: ``w <- w + lr * d`` with ``d`` from the strategy.

        The target trains with the strategy's loss and every other client with
        cross-entropy. A degenerate direction leaves the model unchanged.

        Args:
            state: State in the unlearning stage with a target set.
            strategy: Server direction.

        Returns:
            Tuple of (next state, round record).
        """
        if state.stage is not Stage.UNLEARN or state.target_id is None:
            raise PreconditionError("unlearn round needs the unlearning stage and a target")
        lr = self.schedule.small_lr or state.lr
        target = state.target_id
        losses = {
            c.client_id: strategy.target_loss if c.client_id == target else LossKind.CE
            for c in state.clients
        }
        grads = self._local_gradients(state, state.clients, losses, lr)
        g_u = grads.pop(target)
        matrix = GradientMatrix.from_gradients(grads, state.model.size)
        outcome = self._direction(state, strategy, matrix, g_u)

        if isinstance(outcome, Degenerate):
            logger.warning("unlearning round %d skipped: %s", state.round + 1, outcome.reason)
            nc, flags = 0, ["degenerate"]
            model = state.model
            streak = state.degenerate_streak + 1
        else:
            d = outcome.vector
            nc = conflict_count(d, matrix, self.geometry.conflict_tol) if np.any(d) else 0
            flags = list(outcome.flags)
            model = state.model.with_flat(state.model.flat + lr * d)
            streak = 0

        next_state = self._advance(state, model, degenerate_streak=streak)
        record = self.record(next_state, lr=lr, nc=nc, flags=flags)
        quiet = next_state.quiet_streak + 1 if record.asr <= self.schedule.early_stop_asr else 0
        return replace(next_state, quiet_streak=quiet), record

    def posttrain_round(self, state: FlState, project: bool = True) -> tuple[FlState, RoundRecord]:
        """One post-training FedAvg round over the remaining clients.

        With ``project`` set, each gradient pointing along ``g_a = w - w0`` is
        replaced by its normal-plane projection before averaging, so the
        aggregate never moves the model towards the origin to first order.

        Args:
            state: State in the post-training stage.
            project: Apply the normal-plane projection.

        Returns:
            Tuple of (next state, round record).
        """
        if state.stage is not Stage.POSTTRAIN:
            raise PreconditionError(f"post-training round called in stage {state.stage.value}")
        lr = state.lr
        g_a = state.model.flat - state.origin.flat
        participants = state.participants()
        losses = {c.client_id: LossKind.CE for c in participants}
        grads = self._local_gradients(state, participants, losses, lr)

        uploads = []
        applied = collapsed = 0
        for grad in grads.values():
            if not project:
                uploads.append(grad)
                continue
            projection = project_normal_plane(grad, g_a)
            applied += projection.applied
            collapsed += projection.collapsed
            uploads.append(projection.vector)
        mean = np.mean(np.stack(uploads), axis=0)

        flags = []
        if applied:
            flags.append(f"projected:{applied}")
        if collapsed:
            flags.append(f"collapsed:{collapsed}")
        if np.any(mean):
            model = state.model.with_flat(state.model.flat - lr * mean)
        else:
            flags.append("zero_aggregate")
            model = state.model

        next_state = self._advance(state, model)
        return next_state, self.record(next_state, lr=lr, flags=flags)

    def run_experiment(self, state: FlState, algorithm: AlgorithmSpec) -> ExperimentResult:
        """Pretrain, unlearn and post-train, recording every round.

        Post-training runs for ``total_rounds`` minus the unlearning rounds
        actually executed.

        Args:
            state: Initial pretraining state.
            algorithm: Stage behavior after pretraining.

        Returns:
            Records, checkpoints (``origin``, ``unlearned``, ``final``) and status.

        Raises:
            ConfigurationError: If the algorithm has neither a strategy nor a rebuild.
            ExperimentAborted: If any round fails.
        """
        if algorithm.strategy is None and algorithm.rebuild is None:
            raise ConfigurationError(f"algorithm {algorithm.name} defines no unlearning behavior")
        schedule = self.schedule
        records: list[RoundRecord] = []
        try:
            for _ in range(schedule.pretrain_rounds):
                lr = state.lr
                state = self.pretrain_round(state)
                records.append(self.record(state, lr=lr))
            origin = state.model
            logger.info(
                "%s seed %d: pretraining finished after %d rounds",
                algorithm.name,
                self.seed,
                state.round,
            )

            if algorithm.rebuild is not None:
                state = replace(state, origin=origin, stage=Stage.RETRAIN)
                state, rebuilt = algorithm.rebuild(self, state)
                records.extend(rebuilt)
                state = replace(state, stage=Stage.DONE)
                return ExperimentResult(
                    records=records,
                    checkpoints={"origin": origin, "unlearned": state.model, "final": state.model},
                    status=UnlearnStatus.COMPLETED,
                    unlearn_rounds=0,
                    pretrain_rounds=schedule.pretrain_rounds,
                )

            state = replace(state, origin=origin, stage=Stage.UNLEARN)
            status = UnlearnStatus.COMPLETED
            executed = 0
            for _ in range(schedule.unlearn_rounds):
                state, record = self.unlearn_round(state, algorithm.strategy)
                records.append(record)
                executed += 1
                if state.degenerate_streak >= schedule.max_degenerate_skips:
                    status = UnlearnStatus.DEGENERATE_STOP
                    logger.warning(
                        "%s seed %d: unlearning ended after %d consecutive degenerate rounds",
                        algorithm.name,
                        self.seed,
                        state.degenerate_streak,
                    )
                    break
                if schedule.early_stop and state.quiet_streak >= schedule.early_stop_patience:
                    status = UnlearnStatus.EARLY_STOP
                    logger.warning(
                        "%s seed %d: unlearning stopped early at round %d (ASR %.4f)",
                        algorithm.name,
                        self.seed,
                        state.round,
                        record.asr,
                    )
                    break
            unlearned = state.model

            state = replace(state, stage=Stage.POSTTRAIN)
            for _ in range(schedule.total_rounds - executed):
                if algorithm.posttrain is not None:
                    state, record = algorithm.posttrain(self, state)
                else:
                    state, record = self.posttrain_round(state)
                records.append(record)
            state = replace(state, stage=Stage.DONE)
        except SimulationError as e:
            logger.exception("%s seed %d aborted in %s", algorithm.name, self.seed, state.stage.value)
            raise ExperimentAborted(
                e,
                algorithm=algorithm.name,
                seed=self.seed,
                stage=state.stage.value,
                round_index=state.round + 1,
            ) from e

        logger.info(
            "%s seed %d: %s after %d unlearning rounds", algorithm.name, self.seed, status.value, executed
        )
        return ExperimentResult(
            records=records,
            checkpoints={"origin": origin, "unlearned": unlearned, "final": state.model},
            status=status,
            unlearn_rounds=executed,
            pretrain_rounds=schedule.pretrain_rounds,
        )
