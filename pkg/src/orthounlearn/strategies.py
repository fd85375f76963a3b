"""Unlearning strategies and the algorithm registry.

Each algorithm is an :class:`~orthounlearn.engine.AlgorithmSpec` built from a
direction strategy plus post-training behavior. New algorithms are added by
registering a factory, without touching the round loop.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, replace

import numpy as np

from orthounlearn.engine import (
    RETRAIN_INIT_STREAM,
    AlgorithmSpec,
    FederatedEngine,
    FlState,
    GeometrySettings,
    Stage,
)
from orthounlearn.errors import ConfigurationError, PreconditionError
from orthounlearn.linalg import (
    Degenerate,
    Direction,
    DirectionOutcome,
    GradientMatrix,
    RowSpaceProjector,
    osd_direction,
)
from orthounlearn.metrics import RoundRecord
from orthounlearn.nn_core import GradVec, LossKind, init_model

logger = logging.getLogger(__name__)

MAX_NULL_SAMPLES = 50


@dataclass(frozen=True)
class OrthogonalSteepestDescent:
    """Direction in null(G) closest in angle to ``-g_u``, scaled to ``||g_u||``."""

    tol_rank: float
    tol_null: float
    target_loss: LossKind = LossKind.UCE
    name: str = "osd"

    def direction(
        self, matrix: GradientMatrix, g_u: GradVec, rng: np.random.Generator
    ) -> DirectionOutcome:
        """Delegate to :func:`~orthounlearn.linalg.osd_direction`."""
        return osd_direction(matrix, g_u, self.tol_rank, self.tol_null)


@dataclass(frozen=True)
class GradientAscent:
    """Ascent on the target's cross-entropy, ``d = +g_u``, with a norm cap.

    The cap is ``clip_factor`` times the median remaining-client gradient norm.
    Clipping is logged and flagged so the growth of the ascent gradient stays
    visible in the records.
    """

    clip_factor: float
    target_loss: LossKind = LossKind.CE
    name: str = "ga-ce"

    def direction(
        self, matrix: GradientMatrix, g_u: GradVec, rng: np.random.Generator
    ) -> DirectionOutcome:
        """Return ``+g_u``, clipped to the cap."""
        if not np.all(np.isfinite(g_u)):
            logger.warning("ascent gradient is not finite; skipping round")
            return Degenerate(reason="ascent gradient is not finite")
        norm_u = float(np.linalg.norm(g_u))
        if matrix.is_empty:
            return Direction(vector=g_u.copy())
        cap = self.clip_factor * float(np.median(np.linalg.norm(matrix.rows, axis=1)))
        if cap > 0.0 and norm_u > cap:
            logger.warning("ascent gradient norm %.3e clipped to %.3e", norm_u, cap)
            return Direction(vector=g_u * (cap / norm_u), flags=("clipped",))
        return Direction(vector=g_u.copy())


@dataclass(frozen=True)
class NegativeGradient:
    """Raw descent on the target's unlearning loss, ``d = -g_u``."""

    target_loss: LossKind = LossKind.UCE
    name: str = "neg-grad"

    def direction(
        self, matrix: GradientMatrix, g_u: GradVec, rng: np.random.Generator
    ) -> DirectionOutcome:
        """Return ``-g_u``."""
        return Direction(vector=-g_u)


@dataclass(frozen=True)
class RandomNullSpace:
    """Uniform direction on the null-space sphere of radius ``||g_u||``.

    The sign is chosen so that ``d . g_u < 0``; samples orthogonal to
    ``g_u`` are redrawn.
    """

    tol_rank: float
    tol_null: float
    target_loss: LossKind = LossKind.UCE
    name: str = "random-null"

    def direction(
        self, matrix: GradientMatrix, g_u: GradVec, rng: np.random.Generator
    ) -> DirectionOutcome:
        """Sample a null-space direction that decreases the target loss."""
        projector = RowSpaceProjector.create(matrix, self.tol_rank)
        if projector.rank >= matrix.dim:
            return Degenerate(reason="null space is trivial")
        norm_u = float(np.linalg.norm(g_u))
        for _ in range(MAX_NULL_SAMPLES):
            sample = rng.standard_normal(matrix.dim)
            v = projector.complement(sample)
            norm_v = float(np.linalg.norm(v))
            if norm_v <= self.tol_null * float(np.linalg.norm(sample)):
                continue
            d = v * (norm_u / norm_v)
            alignment = float(d @ g_u)
            if abs(alignment) <= self.tol_null * norm_u * norm_u:
                continue
            return Direction(vector=-d if alignment > 0 else d)
        return Degenerate(reason=f"no descending null-space sample in {MAX_NULL_SAMPLES} draws")


def plain_posttrain_round(
    engine: FederatedEngine, state: FlState
) -> tuple[FlState, RoundRecord]:
    """Post-training FedAvg round without the normal-plane projection."""
    return engine.posttrain_round(state, project=False)


def retrain(engine: FederatedEngine, state: FlState) -> tuple[FlState, list[RoundRecord]]:
    """Retrain from a fresh initialization without the target client.

    Runs the pretraining schedule (same round count, learning rate restarted
    at ``lr0``) over the remaining clients.

    Args:
        engine: Engine holding schedule and evaluation sets.
        state: State in the retraining stage, with ``origin`` set.

    Returns:
        Tuple of (final state, one record per retraining round).
    """
    if state.stage is not Stage.RETRAIN:
        raise PreconditionError(f"retrain called in stage {state.stage.value}")
    shapes = state.model.shapes
    sizes = [shapes[0][0], *(out_dim for _, out_dim in shapes)]
    state = replace(
        state,
        model=init_model(sizes, engine.rng(RETRAIN_INIT_STREAM)),
        lr=engine.schedule.lr0,
    )
    records = []
    for _ in range(engine.schedule.pretrain_rounds):
        lr = state.lr
        state = engine.pretrain_round(state)
        records.append(engine.record(state, lr=lr))
    logger.info("retraining finished after %d rounds", len(records))
    return state, records


AlgorithmFactory = Callable[[GeometrySettings], AlgorithmSpec]

_FACTORIES: dict[str, AlgorithmFactory] = {
    "osd": lambda g: AlgorithmSpec(
        name="osd",
        description="Orthogonal steepest descent with projected post-training",
        strategy=OrthogonalSteepestDescent(g.tol_rank, g.tol_null),
    ),
    "ga-ce": lambda g: AlgorithmSpec(
        name="ga-ce",
        description="Gradient ascent on cross-entropy",
        strategy=GradientAscent(g.ga_clip_factor),
    ),
    "neg-grad": lambda g: AlgorithmSpec(
        name="neg-grad",
        description="Negative unlearning-loss gradient without conflict handling",
        strategy=NegativeGradient(),
    ),
    "random-null": lambda g: AlgorithmSpec(
        name="random-null",
        description="Random descending direction in the remaining clients' null space",
        strategy=RandomNullSpace(g.tol_rank, g.tol_null),
    ),
    "osd-no-projection": lambda g: AlgorithmSpec(
        name="osd-no-projection",
        description="Orthogonal steepest descent with plain FedAvg post-training",
        strategy=OrthogonalSteepestDescent(g.tol_rank, g.tol_null),
        posttrain=plain_posttrain_round,
    ),
    "osd-unscaled-uce": lambda g: AlgorithmSpec(
        name="osd-unscaled-uce",
        description="Orthogonal steepest descent on -log(1 - p) without the halving",
        strategy=OrthogonalSteepestDescent(
            g.tol_rank, g.tol_null, target_loss=LossKind.UCE_UNSCALED, name="osd-unscaled-uce"
        ),
    ),
    "retrain": lambda g: AlgorithmSpec(
        name="retrain",
        description="Retraining from scratch without the target client",
        rebuild=retrain,
    ),
}

ALGORITHMS: tuple[str, ...] = tuple(_FACTORIES)


def get_algorithm(name: str, geometry: GeometrySettings | None = None) -> AlgorithmSpec:
    """Build a registered algorithm by name.

    Args:
        name: Registry key such as "osd".
        geometry: Kernel tolerances; defaults apply when omitted.

    Returns:
        AlgorithmSpec for the name.

    Raises:
        ConfigurationError: If the name is not registered.
    """
    factory = _FACTORIES.get(name)
    if factory is None:
        raise ConfigurationError(
            f"unknown algorithm '{name}'. Supported: {', '.join(ALGORITHMS)}", "algorithms"
        )
    return factory(geometry or GeometrySettings())
