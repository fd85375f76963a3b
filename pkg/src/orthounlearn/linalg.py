"""Small-matrix linear algebra and gradient-geometry kernels.

Everything here works on the (m-1) x (m-1) Gram matrix of the remaining
clients' gradients; no D x D matrix is ever formed.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from orthounlearn.errors import NumericalError, PreconditionError
from orthounlearn.nn_core import FloatArray, GradVec

logger = logging.getLogger(__name__)

DEFAULT_TOL_RANK = 1e-10
DEFAULT_TOL_NULL = 1e-9
DEFAULT_CONFLICT_TOL = 1e-8
MAX_JACOBI_SWEEPS = 100
# Relative residual below which a normal-plane projection is treated as zero
COLLAPSE_TOL = 1e-14

__all__ = [
    "Degenerate",
    "Direction",
    "DirectionOutcome",
    "EigenDecomp",
    "GradientMatrix",
    "Projection",
    "RowSpaceProjector",
    "conflict_count",
    "cos_sim",
    "gram",
    "osd_direction",
    "osd_direction_closed_form",
    "project_normal_plane",
    "sym_eig",
]


@dataclass(frozen=True, eq=False)
class GradientMatrix:
    """Remaining-client gradients stacked as rows, ordered by client id."""

    rows: FloatArray
    client_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        """Validate row layout and ordering."""
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise PreconditionError(f"gradient matrix must be 2-D, got shape {rows.shape}")
        ids = tuple(int(i) for i in self.client_ids)
        if len(ids) != rows.shape[0]:
            raise PreconditionError(f"{rows.shape[0]} rows but {len(ids)} client ids")
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise PreconditionError(f"client ids must be strictly ascending: {ids}")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "client_ids", ids)

    @classmethod
    def from_gradients(cls, gradients: Mapping[int, GradVec], dim: int) -> GradientMatrix:
        """Stack per-client gradients in ascending client-id order.

        Args:
            gradients: Mapping of client id to gradient vector.
            dim: Parameter count D, needed when the mapping is empty.
        """
        ids = sorted(gradients)
        if not ids:
            return cls(rows=np.zeros((0, dim)), client_ids=())
        rows = np.stack([np.asarray(gradients[i], dtype=np.float64) for i in ids])
        if rows.shape[1] != dim:
            raise PreconditionError(f"gradients have length {rows.shape[1]}, expected {dim}")
        return cls(rows=rows, client_ids=tuple(ids))

    @property
    def count(self) -> int:
        """Number of stacked gradients (m - 1)."""
        return int(self.rows.shape[0])

    @property
    def dim(self) -> int:
        """Gradient length D."""
        return int(self.rows.shape[1])

    @property
    def is_empty(self) -> bool:
        """True when no remaining client contributed a gradient."""
        return self.count == 0


@dataclass(frozen=True, eq=False)
class EigenDecomp:
    """Eigenpairs of a symmetric matrix, eigenvalues descending."""

    eigvals: FloatArray
    eigvecs: FloatArray


@dataclass(frozen=True, eq=False)
class Direction:
    """A usable update direction, with optional flags for the round record."""

    vector: GradVec
    flags: tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class Degenerate:
    """No direction exists under the constraints; the round should be skipped."""

    reason: str


DirectionOutcome = Direction | Degenerate


@dataclass(frozen=True, eq=False)
class Projection:
    """Result of projecting a client gradient onto a normal plane.

    Attributes:
        vector: Gradient to upload (unchanged when not applied).
        applied: True if the gradient pointed towards the plane normal.
        collapsed: True if the projection vanished and a zero vector was returned.
    """

    vector: GradVec
    applied: bool
    collapsed: bool


def gram(matrix: GradientMatrix) -> FloatArray:
    """Gram matrix ``G G^T`` with entry (i, j) = g_i . g_j."""
    rows = matrix.rows
    product = rows @ rows.T
    return 0.5 * (product + product.T)


def sym_eig(a: FloatArray, max_sweeps: int = MAX_JACOBI_SWEEPS) -> EigenDecomp:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Args:
        a: Square symmetric matrix.
        max_sweeps: Sweep cap before giving up.

    Returns:
        EigenDecomp with eigenvalues sorted descending and orthonormal
        eigenvectors as columns.

    Raises:
        PreconditionError: If the matrix is not square and symmetric.
        NumericalError: If the rotations do not converge within the cap.
    """
    work = np.array(a, dtype=np.float64, copy=True)
    if work.ndim != 2 or work.shape[0] != work.shape[1]:
        raise PreconditionError(f"expected a square matrix, got shape {work.shape}")
    n = work.shape[0]
    scale = max(float(np.abs(work).max(initial=0.0)), 1.0)
    if not np.allclose(work, work.T, rtol=0.0, atol=1e-10 * scale):
        raise PreconditionError("matrix is not symmetric")
    vecs = np.eye(n)

    for sweep in range(max_sweeps):
        if not np.any(np.triu(work, 1)):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if apq == 0.0:
                    continue
                guard = 100.0 * abs(apq)
                app, aqq = work[p, p], work[q, q]
                if sweep > 3 and abs(app) + guard == abs(app) and abs(aqq) + guard == abs(aqq):
                    work[p, q] = work[q, p] = 0.0
                    continue
                diff = aqq - app
                if abs(diff) + guard == abs(diff):
                    t = apq / diff
                else:
                    theta = 0.5 * diff / apq
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p, col_q = work[:, p].copy(), work[:, q].copy()
                work[:, p] = c * col_p - s * col_q
                work[:, q] = s * col_p + c * col_q
                row_p, row_q = work[p, :].copy(), work[q, :].copy()
                work[p, :] = c * row_p - s * row_q
                work[q, :] = s * row_p + c * row_q
                work[p, q] = work[q, p] = 0.0
                vec_p, vec_q = vecs[:, p].copy(), vecs[:, q].copy()
                vecs[:, p] = c * vec_p - s * vec_q
                vecs[:, q] = s * vec_p + c * vec_q
    else:
        raise NumericalError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")

    eigvals = np.diag(work).copy()
    order = np.argsort(-eigvals, kind="stable")
    return EigenDecomp(eigvals=eigvals[order], eigvecs=vecs[:, order])


def _pseudo_inverse_diagonal(eigvals: FloatArray, tol_rank: float) -> FloatArray:
    """Diagonal of Sigma^+: reciprocal of eigenvalues above ``tol_rank * s_max``."""
    if eigvals.size == 0 or eigvals[0] <= 0.0:
        return np.zeros_like(eigvals)
    keep = eigvals > tol_rank * eigvals[0]
    inverse = np.zeros_like(eigvals)
    inverse[keep] = 1.0 / eigvals[keep]
    return inverse


class RowSpaceProjector:
    """Orthogonal projector onto rowspace(G), applied through (G G^T)^+."""

    def __init__(self, matrix: GradientMatrix, decomp: EigenDecomp, tol_rank: float) -> None:
        """Initialize the projector.

        Note:
            Prefer the factory method `create()`.
        """
        self.matrix = matrix
        self.decomp = decomp
        self.sigma_plus = _pseudo_inverse_diagonal(decomp.eigvals, tol_rank)

    @classmethod
    def create(
        cls, matrix: GradientMatrix, tol_rank: float = DEFAULT_TOL_RANK
    ) -> RowSpaceProjector:
        """Decompose the Gram matrix of ``matrix`` and build the projector."""
        if matrix.is_empty:
            return cls(matrix, EigenDecomp(np.zeros(0), np.zeros((0, 0))), tol_rank)
        return cls(matrix, sym_eig(gram(matrix)), tol_rank)

    @property
    def rank(self) -> int:
        """Numerical rank of G."""
        return int(np.count_nonzero(self.sigma_plus))

    def project(self, x: FloatArray) -> FloatArray:
        """Component of ``x`` in rowspace(G): ``G^T U Sigma^+ V^T G x``."""
        if self.matrix.is_empty:
            return np.zeros_like(x)
        vecs = self.decomp.eigvecs
        coeffs = vecs @ (self.sigma_plus * (vecs.T @ (self.matrix.rows @ x)))
        return self.matrix.rows.T @ coeffs

    def complement(self, x: FloatArray) -> FloatArray:
        """Component of ``x`` in null(G), re-projected once to clean up rounding."""
        residual = x - self.project(x)
        return residual - self.project(residual)


def _checked_target(matrix: GradientMatrix, g_u: GradVec) -> tuple[GradVec, float]:
    g_u = np.asarray(g_u, dtype=np.float64)
    norm_u = float(np.linalg.norm(g_u))
    if not np.isfinite(norm_u) or norm_u == 0.0:
        raise PreconditionError("target gradient must be finite and non-zero")
    if matrix.dim != g_u.size:
        raise PreconditionError(
            f"target gradient has length {g_u.size}, matrix rows have {matrix.dim}"
        )
    return g_u, norm_u


def osd_direction(
    matrix: GradientMatrix,
    g_u: GradVec,
    tol_rank: float = DEFAULT_TOL_RANK,
    tol_null: float = DEFAULT_TOL_NULL,
) -> DirectionOutcome:
    """Orthogonal steepest descent direction for the target gradient.

    Returns the vector of norm ``||g_u||`` in null(G) closest in angle to
    ``-g_u``, computed as the normalized null-space component of ``-g_u``.

    Args:
        matrix: Remaining-client gradients G.
        g_u: Target client gradient.
        tol_rank: Relative eigenvalue cutoff for the pseudoinverse.
        tol_null: Relative residual below which g_u counts as in rowspace(G).

    Returns:
        Direction, or Degenerate when g_u lies in rowspace(G).

    Raises:
        PreconditionError: If g_u is zero or has the wrong length.
    """
    g_u, norm_u = _checked_target(matrix, g_u)
    if matrix.is_empty:
        return Direction(vector=-g_u)

    projector = RowSpaceProjector.create(matrix, tol_rank)
    raw = projector.project(g_u) - g_u
    raw_norm = float(np.linalg.norm(raw))
    if raw_norm <= tol_null * norm_u:
        logger.debug("target gradient lies in rowspace (residual %.3e)", raw_norm / norm_u)
        return Degenerate(reason=f"target gradient in rowspace (residual {raw_norm / norm_u:.3e})")

    raw = raw - projector.project(raw)
    return Direction(vector=raw * (norm_u / float(np.linalg.norm(raw))))


def osd_direction_closed_form(
    matrix: GradientMatrix,
    g_u: GradVec,
    tol_rank: float = DEFAULT_TOL_RANK,
    tol_null: float = DEFAULT_TOL_NULL,
) -> DirectionOutcome:
    """Literal evaluation ``d = (G^T U Sigma^+ V^T G g_u - g_u) / (2 ||g_u||^2 mu)``.

    The multiplier is ``mu = ||G^T U Sigma^+ V^T G g_u - g_u|| / (2 ||g_u||^3)``,
    which is the value satisfying the norm constraint ``||d|| = ||g_u||``.
    """
    g_u, norm_u = _checked_target(matrix, g_u)
    projector = RowSpaceProjector.create(matrix, tol_rank)
    raw = projector.project(g_u) - g_u
    raw_norm = float(np.linalg.norm(raw))
    if raw_norm <= tol_null * norm_u:
        return Degenerate(reason="multiplier vanishes: target gradient in rowspace")
    mu = raw_norm / (2.0 * norm_u**3)
    return Direction(vector=raw / (2.0 * norm_u**2 * mu))


def project_normal_plane(g: GradVec, g_a: GradVec) -> Projection:
    """Project ``g`` onto the normal plane of ``g_a`` when they point the same way.

    The projected vector is rescaled to the original norm ``||g||``.
    Gradients with ``g . g_a <= 0`` (or a zero ``g_a``) pass through.
    """
    g = np.asarray(g, dtype=np.float64)
    g_a = np.asarray(g_a, dtype=np.float64)
    norm_a_sq = float(g_a @ g_a)
    dot = float(g @ g_a)
    if norm_a_sq == 0.0 or dot <= 0.0:
        return Projection(vector=g, applied=False, collapsed=False)

    projected = g - (dot / norm_a_sq) * g_a
    projected = projected - (float(projected @ g_a) / norm_a_sq) * g_a
    norm_g = float(np.linalg.norm(g))
    norm_p = float(np.linalg.norm(projected))
    if norm_p <= COLLAPSE_TOL * norm_g:
        return Projection(vector=np.zeros_like(g), applied=True, collapsed=True)
    return Projection(vector=projected * (norm_g / norm_p), applied=True, collapsed=False)


def cos_sim(a: GradVec, b: GradVec) -> float:
    """Cosine similarity of two non-zero vectors.

    Raises:
        PreconditionError: If either vector is zero.
    """
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise PreconditionError("cosine similarity of a zero vector is undefined")
    return float(np.clip(float(np.dot(a, b)) / (norm_a * norm_b), -1.0, 1.0))


def conflict_count(
    d: GradVec, matrix: GradientMatrix, tol: float = DEFAULT_CONFLICT_TOL
) -> int:
    """Number of rows g_i with ``g_i . d < -tol ||g_i|| ||d||``."""
    norm_d = float(np.linalg.norm(d))
    if norm_d == 0.0:
        raise PreconditionError("conflict count needs a non-zero direction")
    if matrix.is_empty:
        return 0
    dots = matrix.rows @ d
    bounds = -tol * np.linalg.norm(matrix.rows, axis=1) * norm_d
    return int(np.count_nonzero(dots < bounds))
