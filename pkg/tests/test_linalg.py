"""Tests for linalg module."""

from __future__ import annotations

import numpy as np
import pytest

from orthounlearn.errors import NumericalError, PreconditionError
from orthounlearn.linalg import (
    Degenerate,
    Direction,
    GradientMatrix,
    RowSpaceProjector,
    conflict_count,
    cos_sim,
    gram,
    osd_direction,
    osd_direction_closed_form,
    project_normal_plane,
    sym_eig,
)

N_INSTANCES = 1000


def _gram_schmidt_basis(rows: np.ndarray, tol: float = 1e-10) -> list[np.ndarray]:
    """Orthonormal basis of the row space, dropping dependent rows."""
    basis: list[np.ndarray] = []
    for row in rows:
        v = row.copy()
        for _ in range(2):
            for q in basis:
                v -= (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > tol * max(np.linalg.norm(row), 1.0):
            basis.append(v / norm)
    return basis


def _oracle_direction(rows: np.ndarray, g_u: np.ndarray) -> np.ndarray | None:
    """Null-space component of -g_u rescaled to ||g_u||, or None if it vanishes."""
    v = -g_u.copy()
    basis = _gram_schmidt_basis(rows)
    for _ in range(2):
        for q in basis:
            v -= (q @ v) * q
    norm = np.linalg.norm(v)
    if norm <= 1e-6 * np.linalg.norm(g_u):
        return None
    return v * (np.linalg.norm(g_u) / norm)


def _random_instance(rng: np.random.Generator) -> tuple[GradientMatrix, np.ndarray]:
    """Random G (sometimes rank-deficient) and g_u."""
    dim = int(rng.integers(5, 51))
    count = int(rng.integers(1, 9))
    rows = rng.standard_normal((count, dim)) * rng.uniform(0.1, 10.0)
    if count >= 2 and rng.random() < 0.4:
        if rng.random() < 0.5:
            rows[-1] = rows[0]
        else:
            rows[-1] = 0.7 * rows[0] - 1.3 * rows[1]
    return GradientMatrix(rows=rows, client_ids=tuple(range(1, count + 1))), rng.standard_normal(dim)


class TestGradientMatrix:
    """Tests for GradientMatrix."""

    def test_from_gradients_orders_by_id(self) -> None:
        """Test rows are stacked in ascending client-id order."""
        matrix = GradientMatrix.from_gradients({3: np.ones(2), 1: np.zeros(2)}, dim=2)
        assert matrix.client_ids == (1, 3)
        np.testing.assert_array_equal(matrix.rows, [[0, 0], [1, 1]])

    def test_empty_mapping(self) -> None:
        """Test an empty mapping gives a 0 x D matrix."""
        matrix = GradientMatrix.from_gradients({}, dim=4)
        assert matrix.is_empty
        assert matrix.rows.shape == (0, 4)
        assert matrix.dim == 4

    def test_unsorted_ids_raise(self) -> None:
        """Test ids must be strictly ascending."""
        with pytest.raises(PreconditionError, match="ascending"):
            GradientMatrix(rows=np.zeros((2, 3)), client_ids=(2, 1))

    def test_wrong_gradient_length(self) -> None:
        """Test gradients of the wrong length raise."""
        with pytest.raises(PreconditionError, match="expected 5"):
            GradientMatrix.from_gradients({0: np.zeros(3)}, dim=5)


class TestSymEig:
    """Tests for sym_eig."""

    def test_reconstruction_and_orthonormality(self, rng: np.random.Generator) -> None:
        """Test A = Q diag(L) Q^T and Q^T Q = I."""
        base = rng.standard_normal((6, 6))
        a = base + base.T
        decomp = sym_eig(a)
        q = decomp.eigvecs
        rebuilt = q @ np.diag(decomp.eigvals) @ q.T
        assert np.linalg.norm(a - rebuilt) <= 1e-8 * np.linalg.norm(a)
        np.testing.assert_allclose(q.T @ q, np.eye(6), atol=1e-10)

    def test_eigenvalues_descending(self, rng: np.random.Generator) -> None:
        """Test eigenvalues come sorted descending and match LAPACK."""
        base = rng.standard_normal((5, 5))
        a = base @ base.T
        decomp = sym_eig(a)
        assert np.all(np.diff(decomp.eigvals) <= 0)
        np.testing.assert_allclose(decomp.eigvals, np.linalg.eigvalsh(a)[::-1], atol=1e-10)

    def test_rank_deficient_gram(self, random_matrix: GradientMatrix) -> None:
        """Test a duplicated gradient gives a (numerically) zero eigenvalue."""
        rows = np.vstack([random_matrix.rows, random_matrix.rows[:1]])
        decomp = sym_eig(gram(GradientMatrix(rows=rows, client_ids=(1, 2, 3, 4))))
        assert decomp.eigvals[-1] == pytest.approx(0.0, abs=1e-10 * decomp.eigvals[0])

    def test_one_by_one(self) -> None:
        """Test the scalar case."""
        decomp = sym_eig(np.array([[4.0]]))
        np.testing.assert_array_equal(decomp.eigvals, [4.0])
        np.testing.assert_array_equal(decomp.eigvecs, [[1.0]])

    def test_not_square(self) -> None:
        """Test non-square input raises."""
        with pytest.raises(PreconditionError, match="square"):
            sym_eig(np.zeros((2, 3)))

    def test_not_symmetric(self) -> None:
        """Test asymmetric input raises."""
        with pytest.raises(PreconditionError, match="symmetric"):
            sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_sweep_cap(self, rng: np.random.Generator) -> None:
        """Test exhausting the sweep cap raises a numerical error."""
        base = rng.standard_normal((4, 4))
        with pytest.raises(NumericalError, match="converge"):
            sym_eig(base + base.T, max_sweeps=1)


class TestRowSpaceProjector:
    """Tests for RowSpaceProjector."""

    def test_projection_is_idempotent(
        self, random_matrix: GradientMatrix, rng: np.random.Generator
    ) -> None:
        """Test projecting twice equals projecting once."""
        projector = RowSpaceProjector.create(random_matrix)
        x = rng.standard_normal(random_matrix.dim)
        once = projector.project(x)
        np.testing.assert_allclose(projector.project(once), once, atol=1e-10)

    def test_complement_is_orthogonal_to_rows(
        self, random_matrix: GradientMatrix, rng: np.random.Generator
    ) -> None:
        """Test the complement is orthogonal to every gradient."""
        projector = RowSpaceProjector.create(random_matrix)
        residual = projector.complement(rng.standard_normal(random_matrix.dim))
        np.testing.assert_allclose(random_matrix.rows @ residual, 0.0, atol=1e-10)

    def test_rank_ignores_duplicates(self, random_matrix: GradientMatrix) -> None:
        """Test duplicated rows do not raise the rank."""
        rows = np.vstack([random_matrix.rows, random_matrix.rows[1:2]])
        projector = RowSpaceProjector.create(GradientMatrix(rows=rows, client_ids=(1, 2, 3, 4)))
        assert projector.rank == 3

    def test_empty_matrix_projects_to_zero(self) -> None:
        """Test the empty matrix has rank 0 and a zero projection."""
        projector = RowSpaceProjector.create(GradientMatrix.from_gradients({}, dim=3))
        assert projector.rank == 0
        np.testing.assert_array_equal(projector.project(np.ones(3)), np.zeros(3))


class TestOsdDirection:
    """Tests for osd_direction and its closed form."""

    def test_empty_matrix_returns_negative_gradient(self) -> None:
        """Test no remaining gradients gives d = -g_u."""
        g_u = np.array([1.0, -2.0, 3.0])
        outcome = osd_direction(GradientMatrix.from_gradients({}, dim=3), g_u)
        assert isinstance(outcome, Direction)
        np.testing.assert_array_equal(outcome.vector, -g_u)

    def test_gradient_in_rowspace_is_degenerate(self, random_matrix: GradientMatrix) -> None:
        """Test g_u spanned by G yields Degenerate."""
        g_u = 2.0 * random_matrix.rows[0] - random_matrix.rows[2]
        assert isinstance(osd_direction(random_matrix, g_u), Degenerate)
        assert isinstance(osd_direction_closed_form(random_matrix, g_u), Degenerate)

    def test_zero_target_raises(self, random_matrix: GradientMatrix) -> None:
        """Test a zero target gradient is a precondition failure."""
        with pytest.raises(PreconditionError):
            osd_direction(random_matrix, np.zeros(random_matrix.dim))

    def test_length_mismatch_raises(self, random_matrix: GradientMatrix) -> None:
        """Test a target gradient of the wrong length raises."""
        with pytest.raises(PreconditionError, match="length"):
            osd_direction(random_matrix, np.ones(random_matrix.dim + 1))

    def test_orthogonal_rows_hand_case(self) -> None:
        """Test G = e1 and g_u = (1, 1) gives d = -sqrt(2) e2."""
        matrix = GradientMatrix(rows=np.array([[1.0, 0.0]]), client_ids=(1,))
        outcome = osd_direction(matrix, np.array([1.0, 1.0]))
        assert isinstance(outcome, Direction)
        np.testing.assert_allclose(outcome.vector, [0.0, -np.sqrt(2.0)], atol=1e-15)

    def test_random_instances_against_oracle(self) -> None:
        """Test orthogonality, norm, descent and oracle agreement on random instances."""
        rng = np.random.default_rng(2024)
        checked = 0
        for _ in range(N_INSTANCES):
            matrix, g_u = _random_instance(rng)
            outcome = osd_direction(matrix, g_u)
            expected = _oracle_direction(matrix.rows, g_u)
            if isinstance(outcome, Degenerate):
                assert expected is None
                continue
            d = outcome.vector
            norm_u = np.linalg.norm(g_u)
            cosines = np.abs(matrix.rows @ d) / (np.linalg.norm(matrix.rows, axis=1) * np.linalg.norm(d))
            assert cosines.max() <= 1e-8
            assert abs(np.linalg.norm(d) - norm_u) / norm_u <= 1e-10
            assert d @ g_u <= 0.0
            assert expected is not None
            assert np.linalg.norm(d - expected) <= 1e-7 * norm_u
            checked += 1
        assert checked > N_INSTANCES // 2

    def test_closed_form_agrees(self) -> None:
        """Test the literal pseudoinverse formula matches the projection form."""
        rng = np.random.default_rng(77)
        for _ in range(N_INSTANCES):
            matrix, g_u = _random_instance(rng)
            projected = osd_direction(matrix, g_u)
            literal = osd_direction_closed_form(matrix, g_u)
            if isinstance(projected, Degenerate):
                continue
            assert isinstance(literal, Direction)
            scale = np.linalg.norm(projected.vector)
            assert np.linalg.norm(literal.vector - projected.vector) <= 1e-8 * scale


class TestProjectNormalPlane:
    """Tests for project_normal_plane."""

    def test_random_pairs(self) -> None:
        """Test pass-through, orthogonality, norm and the sqrt(2) bound on random pairs."""
        rng = np.random.default_rng(5)
        for _ in range(N_INSTANCES):
            dim = int(rng.integers(2, 40))
            g = rng.standard_normal(dim)
            g_a = rng.standard_normal(dim)
            result = project_normal_plane(g, g_a)
            if g @ g_a <= 0:
                assert not result.applied
                np.testing.assert_array_equal(result.vector, g)
                continue
            norm_g = np.linalg.norm(g)
            assert result.applied
            assert abs(result.vector @ g_a) <= 1e-10 * norm_g * np.linalg.norm(g_a)
            assert np.linalg.norm(result.vector) == pytest.approx(norm_g, rel=1e-12)
            assert np.linalg.norm(result.vector - g) <= np.sqrt(2.0) * norm_g * (1 + 1e-12)

    def test_zero_anchor_passes_through(self) -> None:
        """Test a zero g_a leaves the gradient unchanged."""
        g = np.array([1.0, 2.0])
        result = project_normal_plane(g, np.zeros(2))
        assert not result.applied
        np.testing.assert_array_equal(result.vector, g)

    def test_parallel_gradient_collapses(self) -> None:
        """Test a gradient parallel to g_a collapses to zero."""
        result = project_normal_plane(np.array([2.0, 0.0]), np.array([1.0, 0.0]))
        assert result.applied
        assert result.collapsed
        np.testing.assert_array_equal(result.vector, np.zeros(2))


class TestCosSimAndConflicts:
    """Tests for cos_sim and conflict_count."""

    def test_cos_sim_values(self) -> None:
        """Test cosine of parallel, orthogonal and opposite vectors."""
        assert cos_sim(np.array([1.0, 0.0]), np.array([3.0, 0.0])) == pytest.approx(1.0)
        assert cos_sim(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0)
        assert cos_sim(np.array([1.0, 1.0]), np.array([-1.0, -1.0])) == pytest.approx(-1.0)

    def test_cos_sim_zero_vector(self) -> None:
        """Test a zero vector raises."""
        with pytest.raises(PreconditionError):
            cos_sim(np.zeros(2), np.ones(2))

    def test_conflict_count(self) -> None:
        """Test only rows with a clearly negative dot product count."""
        matrix = GradientMatrix(
            rows=np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]), client_ids=(1, 2, 3)
        )
        assert conflict_count(np.array([1.0, 0.0]), matrix) == 1
        assert conflict_count(np.array([-1.0, -1.0]), matrix) == 2

    def test_orthogonal_direction_has_no_conflicts(self, random_matrix: GradientMatrix) -> None:
        """Test an OSD direction never conflicts with the remaining gradients."""
        outcome = osd_direction(random_matrix, np.arange(random_matrix.dim, dtype=float) + 1.0)
        assert isinstance(outcome, Direction)
        assert conflict_count(outcome.vector, random_matrix) == 0

    def test_conflict_count_zero_direction(self, random_matrix: GradientMatrix) -> None:
        """Test a zero direction raises."""
        with pytest.raises(PreconditionError):
            conflict_count(np.zeros(random_matrix.dim), random_matrix)
