import numpy as np
import numpy.testing as npt
import pytest

from glyphflow import linalg
from glyphflow.errors import InvalidInputError, NumericalError


def random_spd(rng, n):
    m = rng.standard_normal((n, n))
    return m @ m.T + n * np.eye(n)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((3, 5))
        npt.assert_array_equal(linalg.matmul(np.eye(3), m), m)

    def test_zeros(self):
        out = linalg.matmul(np.zeros((2, 3)), np.ones((3, 4)))
        npt.assert_array_equal(out, np.zeros((2, 4)))

    def test_hand_arithmetic(self):
        out = linalg.matmul([[1, 2], [3, 4]], [[5], [6]])
        npt.assert_array_equal(out, [[17], [39]])

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_non_finite(self):
        bad = np.ones((2, 2))
        bad[0, 0] = np.nan
        with pytest.raises(InvalidInputError):
            linalg.matmul(bad, np.ones((2, 2)))

    def test_bit_stable(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((9, 13))
        b = rng.standard_normal((13, 6))
        first = linalg.matmul(a, b)
        second = linalg.matmul(a.copy(), b.copy())
        assert first.tobytes() == second.tobytes()


class TestSolveSpd:
    def test_identity_system(self):
        rng = np.random.default_rng(1)
        b = rng.standard_normal((4, 2))
        npt.assert_allclose(linalg.solve_spd(np.eye(4), b), b, rtol=0, atol=0)

    def test_diagonal(self):
        out = linalg.solve_spd(np.diag([2.0, 4.0]), [[2.0], [8.0]])
        npt.assert_allclose(out, [[1.0], [2.0]])

    def test_against_explicit_inverse(self):
        # oracle: LU-based inverse times b, independent of the Cholesky path
        rng = np.random.default_rng(2)
        for _ in range(10):
            a = random_spd(rng, 8)
            b = rng.standard_normal((8, 3))
            expected = np.linalg.inv(a) @ b
            got = linalg.solve_spd(a, b)
            assert np.linalg.norm(got - expected) <= 1e-9 * np.linalg.norm(expected)

    def test_residual_bound(self):
        rng = np.random.default_rng(3)
        a = random_spd(rng, 12)
        b = rng.standard_normal((12, 4))
        x = linalg.solve_spd(a, b)
        assert np.linalg.norm(a @ x - b) <= 1e-9 * np.linalg.norm(b)

    def test_non_spd_reports_pivot(self):
        a = np.diag([1.0, -1.0, 2.0])
        with pytest.raises(NumericalError, match="pivot 1"):
            linalg.solve_spd(a, np.ones((3, 1)))

    def test_asymmetric_rejected(self):
        a = np.array([[1.0, 2.0], [0.0, 1.0]])
        with pytest.raises(InvalidInputError):
            linalg.solve_spd(a, np.ones((2, 1)))


def augmented_lstsq(h, v):
    """Oracle: solve the stacked system [h; I] d = [v; 0] by orthogonal factorization."""
    d_in = h.shape[1]
    d_out = v.shape[1]
    top = np.vstack([h, np.eye(d_in)])
    bottom = np.vstack([v, np.zeros((d_in, d_out))])
    sol, *_ = np.linalg.lstsq(top, bottom, rcond=None)
    return sol


class TestRidgeSolve:
    def test_zero_h_gives_zero(self):
        out = linalg.ridge_solve(np.zeros((3, 4)), np.ones((3, 2)))
        npt.assert_array_equal(out, np.zeros((4, 2)))

    def test_scalar_closed_form(self):
        out = linalg.ridge_solve([[1.0]], [[2.0]])
        npt.assert_allclose(out, [[1.0]])

    def test_rank_one_sherman_morrison(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            h = rng.standard_normal((1, 10))
            v = rng.standard_normal((1, 6))
            expected = h.T @ v / (1.0 + (h @ h.T).item())
            got = linalg.ridge_solve(h, v)
            assert np.linalg.norm(got - expected) <= 1e-10 * max(
                1.0, np.linalg.norm(expected)
            )

    def test_against_augmented_lstsq(self):
        rng = np.random.default_rng(5)
        h = rng.standard_normal((6, 10))
        v = rng.standard_normal((6, 4))
        expected = augmented_lstsq(h, v)
        got = linalg.ridge_solve(h, v)
        assert np.linalg.norm(got - expected) <= 1e-9 * np.linalg.norm(expected)

    def test_normal_equations_residual(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            m = int(rng.integers(1, 9))
            d_in = int(rng.integers(1, 17))
            d_out = int(rng.integers(1, 9))
            h = rng.standard_normal((m, d_in)) * rng.uniform(0.1, 10.0)
            v = rng.standard_normal((m, d_out))
            d = linalg.ridge_solve(h, v)
            lhs = h.T @ h @ d + d
            rhs = h.T @ v
            assert np.linalg.norm(lhs - rhs) <= 1e-9 * max(1.0, np.linalg.norm(rhs))

    def test_linearity_in_v(self):
        rng = np.random.default_rng(8)
        h = rng.standard_normal((5, 7))
        v = rng.standard_normal((5, 3))
        alpha = 3.7
        a = linalg.ridge_solve(h, alpha * v)
        b = alpha * linalg.ridge_solve(h, v)
        assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(b)

    def test_never_exceeds_unregularized_norm(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            h = rng.standard_normal((6, 9))
            v = rng.standard_normal((6, 2))
            ridge = linalg.ridge_solve(h, v)
            lsq, *_ = np.linalg.lstsq(h, v, rcond=None)
            assert np.isfinite(ridge).all()
            assert np.linalg.norm(ridge) <= np.linalg.norm(lsq) + 1e-12

    def test_row_count_mismatch(self):
        with pytest.raises(InvalidInputError):
            linalg.ridge_solve(np.ones((3, 4)), np.ones((2, 4)))
