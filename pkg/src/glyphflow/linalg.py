"""Deterministic dense linear algebra for the closed-form edit solve.

Matrices are 2-D numpy arrays in row-major (C) order. Everything here runs
in double precision with a fixed accumulation order so repeated runs are
bit-identical; sizes stay small (a few thousand entries), so no BLAS-level
performance is needed.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, NumericalError


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return np.ascontiguousarray(a)


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed left-to-right accumulation over the inner axis."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(
            f"inner dimensions differ: {a.shape} x {b.shape}"
        )
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def cholesky_lower(a: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor of a symmetric positive definite matrix.

    Raises NumericalError naming the failing pivot index when the input is
    not positive definite.
    """
    a = _as_matrix(a, "a")
    n, m = a.shape
    if n != m:
        raise InvalidInputError(f"matrix must be square, got {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise InvalidInputError("matrix must be symmetric")
    lower = np.zeros_like(a)
    for j in range(n):
        pivot = a[j, j] - np.dot(lower[j, :j], lower[j, :j])
        if pivot <= 0.0 or not np.isfinite(pivot):
            raise NumericalError(f"matrix is not positive definite at pivot {j}")
        lower[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            lower[j + 1 :, j] = (
                a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]
            ) / lower[j, j]
    return lower


def solve_spd(a, b) -> np.ndarray:
    """Solve a @ x = b for symmetric positive definite `a` via Cholesky."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[0] != b.shape[0]:
        raise InvalidInputError(
            f"row counts differ: a is {a.shape}, b is {b.shape}"
        )
    lower = cholesky_lower(a)
    n = a.shape[0]
    # forward substitution: lower @ y = b
    y = np.zeros_like(b)
    for i in range(n):
        y[i] = (b[i] - lower[i, :i] @ y[:i]) / lower[i, i]
    # back substitution: lower.T @ x = y
    x = np.zeros_like(b)
    for i in range(n - 1, -1, -1):
        x[i] = (y[i] - lower[i + 1 :, i] @ x[i + 1 :]) / lower[i, i]
    if not np.all(np.isfinite(x)):
        raise NumericalError("solve produced non-finite values")
    return x


def ridge_solve(h, v) -> np.ndarray:
    """Minimizer of ||h @ d - v||^2 + ||d||^2, i.e. (h'h + I)^-1 h'v.

    `h` is (m, d_in), `v` is (m, d_out); the result is (d_in, d_out). The
    unit regularizer makes the normal-equation matrix SPD for any h.
    """
    h = _as_matrix(h, "h")
    v = _as_matrix(v, "v")
    if h.shape[0] != v.shape[0]:
        raise InvalidInputError(
            f"h and v must have the same row count: {h.shape} vs {v.shape}"
        )
    if h.shape[0] < 1:
        raise InvalidInputError("at least one row is required")
    gram = matmul(h.T, h)
    gram[np.diag_indices_from(gram)] += 1.0
    rhs = matmul(h.T, v)
    out = solve_spd(gram, rhs)
    if not np.all(np.isfinite(out)):
        raise NumericalError("ridge solve produced non-finite values")
    return out
