"""Small dense numerical core.

Tensors are plain ``numpy.float64`` arrays. The helpers here add the strict
shape checks the solvers rely on (no implicit broadcasting) and a pivoted LU
solve that reports singular systems explicitly instead of returning garbage.
"""

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix is singular to working precision."""


def as_tensor(a):
    """Return ``a`` as a float64 array (copy only when needed)."""
    return np.asarray(a, dtype=np.float64)


def check_same_shape(a, b, what="operands"):
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {a.shape} vs {b.shape}")


def matmul(a, b):
    """Matrix product of two 2-d arrays with an explicit conformance check."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, got ndim {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def l2_norm(v):
    """Euclidean norm over every element of ``v``."""
    v = as_tensor(v)
    with np.errstate(over="ignore"):
        sq = float(np.sum(v * v))
    if sq < np.inf:
        return float(np.sqrt(sq))
    # squares overflowed: rescale by the largest magnitude first
    scale = float(np.max(np.abs(v)))
    if not scale < np.inf:
        return scale
    return scale * float(np.sqrt(np.sum((v / scale) ** 2)))


def lu_factor(A):
    """LU factorization with partial pivoting.

    Returns ``(LU, piv)`` where ``LU`` packs the unit-lower and upper factors
    and ``piv[i]`` is the original row placed at position ``i``.
    """
    A = as_tensor(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got {A.shape}")
    n = A.shape[0]
    LU = A.copy()
    piv = np.arange(n)
    scale = np.max(np.abs(LU)) if n else 0.0
    # pivots below this are treated as exact zeros
    thresh = n * np.finfo(np.float64).eps * scale
    for j in range(n):
        p = j + int(np.argmax(np.abs(LU[j:, j])))
        if not np.isfinite(LU[p, j]) or abs(LU[p, j]) <= thresh or scale == 0.0:
            raise SingularMatrixError(f"matrix is singular to working precision (column {j})")
        if p != j:
            LU[[j, p]] = LU[[p, j]]
            piv[[j, p]] = piv[[p, j]]
        LU[j + 1:, j] /= LU[j, j]
        LU[j + 1:, j + 1:] -= np.outer(LU[j + 1:, j], LU[j, j + 1:])
    return LU, piv


def lu_solve(factors, rhs):
    LU, piv = factors
    y = as_tensor(rhs)[piv].copy()
    n = LU.shape[0]
    for i in range(1, n):
        y[i] -= LU[i, :i] @ y[:i]
    for i in range(n - 1, -1, -1):
        y[i] = (y[i] - LU[i, i + 1:] @ y[i + 1:]) / LU[i, i]
    return y


def solve_dense(A, rhs):
    """Solve ``A y = rhs`` for square ``A`` by pivoted LU.

    Raises :class:`SingularMatrixError` when ``A`` is singular to working
    precision and :class:`ShapeError` on nonconforming inputs.
    """
    A = as_tensor(A)
    rhs = as_tensor(rhs)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"expected a square matrix, got {A.shape}")
    if rhs.shape != (A.shape[0],):
        raise ShapeError(f"rhs of shape {rhs.shape} does not match matrix {A.shape}")
    return lu_solve(lu_factor(A), rhs)
