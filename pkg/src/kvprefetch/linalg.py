"""Small dense kernels: products, SPD solves, masked softmax and top-k.

Arrays are plain numpy. A "dense matrix" is a 2-D float64 array; a 4-D state
tensor is a C-contiguous float32 array of shape ``(B, H, T, D)`` whose flat
index for ``(b, h, t, d)`` is ``((b * H + h) * T + t) * D + d``.

``matmul`` goes through ``np.einsum`` without path optimisation, which keeps
numpy's own fixed loop order instead of dispatching to BLAS, so results are
bit-reproducible from run to run.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import BoundError, EmptySupportError, NotPositiveDefiniteError, ShapeError

__all__ = [
    "as_dense",
    "as_tensor4",
    "flat_index",
    "matmul",
    "solve_spd",
    "softmax",
    "top_k",
]


def as_dense(a, dtype=np.float64) -> np.ndarray:
    """Validate and convert ``a`` into a finite 2-D array."""
    arr = np.array(a, dtype=dtype, copy=True, ndmin=2)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf")
    return arr


def as_tensor4(a) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=np.float32)
    if arr.ndim != 4:
        raise ShapeError(f"expected (B, H, T, D), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def flat_index(dims: tuple[int, int, int, int], b: int, h: int, t: int, d: int) -> int:
    _, H, T, D = dims
    return ((b * H + h) * T + t) * D + d


def matmul(a, b, transpose_b: bool = False) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    inner_b = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner_b:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape} (transpose_b={transpose_b})")
    spec = "ik,jk->ij" if transpose_b else "ik,kj->ij"
    return np.einsum(spec, a, b, optimize=False)


def solve_spd(g, b) -> np.ndarray:
    """Solve ``g @ x = b`` for symmetric positive definite ``g`` via Cholesky.

    ``b`` may be a vector or a matrix of right-hand sides; the result has the
    same shape as ``b``.
    """
    g = np.asarray(g, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"solve_spd needs a square matrix, got {g.shape}")
    if b.shape[0] != g.shape[0]:
        raise ShapeError(f"rhs rows {b.shape[0]} != system size {g.shape[0]}")
    scale = max(float(np.max(np.abs(g))), 1.0)
    if np.max(np.abs(g - g.T)) > 1e-9 * scale:
        raise ShapeError("matrix is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(g, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(
            "Cholesky hit a non-positive pivot; regularisation too small or input corrupted"
        ) from exc
    x = scipy.linalg.cho_solve(factor, b, check_finite=False)
    # ill-conditioned ridge systems (tiny eps, collinear rows) need refinement
    # with an extended-precision residual to meet an absolute residual bound
    g_ext, b_ext = g.astype(np.longdouble), b.astype(np.longdouble)
    for _ in range(2):
        r = (b_ext - g_ext @ x.astype(np.longdouble)).astype(np.float64)
        x = x + scipy.linalg.cho_solve(factor, r, check_finite=False)
    return x


def softmax(v, mask=None) -> np.ndarray:
    """Softmax along the last axis; ``mask`` marks the entries that take part.

    Masked-out entries come back as exact zeros.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input must be finite")
    if mask is None:
        shifted = v - np.max(v, axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=-1, keepdims=True)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
    if not np.all(np.any(mask, axis=-1)):
        raise EmptySupportError("softmax over an all-masked row")
    z = np.where(mask, v, -np.inf)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, returned in ascending order.

    Equal scores are resolved in favour of the larger index.
    """
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError("top_k expects a 1-D score vector")
    n = scores.shape[0]
    if k < 0 or k > n:
        raise BoundError(f"k={k} outside [0, {n}]")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    if k == n:
        return np.arange(n, dtype=np.int64)
    idx = np.arange(n)
    # primary key: score descending, secondary: index descending
    order = np.lexsort((-idx, -scores.astype(np.float64)))
    return np.sort(order[:k]).astype(np.int64)
