"""Next-query prediction from a sliding window of recent query states.

The current query is regressed onto its predecessors with ridge regression,
the solution is softmax-normalised, and the weights are then applied to the
window shifted forward by one token to extrapolate the query of the next
decoding step.  The assembled variant repeats this for every suffix length
and averages the candidates.

All regression arithmetic is float64; windows store float32.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InsufficientHistoryError, ShapeError, ValidationError
from .linalg import softmax, solve_spd

__all__ = [
    "QueryWindow",
    "RegressionConfig",
    "PredictedQuery",
    "push_query",
    "solve_ridge_weights",
    "normalize_weights",
    "reconstruction_error",
    "fit_softmax_weights_gd",
    "predict_single_window",
    "predict_assembled",
    "predict_next",
]

Sign = Literal["positive", "negated"]


@dataclass(frozen=True)
class RegressionConfig:
    window: int = 16
    epsilon: float = 1e-2
    epsilon_mode: Literal["absolute", "relative"] = "relative"
    weight_sign: Sign = "positive"
    assembly_mode: Literal["masked-shared", "per-window"] = "masked-shared"

    def __post_init__(self):
        if self.window < 1:
            raise ValidationError("window must be >= 1")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.epsilon_mode not in ("absolute", "relative"):
            raise ValidationError(f"unknown epsilon_mode {self.epsilon_mode!r}")
        if self.weight_sign not in ("positive", "negated"):
            raise ValidationError(f"unknown weight_sign {self.weight_sign!r}")
        if self.assembly_mode not in ("masked-shared", "per-window"):
            raise ValidationError(f"unknown assembly_mode {self.assembly_mode!r}")

    def resolve_epsilon(self, gram: np.ndarray) -> float:
        """Turn the configured value into the ridge term for a given Gram matrix.

        In relative mode the value is a factor on the mean Gram diagonal.
        """
        if self.epsilon_mode == "absolute":
            return float(self.epsilon)
        eps = float(self.epsilon * np.mean(np.diag(gram)))
        # an all-zero window still needs a positive ridge term
        return eps if eps > 0 else float(self.epsilon)


@dataclass
class PredictedQuery:
    """Predicted next query, shape ``(B, H, D)`` float64."""

    vectors: np.ndarray
    provenance: Literal["assembled", "single-window", "passthrough"]


class QueryWindow:
    """Ring of the ``capacity`` most recent queries for every (batch, head).

    ``data()`` returns the entries oldest first as ``(B, H, n, D)`` float32.
    """

    def __init__(self, capacity: int, batch: int, heads: int, dim: int):
        if capacity < 1:
            raise ValidationError("window capacity must be >= 1")
        self.capacity = capacity
        self.shape = (batch, heads, dim)
        self._buf = np.zeros((batch, heads, capacity, dim), dtype=np.float32)
        self._len = 0

    def __len__(self) -> int:
        return self._len

    def push(self, q) -> None:
        q = np.asarray(q, dtype=np.float32)
        if q.shape != self.shape:
            raise ShapeError(f"query shape {q.shape} != window shape {self.shape}")
        if self._len < self.capacity:
            self._buf[:, :, self._len] = q
            self._len += 1
        else:
            self._buf[:, :, :-1] = self._buf[:, :, 1:].copy()
            self._buf[:, :, -1] = q

    def data(self) -> np.ndarray:
        return self._buf[:, :, : self._len]

    def newest(self) -> np.ndarray:
        if self._len == 0:
            raise InsufficientHistoryError("window is empty")
        return self._buf[:, :, self._len - 1]

    def copy(self) -> "QueryWindow":
        out = QueryWindow(self.capacity, *self.shape)
        out._buf = self._buf.copy()
        out._len = self._len
        return out


def push_query(window: QueryWindow, q) -> QueryWindow:
    window.push(q)
    return window


def solve_ridge_weights(history, target, eps: float) -> np.ndarray:
    """Raw ridge weights regressing ``target`` onto the rows of ``history``.

    Solves ``(X X^T + eps I) w = X y`` with ``X`` of shape ``(k, D)``.
    """
    x = np.asarray(history, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeError("history must be a non-empty (k, D) matrix")
    if y.shape != (x.shape[1],):
        raise ShapeError(f"target shape {y.shape} does not match history dim {x.shape[1]}")
    if not eps > 0:
        raise ValidationError("ridge epsilon must be positive")
    gram = x @ x.T + eps * np.eye(x.shape[0])
    rhs = x @ y
    return solve_spd(gram, rhs)


def normalize_weights(raw, sign: Sign = "positive") -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if sign == "negated":
        raw = -raw
    elif sign != "positive":
        raise ValidationError(f"unknown sign {sign!r}")
    return softmax(raw)


def reconstruction_error(weights, history, target) -> float:
    """Squared error of the convex reconstruction ``weights @ history`` of ``target``."""
    x = np.asarray(history, dtype=np.float64)
    r = np.asarray(weights, dtype=np.float64) @ x - np.asarray(target, dtype=np.float64)
    return float(r @ r)


def fit_softmax_weights_gd(history, target, eps: float, iters: int = 500, step: float = 1e-2,
                           bound: float = 50.0) -> np.ndarray:
    """Minimise the softmax-inside objective directly by projected gradient descent.

    Objective: ``|softmax(w) @ X - y|^2 + eps |w|^2``; iterates are clipped to
    ``[-bound, bound]``.  Returns the raw (pre-softmax) weights.  This is the
    reference the closed-form ridge route is measured against.
    """
    x = np.asarray(history, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    w = np.zeros(x.shape[0])
    for _ in range(iters):
        p = softmax(w)
        r = p @ x - y
        g_p = 2.0 * (x @ r)
        # softmax Jacobian: diag(p) - p p^T
        grad = p * (g_p - p @ g_p) + 2.0 * eps * w
        w = np.clip(w - step * grad, -bound, bound)
    return w


def _window_array(window) -> np.ndarray:
    if isinstance(window, QueryWindow):
        return window.data()
    return np.asarray(window)


def _eps_for(cfg: RegressionConfig, hist: np.ndarray) -> float:
    if cfg.epsilon_mode == "absolute":
        return float(cfg.epsilon)
    return cfg.resolve_epsilon(hist @ hist.T)


def _single(seq: np.ndarray, cfg: RegressionConfig) -> np.ndarray:
    # seq: (n, D) float64, oldest first, n >= 2
    hist, cur = seq[:-1], seq[-1]
    raw = solve_ridge_weights(hist, cur, _eps_for(cfg, hist))
    w = normalize_weights(raw, cfg.weight_sign)
    return _shifted_sum(w, seq)


def _shifted_sum(w: np.ndarray, seq: np.ndarray) -> np.ndarray:
    """Weights applied to the window advanced by one token.

    Summed as offsets from the newest query: the weights sum to one only up to
    rounding, and this keeps a constant window exact.
    """
    anchor = seq[-1]
    return anchor + w @ (seq[1:] - anchor)


def _per_window(seq: np.ndarray, cfg: RegressionConfig) -> np.ndarray:
    n = seq.shape[0]
    cands = np.array([_single(seq[n - 1 - k:], cfg) for k in range(1, n)])
    return seq[-1] + np.mean(cands - seq[-1], axis=0)


def _masked_shared(seq: np.ndarray, cfg: RegressionConfig) -> np.ndarray:
    hist, cur = seq[:-1], seq[-1]
    m = hist.shape[0]
    raw = solve_ridge_weights(hist, cur, _eps_for(cfg, hist))
    if cfg.weight_sign == "negated":
        raw = -raw
    # row k (1-based) keeps the k weights of the most recent history entries
    rows = np.broadcast_to(raw, (m, m))
    mask = np.arange(m)[None, :] >= (m - 1 - np.arange(m))[:, None]
    wmat = softmax(rows, mask)
    cands = _shifted_sum(wmat, seq)
    return seq[-1] + np.mean(cands - seq[-1], axis=0)


def _predict(window, cfg: RegressionConfig, fn, label) -> PredictedQuery:
    arr = _window_array(window)
    if arr.ndim != 4:
        raise ShapeError("window data must be (B, H, n, D)")
    n = arr.shape[2]
    if n < 2:
        raise InsufficientHistoryError(f"need at least 2 queries in the window, have {n}")
    seqs = arr.astype(np.float64)
    B, H, _, D = seqs.shape
    out = np.empty((B, H, D))
    for b in range(B):
        for h in range(H):
            out[b, h] = fn(seqs[b, h], cfg)
    return PredictedQuery(out, label)


def predict_single_window(window, cfg: RegressionConfig = RegressionConfig()) -> PredictedQuery:
    return _predict(window, cfg, _single, "single-window")


def predict_assembled(window, cfg: RegressionConfig = RegressionConfig()) -> PredictedQuery:
    fn = _masked_shared if cfg.assembly_mode == "masked-shared" else _per_window
    return _predict(window, cfg, fn, "assembled")


def predict_next(window, cfg: RegressionConfig = RegressionConfig(), assembled: bool = True) -> PredictedQuery:
    """Prediction with warm-up handling: fewer than two queries pass the latest through."""
    arr = _window_array(window)
    if arr.shape[2] == 0:
        raise InsufficientHistoryError("window is empty")
    if arr.shape[2] < 2:
        return PredictedQuery(arr[:, :, -1].astype(np.float64), "passthrough")
    if assembled:
        return predict_assembled(arr, cfg)
    return predict_single_window(arr, cfg)
