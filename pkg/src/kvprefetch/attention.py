"""Decode-step attention, synthetic traces and selection-quality evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ContractError, InsufficientHistoryError, ShapeError, ValidationError
from .linalg import softmax, top_k
from .predictor import (
    RegressionConfig,
    normalize_weights,
    predict_assembled,
    predict_single_window,
    solve_ridge_weights,
)
from .selection import AttentionLayout, KvCache, SelectionResult

__all__ = [
    "full_attention",
    "sparse_attention",
    "DecodeTrace",
    "generate_trace",
    "Selector",
    "parse_selector",
    "OverlapReport",
    "evaluate_selector",
    "page_bounds",
    "page_select_indices",
    "page_level_select",
]


def _attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray, return_weights=False):
    # q (B, Nq, D); keys/values (B, Nkv, T, D)
    B, nq, D = q.shape
    nkv = keys.shape[1]
    g = nq // nkv
    qg = q.reshape(B, nkv, g, D).astype(np.float64)
    k = keys.astype(np.float64)
    v = values.astype(np.float64)
    logits = np.einsum("bkgd,bktd->bkgt", qg, k, optimize=False) / np.sqrt(D)
    w = softmax(logits)
    out = np.einsum("bkgt,bktd->bkgd", w, v, optimize=False).reshape(B, nq, D)
    if return_weights:
        return out, w.reshape(B, nq, -1)
    return out


def _check_query(q, layout: AttentionLayout, batch: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (batch, layout.n_query_heads, layout.head_dim):
        raise ShapeError(f"query shape {q.shape} != {(batch, layout.n_query_heads, layout.head_dim)}")
    return q


def full_attention(q, cache: KvCache, layer: int, return_weights: bool = False):
    """Scaled dot-product attention of one decode step over the whole layer cache.

    ``q`` is ``(B, N_q, D)``; returns ``(B, N_q, D)`` float64 (and the
    ``(B, N_q, N_t)`` weights when asked).
    """
    if cache.n_tokens(layer) == 0:
        raise ContractError("attention over an empty cache")
    q = _check_query(q, cache.layout, cache.batch)
    return _attend(q, cache.keys(layer), cache.values(layer), return_weights)


def sparse_attention(q, sel: SelectionResult, return_weights: bool = False):
    if sel.size == 0:
        raise ContractError("attention over an empty selection")
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 3 or q.shape[0] != sel.keys.shape[0] or q.shape[1] % sel.keys.shape[1]:
        raise ShapeError(f"query shape {q.shape} incompatible with selection {sel.keys.shape}")
    return _attend(q, sel.keys, sel.values, return_weights)


@dataclass
class DecodeTrace:
    """Per-layer query/key/value streams of a decode run.

    ``queries[l]`` is ``(B, N_q, steps, D)``; ``keys[l]`` and ``values[l]``
    are ``(B, N_kv, context + steps, D)``, where the first ``context`` tokens
    stand for the prompt/prefix and token ``context + t`` belongs to decode
    step ``t``.
    """

    layout: AttentionLayout
    queries: list[np.ndarray]
    keys: list[np.ndarray]
    values: list[np.ndarray]
    context: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.queries) == len(self.keys) == len(self.values)) or not self.queries:
            raise ShapeError("queries, keys and values need one entry per layer")
        q0 = self.queries[0]
        B, _, steps, D = q0.shape
        for q, k, v in zip(self.queries, self.keys, self.values):
            if q.shape != (B, self.layout.n_query_heads, steps, D) or D != self.layout.head_dim:
                raise ShapeError(f"query stream shape {q.shape} does not match layout {self.layout}")
            if k.shape != (B, self.layout.n_kv_heads, self.context + steps, D) or v.shape != k.shape:
                raise ShapeError(f"key/value stream shape {k.shape} inconsistent with context {self.context}")

    @property
    def n_layers(self) -> int:
        return len(self.queries)

    @property
    def batch(self) -> int:
        return self.queries[0].shape[0]

    @property
    def steps(self) -> int:
        return self.queries[0].shape[2]

    def query(self, layer: int, step: int) -> np.ndarray:
        return self.queries[layer][:, :, step]

    def kv(self, layer: int, step: int):
        pos = self.context + step
        return self.keys[layer][:, :, pos], self.values[layer][:, :, pos]

    def __eq__(self, other):
        if not isinstance(other, DecodeTrace):
            return NotImplemented
        same = lambda xs, ys: all(np.array_equal(x, y) for x, y in zip(xs, ys))
        return (self.layout == other.layout and self.context == other.context
                and self.n_layers == other.n_layers and same(self.queries, other.queries)
                and same(self.keys, other.keys) and same(self.values, other.values))


def generate_trace(layout: AttentionLayout, steps: int, alpha: float, sigma: float, seed: int,
                   batch: int = 1, context: int = 0, n_layers: int = 1) -> DecodeTrace:
    """AR(1) query streams with i.i.d. Gaussian keys and values.

    ``q_t = alpha * q_{t-1} + sigma * xi_t`` with ``q_0`` standard normal.
    """
    if steps < 1 or batch < 1 or n_layers < 1 or context < 0:
        raise ValidationError("steps, batch and n_layers must be positive, context non-negative")
    if not 0 <= alpha < 1:
        raise ValidationError("alpha must lie in [0, 1)")
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    D = layout.head_dim
    queries, keys, values = [], [], []
    for _ in range(n_layers):
        noise = rng.standard_normal((batch, layout.n_query_heads, steps, D))
        q = np.empty_like(noise)
        q[:, :, 0] = noise[:, :, 0]
        for t in range(1, steps):
            q[:, :, t] = alpha * q[:, :, t - 1] + sigma * noise[:, :, t]
        kv_shape = (batch, layout.n_kv_heads, context + steps, D)
        queries.append(q.astype(np.float32))
        keys.append(rng.standard_normal(kv_shape).astype(np.float32))
        values.append(rng.standard_normal(kv_shape).astype(np.float32))
    meta = {"seed": seed, "alpha": alpha, "sigma": sigma, "source": "synthetic"}
    return DecodeTrace(layout, queries, keys, values, context, meta)


def page_bounds(q, keys, page_size: int) -> np.ndarray:
    """Upper bound of ``q . k`` over each page of consecutive keys.

    ``q`` is ``(D,)`` or ``(g, D)``; ``keys`` is ``(N, D)``.  Per page the bound
    is ``sum_d max(q_d * max_k_d, q_d * min_k_d)``; the last page may be short.
    """
    keys = np.asarray(keys, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    n = keys.shape[0]
    if page_size < 1:
        raise ValidationError("page size must be >= 1")
    starts = np.arange(0, n, page_size)
    kmax = np.maximum.reduceat(keys, starts, axis=0)
    kmin = np.minimum.reduceat(keys, starts, axis=0)
    if q.ndim == 1:
        return np.maximum(kmax * q, kmin * q).sum(axis=-1)
    return np.maximum(kmax[None] * q[:, None], kmin[None] * q[:, None]).sum(axis=-1)


def page_select_indices(q, keys, C: int, page_size: int) -> np.ndarray:
    """Token indices of the ``C // page_size`` pages with the largest bound.

    With several query heads (``q`` of shape ``(g, D)``) the per-head bounds
    are reduced by max.
    """
    n = np.asarray(keys).shape[0]
    bounds = page_bounds(q, keys, page_size)
    if bounds.ndim == 2:
        bounds = bounds.max(axis=0)
    n_pages = min(C // page_size, bounds.shape[0])
    pages = top_k(bounds, n_pages)
    idx = (pages[:, None] * page_size + np.arange(page_size)[None, :]).ravel()
    return idx[idx < n].astype(np.int64)


def page_level_select(q, cache: KvCache, layer: int, C: int, page_size: int) -> SelectionResult:
    """Page-granular selection for every (batch, kv head).

    ``C`` is rounded down to a multiple of ``page_size``.  Rows must end up
    with equal length, so a short last page is only allowed when it is
    selected in every row or in none.
    """
    layout = cache.layout
    q = _check_query(q, layout, cache.batch)
    keys, values = cache.keys(layer), cache.values(layer)
    g = layout.group_size
    rows = []
    for b in range(cache.batch):
        for k in range(layout.n_kv_heads):
            rows.append(page_select_indices(q[b, k * g:(k + 1) * g], keys[b, k], C, page_size))
    if len({r.size for r in rows}) != 1:
        raise ContractError("short last page selected in some rows only; use a page-aligned cache")
    idx = np.stack(rows).reshape(cache.batch, layout.n_kv_heads, -1)
    gk = np.take_along_axis(keys, idx[..., None], axis=2)
    gv = np.take_along_axis(values, idx[..., None], axis=2)
    return SelectionResult(idx, gk, gv, keys.shape[2])


@dataclass(frozen=True)
class Selector:
    """A selection strategy under evaluation.

    kinds: ``oracle``, ``last``, ``single``, ``assembled``, ``reconstructed``,
    ``page`` (with ``page_size``) and ``random`` (with ``seed``).
    """

    kind: str
    page_size: int = 16
    seed: int = 0

    KINDS = ("oracle", "last", "single", "assembled", "reconstructed", "page", "random")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValidationError(f"unknown selector {self.kind!r}; choose from {', '.join(self.KINDS)}")
        if self.page_size < 1:
            raise ValidationError("page size must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "page":
            return f"page:{self.page_size}"
        if self.kind == "random":
            return f"random:{self.seed}"
        return self.kind


def parse_selector(text: str) -> Selector:
    """``"page:16"``, ``"random:3"``, ``"assembled"`` ... -> Selector."""
    name, _, arg = text.strip().partition(":")
    if name == "page":
        return Selector("page", page_size=int(arg or 16))
    if name == "random":
        return Selector("random", seed=int(arg or 0))
    if arg:
        raise ValidationError(f"selector {name!r} takes no argument")
    return Selector(name)


@dataclass
class OverlapReport:
    selector: str
    C: int
    n_tokens: int
    rows: list[tuple[int, int, float]]  # (step, distance, overlap averaged over heads)

    def mean(self, distance: int) -> float:
        vals = [o for _, d, o in self.rows if d == distance]
        if not vals:
            raise KeyError(distance)
        return float(np.mean(vals))

    def summary(self) -> dict[int, float]:
        return {d: self.mean(d) for d in sorted({d for _, d, _ in self.rows})}

    def series(self, distance: int) -> np.ndarray:
        return np.array([o for _, d, o in self.rows if d == distance])


def _mask_rows(idx_rows: np.ndarray, n: int) -> np.ndarray:
    m = np.zeros((idx_rows.shape[0], n), dtype=bool)
    np.put_along_axis(m, idx_rows, True, axis=1)
    return m


def evaluate_selector(trace: DecodeTrace, selector: Selector | str, C: int,
                      distances: Iterable[int] = (1,), layer: int = 0,
                      cfg: RegressionConfig = RegressionConfig(),
                      n_tokens: int | None = None) -> OverlapReport:
    """Overlap of a selector's choice with the true query's top-``C`` set.

    For target step ``t`` and distance ``d`` the selector may only use the
    queries up to step ``t - d``; its set is compared with the top-``C``
    tokens of the true ``q_t``.  ``last`` at distance ``d`` is therefore the
    locality curve ``O_{t-d,t}``, and ``single``/``assembled`` at ``d = 1``
    measure next-query prediction.  ``reconstructed`` regresses ``q_t`` from
    its predecessors and applies the weights to those same predecessors
    (no shift); it is reported at distance 0 only.

    Scoring is per query head against the first ``n_tokens`` keys of its kv
    head (default: the trace prefix, or all keys when there is none), and
    overlaps are averaged over batch and heads.
    """
    if isinstance(selector, str):
        selector = parse_selector(selector)
    distances = sorted(set(int(d) for d in distances))
    if any(d < 0 for d in distances):
        raise ValidationError("distances must be non-negative")
    layout = trace.layout
    if n_tokens is None:
        n_tokens = trace.context or trace.keys[layer].shape[2]
    if not 0 < C <= n_tokens:
        raise ValidationError(f"C={C} must lie in (0, {n_tokens}]")
    W = cfg.window
    kind = selector.kind
    predictive = kind in ("single", "assembled", "reconstructed")
    if kind == "reconstructed":
        distances = [0]
    elif predictive:
        distances = [d for d in distances if d >= 1]
        if not distances:
            raise ValidationError("predictive selectors need a distance >= 1")
    start = max(distances) + (W if predictive else 0)
    steps = trace.steps
    if start >= steps:
        raise InsufficientHistoryError(f"trace has {steps} steps; need more than {start}")

    B, nq = trace.batch, layout.n_query_heads
    g = layout.group_size
    Q = trace.queries[layer].astype(np.float64)  # (B, nq, steps, D)
    K = trace.keys[layer][:, :, :n_tokens].astype(np.float64)  # (B, nkv, N, D)
    K_per_q = np.repeat(K, g, axis=1)  # (B, nq, N, D)

    def select(vectors: np.ndarray) -> np.ndarray:
        # vectors (B, nq, D) -> index rows (B*nq, C)
        scores = np.einsum("bhd,bhnd->bhn", vectors, K_per_q, optimize=False).reshape(B * nq, -1)
        return np.stack([top_k(s, C) for s in scores])

    true_sel = {}

    def truth(t: int) -> np.ndarray:
        if t not in true_sel:
            true_sel[t] = _mask_rows(select(Q[:, :, t]), n_tokens)
        return true_sel[t]

    rng = np.random.default_rng(selector.seed)
    rows = []
    for t in range(start, steps):
        ref = truth(t)
        for d in distances:
            src = t - d
            if kind == "oracle":
                idx = select(Q[:, :, t])
            elif kind == "last":
                idx = select(Q[:, :, src])
            elif kind == "random":
                idx = np.stack([np.sort(rng.choice(n_tokens, C, replace=False)) for _ in range(B * nq)])
            elif kind == "page":
                idx = np.stack([
                    page_select_indices(Q[b, h, src], K_per_q[b, h], C, selector.page_size)
                    for b in range(B) for h in range(nq)
                ])
            elif kind == "reconstructed":
                idx = select(_reconstruct(Q[:, :, t - W + 1:t + 1], cfg))
            else:
                win = Q[:, :, src - W + 1:src + 1]
                fn = predict_assembled if kind == "assembled" else predict_single_window
                idx = select(fn(win, cfg).vectors)
            shared = np.take_along_axis(ref, idx, axis=1).sum(axis=1)
            rows.append((t, d, float(np.mean(shared / idx.shape[1]))))
    return OverlapReport(selector.label, C, n_tokens, rows)


def _reconstruct(win: np.ndarray, cfg: RegressionConfig) -> np.ndarray:
    # unshifted reconstruction of the newest entry from the others
    B, H, _, D = win.shape
    out = np.empty((B, H, D))
    for b in range(B):
        for h in range(H):
            hist, cur = win[b, h, :-1], win[b, h, -1]
            eps = cfg.resolve_epsilon(hist @ hist.T) if cfg.epsilon_mode == "relative" else cfg.epsilon
            w = normalize_weights(solve_ridge_weights(hist, cur, eps), cfg.weight_sign)
            out[b, h] = w @ hist
    return out
