"""KV store, token criticality scoring and top-k token filtering.

Shapes used throughout:

* query / predicted query: ``(B, N_q, D_h)``
* stored keys and values: ``(B, N_kv, N_t, D_h)`` float32
* selected indices: ``(B, N_kv, C)`` int64, ascending per row
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import BoundError, ContractError, ShapeError, ValidationError
from .linalg import top_k

__all__ = [
    "AttentionLayout",
    "KvCache",
    "SelectionResult",
    "append_kv",
    "criticality_scores",
    "select_tokens",
    "gather_filtered",
    "filter_cache",
    "overlap_ratio",
]


@dataclass(frozen=True)
class AttentionLayout:
    n_query_heads: int
    n_kv_heads: int
    head_dim: int

    def __post_init__(self):
        if min(self.n_query_heads, self.n_kv_heads, self.head_dim) < 1:
            raise ValidationError("layout dimensions must be positive")
        if self.n_query_heads % self.n_kv_heads:
            raise ValidationError(
                f"query heads ({self.n_query_heads}) not divisible by kv heads ({self.n_kv_heads})"
            )

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads

    @property
    def kind(self) -> str:
        if self.n_kv_heads == self.n_query_heads:
            return "MHA"
        if self.n_kv_heads == 1:
            return "MQA"
        return "GQA"


class KvCache:
    """Append-only per-layer key/value store.

    Storage grows by doubling; ``keys(layer)`` and ``values(layer)`` return
    views of the filled prefix.
    """

    def __init__(self, n_layers: int, batch: int, layout: AttentionLayout, capacity: int = 64):
        self.n_layers = n_layers
        self.batch = batch
        self.layout = layout
        shape = (batch, layout.n_kv_heads, max(capacity, 1), layout.head_dim)
        self._k = [np.zeros(shape, dtype=np.float32) for _ in range(n_layers)]
        self._v = [np.zeros(shape, dtype=np.float32) for _ in range(n_layers)]
        self._n = [0] * n_layers

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.n_layers:
            raise BoundError(f"layer {layer} out of range [0, {self.n_layers})")

    def n_tokens(self, layer: int) -> int:
        self._check_layer(layer)
        return self._n[layer]

    def _reserve(self, layer: int, extra: int) -> None:
        need = self._n[layer] + extra
        cap = self._k[layer].shape[2]
        if need <= cap:
            return
        while cap < need:
            cap *= 2
        for store in (self._k, self._v):
            old = store[layer]
            new = np.zeros(old.shape[:2] + (cap, old.shape[3]), dtype=np.float32)
            new[:, :, : self._n[layer]] = old[:, :, : self._n[layer]]
            store[layer] = new

    def extend(self, layer: int, keys, values) -> None:
        """Append ``T`` tokens at once; ``keys``/``values`` are ``(B, N_kv, T, D)``."""
        self._check_layer(layer)
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        expect = (self.batch, self.layout.n_kv_heads)
        if keys.ndim != 4 or keys.shape[:2] != expect or keys.shape[3] != self.layout.head_dim:
            raise ShapeError(f"key block shape {keys.shape} incompatible with cache {expect + (self.layout.head_dim,)}")
        if values.shape != keys.shape:
            raise ShapeError("keys and values must be appended in matching pairs")
        t = keys.shape[2]
        self._reserve(layer, t)
        n = self._n[layer]
        self._k[layer][:, :, n:n + t] = keys
        self._v[layer][:, :, n:n + t] = values
        self._n[layer] = n + t

    def append(self, layer: int, k, v) -> None:
        k = np.asarray(k, dtype=np.float32)
        v = np.asarray(v, dtype=np.float32)
        if k.ndim != 3 or v.ndim != 3:
            raise ShapeError("per-token keys/values must be (B, N_kv, D)")
        self.extend(layer, k[:, :, None, :], v[:, :, None, :])

    def keys(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        return self._k[layer][:, :, : self._n[layer]]

    def values(self, layer: int) -> np.ndarray:
        self._check_layer(layer)
        return self._v[layer][:, :, : self._n[layer]]


def append_kv(cache: KvCache, layer: int, k, v) -> KvCache:
    cache.append(layer, k, v)
    return cache


@dataclass
class SelectionResult:
    indices: np.ndarray  # (B, N_kv, C)
    keys: np.ndarray  # (B, N_kv, C, D)
    values: np.ndarray
    n_tokens: int
    degraded: bool = False  # requested C exceeded the cache; everything was kept

    @property
    def size(self) -> int:
        return self.indices.shape[-1]


def criticality_scores(q_hat, cache: KvCache, layer: int, layout: AttentionLayout,
                       aggregation: Literal["max", "sum"] = "max") -> np.ndarray:
    """Raw dot-product scores per (batch, kv head, token).

    The ``g`` query heads that share a kv head are scored with one
    ``(g, D) x (D, N_t)`` product and reduced per token by ``aggregation``.
    No softmax and no ``1/sqrt(D)``: only the ranking matters here.
    """
    if cache.layout != layout:
        raise ContractError("layout does not match the cache layout")
    q = np.asarray(getattr(q_hat, "vectors", q_hat), dtype=np.float64)
    B = cache.batch
    if q.shape != (B, layout.n_query_heads, layout.head_dim):
        raise ShapeError(f"prediction shape {q.shape} != {(B, layout.n_query_heads, layout.head_dim)}")
    keys = cache.keys(layer).astype(np.float64)
    grouped = q.reshape(B, layout.n_kv_heads, layout.group_size, layout.head_dim)
    per_head = np.einsum("bkgd,bktd->bkgt", grouped, keys, optimize=False)
    if aggregation == "max":
        return per_head.max(axis=2)
    if aggregation == "sum":
        return per_head.sum(axis=2)
    raise ValidationError(f"unknown aggregation {aggregation!r}")


def select_tokens(scores, C: int, sink_count: int = 0, recent_count: int = 0) -> np.ndarray:
    """Indices of ``C`` tokens for one score vector, ascending.

    The first ``sink_count`` and last ``recent_count`` tokens are always kept;
    the other slots go to the best-scoring remaining tokens.  When ``C``
    exceeds the number of tokens every token is returned.
    """
    scores = np.asarray(scores)
    n = scores.shape[0]
    if sink_count < 0 or recent_count < 0 or C < 0:
        raise ValidationError("counts must be non-negative")
    if C >= n:
        return np.arange(n, dtype=np.int64)
    if sink_count + recent_count > C:
        raise ValidationError("protected tokens exceed the selection budget")
    if sink_count + recent_count == 0:
        return top_k(scores, C)
    lo, hi = sink_count, n - recent_count
    middle = top_k(scores[lo:hi], C - sink_count - recent_count) + lo
    return np.concatenate([np.arange(lo), middle, np.arange(hi, n)]).astype(np.int64)


def _select_rows(scores: np.ndarray, C: int, sink_count: int, recent_count: int) -> np.ndarray:
    B, K, n = scores.shape
    width = min(C, n)
    out = np.empty((B, K, width), dtype=np.int64)
    for b in range(B):
        for k in range(K):
            out[b, k] = select_tokens(scores[b, k], C, sink_count, recent_count)
    return out


def gather_filtered(cache: KvCache, layer: int, indices) -> SelectionResult:
    indices = np.asarray(indices, dtype=np.int64)
    keys, values = cache.keys(layer), cache.values(layer)
    n = keys.shape[2]
    if indices.ndim != 3 or indices.shape[:2] != keys.shape[:2]:
        raise ShapeError(f"indices must be (B, N_kv, C); got {indices.shape}")
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise BoundError(f"token index out of range [0, {n})")
    idx = indices[..., None]
    gk = np.take_along_axis(keys, idx, axis=2)
    gv = np.take_along_axis(values, idx, axis=2)
    return SelectionResult(indices.copy(), gk, gv, n)


def filter_cache(q_hat, cache: KvCache, layer: int, C: int, aggregation: str = "max",
                 sink_count: int = 0, recent_count: int = 0) -> SelectionResult:
    """Score, select and gather in one go for one layer."""
    scores = criticality_scores(q_hat, cache, layer, cache.layout, aggregation)
    idx = _select_rows(scores, C, sink_count, recent_count)
    sel = gather_filtered(cache, layer, idx)
    sel.degraded = C > scores.shape[-1]
    return sel


def _as_index_rows(s) -> np.ndarray:
    return np.asarray(s.indices if isinstance(s, SelectionResult) else s, dtype=np.int64)


def overlap_ratio(a, b) -> float:
    """Shared fraction of two equal-size selections.

    Accepts two 1-D index arrays or two selections of matching shape; in the
    latter case the ratio is averaged over (batch, kv head).
    """
    ia, ib = _as_index_rows(a), _as_index_rows(b)
    if ia.shape != ib.shape:
        raise ContractError(f"selections differ in cardinality: {ia.shape} vs {ib.shape}")
    size = ia.shape[-1]
    if size == 0:
        raise ContractError("empty selection")
    ra = ia.reshape(-1, size)
    rb = ib.reshape(-1, size)
    shared = [np.intersect1d(x, y).size for x, y in zip(ra, rb)]
    return float(np.mean(shared) / size)
