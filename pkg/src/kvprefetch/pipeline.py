"""Two-worker decode pipeline: an inference worker and a cache worker.

The inference worker runs the forward pass pack by pack (a pack is a run of
consecutive layers) and ships each pack's query/key/value states to the
cache worker.  The cache worker appends the KV, updates the query window,
predicts the next query, selects the top-``C`` tokens and ships the filtered
KV back so that it is waiting when the same pack runs at the next step.

Two executions of the same protocol are provided:

* :func:`run_pipeline` -- single-threaded, virtual clock driven by a
  :class:`LatencyModel`; bit-reproducible.
* :func:`run_live` -- two real threads joined by two FIFO queues, wall-clock
  timestamps, real (small-scale) attention and selection.

Both build the cache worker's selections with :class:`CacheWorker`, so their
selections are identical for the same trace and config.

Timeline conventions: ``rank`` is ``inference``, ``cache`` or ``channel``;
channel ``send`` events carry inference->cache traffic and channel
``receive`` events carry cache->inference traffic.  The bulk initialisation
transfer is a channel ``send`` with ``pack = -1``.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np

from .attention import DecodeTrace, full_attention, sparse_attention
from .errors import InfeasibleError, KvPrefetchError, ValidationError
from .flops import ModelConfig, get_preset
from .predictor import QueryWindow, RegressionConfig, predict_next
from .selection import AttentionLayout, KvCache, SelectionResult, filter_cache

__all__ = [
    "LatencyModel",
    "PipelineConfig",
    "PackUnit",
    "FilteredPack",
    "Event",
    "PipelineTimeline",
    "CacheWorker",
    "PipelineWorkerError",
    "ScenarioPreset",
    "SCENARIOS",
    "get_scenario",
    "pack_ranges",
    "pack_bytes",
    "filtered_bytes",
    "init_bytes",
    "min_bandwidth",
    "run_pipeline",
    "run_live",
    "verify_overlap",
]

StallPolicy = Literal["wait", "reuse-previous"]
INDEX_BYTES = 4


@dataclass(frozen=True)
class LatencyModel:
    """Timing parameters; seconds and bytes per second."""

    bandwidth: float
    launch_overhead: float = 0.0
    inference_latency_per_pack: float = 0.0
    cache_latency_per_pack: float = 0.0
    element_width: int = 4

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValidationError("bandwidth must be positive")
        if min(self.launch_overhead, self.inference_latency_per_pack, self.cache_latency_per_pack) < 0:
            raise ValidationError("latencies must be non-negative")
        if self.element_width < 1:
            raise ValidationError("element width must be >= 1 byte")

    def transfer_time(self, nbytes: int) -> float:
        return self.launch_overhead + nbytes / self.bandwidth


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig
    batch: int
    context: int
    selected: int
    threshold: int
    pack_size: int
    steps: int
    latency: LatencyModel
    stall_policy: StallPolicy = "wait"
    regression: RegressionConfig = RegressionConfig()
    aggregation: Literal["max", "sum"] = "max"
    layout: AttentionLayout | None = None

    def __post_init__(self):
        m = self.model
        derived = AttentionLayout(m.q_heads, m.kv_heads, m.head_dim)
        if self.layout is None:
            object.__setattr__(self, "layout", derived)
        elif self.layout != derived:
            raise ValidationError(f"layout {self.layout} does not match model {m.name}")
        if self.batch < 1 or self.selected < 1 or self.context < 0:
            raise ValidationError("batch and selected must be positive, context non-negative")
        if not 1 <= self.pack_size <= m.layers:
            raise ValidationError(f"pack size must lie in [1, {m.layers}]")
        if self.threshold < self.regression.window:
            raise ValidationError(
                f"threshold {self.threshold} is below the query window {self.regression.window}"
            )
        if self.steps <= self.threshold:
            raise ValidationError("steps must exceed the sparse-mode threshold")
        if self.stall_policy not in ("wait", "reuse-previous"):
            raise ValidationError(f"unknown stall policy {self.stall_policy!r}")

    @property
    def packs(self) -> list[tuple[int, int]]:
        return pack_ranges(self.model.layers, self.pack_size)

    def pack_latency(self, first: int, last: int) -> float:
        return self.latency.inference_latency_per_pack * (last - first) / self.pack_size

    def cache_latency(self, first: int, last: int) -> float:
        return self.latency.cache_latency_per_pack * (last - first) / self.pack_size

    @property
    def ideal_tpot(self) -> float:
        return self.model.layers / self.pack_size * self.latency.inference_latency_per_pack


def pack_ranges(n_layers: int, pack_size: int) -> list[tuple[int, int]]:
    """``[first, last)`` layer ranges; the last pack may be short."""
    return [(a, min(a + pack_size, n_layers)) for a in range(0, n_layers, pack_size)]


def pack_bytes(cfg: PipelineConfig, n_layers: int) -> int:
    lay = cfg.layout
    return n_layers * cfg.batch * (lay.n_query_heads + 2 * lay.n_kv_heads) * lay.head_dim * cfg.latency.element_width


def filtered_bytes(cfg: PipelineConfig, n_layers: int) -> int:
    lay = cfg.layout
    rows = n_layers * cfg.batch * lay.n_kv_heads * cfg.selected
    return rows * 2 * lay.head_dim * cfg.latency.element_width + rows * INDEX_BYTES


def init_bytes(cfg: PipelineConfig) -> int:
    """Whole cache up to the threshold step plus the last ``W`` queries, all layers."""
    lay, ew, l = cfg.layout, cfg.latency.element_width, cfg.model.layers
    tokens = cfg.context + cfg.threshold
    kv = l * cfg.batch * lay.n_kv_heads * tokens * 2 * lay.head_dim * ew
    qs = l * cfg.batch * lay.n_query_heads * cfg.regression.window * lay.head_dim * ew
    return kv + qs


def min_bandwidth(cfg: PipelineConfig) -> float:
    """Smallest bandwidth at which one pack's round trip fits in its compute time.

    Per pack: ``2 * launch + (pack_bytes + filtered_bytes) / bw <= pack latency``.
    """
    lat = cfg.latency
    best = 0.0
    for first, last in cfg.packs:
        payload = pack_bytes(cfg, last - first) + filtered_bytes(cfg, last - first)
        budget = cfg.pack_latency(first, last) - 2 * lat.launch_overhead
        if budget <= 0:
            raise InfeasibleError(
                f"launch overhead {lat.launch_overhead:g}s leaves no time inside a "
                f"{cfg.pack_latency(first, last):g}s pack; no bandwidth can hide communication"
            )
        best = max(best, payload / budget)
    return best


# -- messages ---------------------------------------------------------------

@dataclass
class PackUnit:
    step: int
    layers: tuple[int, int]
    queries: list[np.ndarray] = field(default_factory=list)  # per layer (B, Nq, D)
    keys: list[np.ndarray] = field(default_factory=list)  # per layer (B, Nkv, D)
    values: list[np.ndarray] = field(default_factory=list)
    nbytes: int = 0


@dataclass
class InitBundle:
    step: int
    keys: list[np.ndarray]  # per layer (B, Nkv, T, D)
    values: list[np.ndarray]
    queries: list[np.ndarray]  # per layer (B, Nq, W, D), oldest first
    nbytes: int = 0


@dataclass
class FilteredPack:
    step: int  # the decode step whose attention this pack serves
    layers: tuple[int, int]
    built_from: int  # newest decode step whose states went into the selection
    selections: list[SelectionResult] = field(default_factory=list)
    nbytes: int = 0


class _Stop:
    pass


class _Failure:
    def __init__(self, exc: BaseException):
        self.exc = exc


class CacheWorker:
    """Cache-side state: full KV cache plus per-layer query windows.

    Only ever fed through :meth:`handle`; it never looks at the trace.
    """

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        lay = cfg.layout
        self.cache = KvCache(cfg.model.layers, cfg.batch, lay, capacity=cfg.context + cfg.steps + 1)
        self.windows = [QueryWindow(cfg.regression.window, cfg.batch, lay.n_query_heads, lay.head_dim)
                        for _ in range(cfg.model.layers)]
        self.selections: dict[tuple[int, int], np.ndarray] = {}
        self.units_processed = 0

    def _filter(self, layer: int, target_step: int) -> SelectionResult:
        cfg = self.cfg
        q_hat = predict_next(self.windows[layer], cfg.regression)
        sel = filter_cache(q_hat, self.cache, layer, cfg.selected, cfg.aggregation)
        self.selections[(target_step, layer)] = sel.indices
        return sel

    def _filtered_pack(self, step: int, layers: tuple[int, int]) -> FilteredPack:
        sels = [self._filter(layer, step + 1) for layer in range(*layers)]
        return FilteredPack(step + 1, layers, step, sels, filtered_bytes(self.cfg, layers[1] - layers[0]))

    def handle(self, msg) -> list[FilteredPack]:
        if isinstance(msg, InitBundle):
            for layer in range(self.cfg.model.layers):
                self.cache.extend(layer, msg.keys[layer], msg.values[layer])
                for i in range(msg.queries[layer].shape[2]):
                    self.windows[layer].push(msg.queries[layer][:, :, i])
            return [self._filtered_pack(msg.step, rng) for rng in self.cfg.packs]
        if isinstance(msg, PackUnit):
            for i, layer in enumerate(range(*msg.layers)):
                self.cache.append(layer, msg.keys[i], msg.values[i])
                self.windows[layer].push(msg.queries[i])
            self.units_processed += 1
            return [self._filtered_pack(msg.step, msg.layers)]
        raise TypeError(f"cache worker got unexpected message {type(msg).__name__}")


def _make_init(cfg: PipelineConfig, trace: DecodeTrace | None) -> InitBundle:
    step = cfg.threshold - 1
    if trace is None:
        return InitBundle(step, [], [], [], init_bytes(cfg))
    end = trace.context + step + 1
    W = cfg.regression.window
    return InitBundle(
        step,
        [trace.keys[l][:, :, :end] for l in range(trace.n_layers)],
        [trace.values[l][:, :, :end] for l in range(trace.n_layers)],
        [trace.queries[l][:, :, step - W + 1:step + 1] for l in range(trace.n_layers)],
        init_bytes(cfg),
    )


def _make_unit(cfg: PipelineConfig, trace: DecodeTrace | None, step: int, layers) -> PackUnit:
    unit = PackUnit(step, layers, nbytes=pack_bytes(cfg, layers[1] - layers[0]))
    if trace is not None:
        for layer in range(*layers):
            k, v = trace.kv(layer, step)
            unit.queries.append(trace.query(layer, step))
            unit.keys.append(k)
            unit.values.append(v)
    return unit


def _check_trace(cfg: PipelineConfig, trace: DecodeTrace) -> None:
    if trace.layout != cfg.layout:
        raise ValidationError(f"trace layout {trace.layout} != pipeline layout {cfg.layout}")
    if trace.n_layers != cfg.model.layers or trace.batch != cfg.batch:
        raise ValidationError("trace layers/batch do not match the pipeline config")
    if trace.context != cfg.context:
        raise ValidationError(f"trace context {trace.context} != configured context {cfg.context}")
    if trace.steps < cfg.steps:
        raise ValidationError(f"trace has {trace.steps} steps, config needs {cfg.steps}")


# -- timeline ---------------------------------------------------------------

@dataclass
class Event:
    rank: str
    kind: str
    step: int
    pack: int
    t_start: float
    t_end: float


@dataclass
class Consumption:
    step: int
    pack: int
    source_step: int  # target step of the filtered pack actually used
    built_from: int


@dataclass
class PipelineTimeline:
    threshold: int
    n_packs: int
    events: list[Event] = field(default_factory=list)
    consumptions: list[Consumption] = field(default_factory=list)
    selections: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    step_end: dict[int, float] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)
    messages_per_step: dict[int, int] = field(default_factory=dict)
    mode: str = "simulated"

    def add(self, rank, kind, step, pack, t0, t1) -> None:
        self.events.append(Event(rank, kind, step, pack, float(t0), float(t1)))

    def _measured_steps(self) -> list[int]:
        # the first sparse step absorbs the bulk initialisation and is reported apart
        return sorted(s for s in self.step_end if s > self.threshold and s - 1 in self.step_end)

    def step_durations(self) -> dict[int, float]:
        return {s: self.step_end[s] - self.step_end[s - 1] for s in self._measured_steps()}

    def stall_time(self, steps=None) -> float:
        keep = set(self._measured_steps()) if steps is None else set(steps)
        return float(sum(e.t_end - e.t_start for e in self.events if e.kind == "stall" and e.step in keep))

    @property
    def metrics(self) -> dict:
        durs = list(self.step_durations().values())
        total = float(sum(durs))
        stall = self.stall_time()
        return {
            "tpot": total / len(durs) if durs else float("nan"),
            "tpot_last": durs[-1] if durs else float("nan"),
            "stall_total": stall,
            "init_stall": self.stall_time([self.threshold]),
            "overlap_fraction": 1.0 - stall / total if total > 0 else 1.0,
            "measured_steps": len(durs),
            **self.counters,
        }

    def to_json(self, path=None) -> str:
        def r9(x):
            return round(x, 9)

        doc = {
            "version": 1,
            "mode": self.mode,
            "events": [{**asdict(e), "t_start": r9(e.t_start), "t_end": r9(e.t_end)} for e in self.events],
            "metrics": {k: (r9(v) if isinstance(v, float) else v) for k, v in self.metrics.items()},
        }
        text = json.dumps(doc, indent=1)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def check_invariants(self) -> list[str]:
        """Causality, rank exclusivity, FIFO order and conservation; returns violations."""
        problems = []
        for c in self.consumptions:
            if c.built_from >= c.step:
                problems.append(f"step {c.step} pack {c.pack} used states from step {c.built_from}")
        tol = 1e-12 if self.mode == "simulated" else 0.0
        for rank in ("inference", "cache"):
            evs = sorted((e for e in self.events if e.rank == rank), key=lambda e: (e.t_start, e.t_end))
            for a, b in zip(evs, evs[1:]):
                if b.t_start < a.t_end - tol:
                    problems.append(f"{rank} events overlap: {a} / {b}")
        for kind in ("send", "receive"):
            evs = [e for e in self.events if e.rank == "channel" and e.kind == kind]
            for a, b in zip(evs, evs[1:]):
                if (b.step, b.pack) < (a.step, a.pack) or b.t_start < a.t_end - tol:
                    problems.append(f"channel {kind} out of FIFO order: {a} / {b}")
        c = self.counters
        if c.get("units_sent") != c.get("units_processed"):
            problems.append(f"sent {c.get('units_sent')} pack units, processed {c.get('units_processed')}")
        if c.get("queue_depth_end", 0):
            problems.append(f"{c['queue_depth_end']} messages left in queues")
        return problems


# -- simulated execution ----------------------------------------------------

def run_pipeline(cfg: PipelineConfig, trace: DecodeTrace | None = None) -> PipelineTimeline:
    """Virtual-clock run of the protocol; ``trace=None`` models timing only."""
    if trace is not None:
        _check_trace(cfg, trace)
    lat = cfg.latency
    packs = cfg.packs
    tl = PipelineTimeline(cfg.threshold, len(packs))
    worker = CacheWorker(cfg) if trace is not None else None
    theta = cfg.threshold

    inf_free = up_free = cache_free = down_free = 0.0
    arrival: dict[tuple[int, int], float] = {}
    built: dict[tuple[int, int], int] = {}
    last_used: dict[int, int] = {}
    units_sent = units_processed = filtered_sent = consumed = reused = 0

    def cache_side(step: int, p: int, first: int, last: int, ready: float, msg) -> None:
        nonlocal cache_free, down_free, filtered_sent
        c0 = max(ready, cache_free)
        cache_free = c0 + cfg.cache_latency(first, last)
        tl.add("cache", "compute", step, p, c0, cache_free)
        d0 = max(cache_free, down_free)
        down_free = d0 + lat.transfer_time(filtered_bytes(cfg, last - first))
        tl.add("channel", "receive", step + 1, p, d0, down_free)
        arrival[(step + 1, p)] = down_free
        built[(step + 1, p)] = step
        filtered_sent += 1
        if msg is not None:
            tl.messages_per_step[step] = tl.messages_per_step.get(step, 0) + 1

    for step in range(cfg.steps):
        for p, (first, last) in enumerate(packs):
            start = inf_free
            if step >= theta:
                key = (step, p)
                due = arrival[key]
                if due > start and cfg.stall_policy == "reuse-previous" and p in last_used:
                    source = last_used[p]
                    reused += 1
                else:
                    if due > start:
                        tl.add("inference", "stall", step, p, start, due)
                        start = due
                    source = step
                    consumed += 1
                last_used[p] = source
                tl.consumptions.append(Consumption(step, p, source, built[(source, p)]))
            inf_free = start + cfg.pack_latency(first, last)
            tl.add("inference", "compute", step, p, start, inf_free)
            if step >= theta:
                unit = _make_unit(cfg, trace, step, (first, last))
                u0 = max(inf_free, up_free)
                up_free = u0 + lat.transfer_time(unit.nbytes)
                tl.add("channel", "send", step, p, u0, up_free)
                units_sent += 1
                tl.messages_per_step[step] = tl.messages_per_step.get(step, 0) + 1
                if worker is not None:
                    worker.handle(unit)
                units_processed += 1
                cache_side(step, p, first, last, up_free, unit)
        tl.step_end[step] = inf_free
        if step == theta - 1:
            init = _make_init(cfg, trace)
            u0 = max(inf_free, up_free)
            up_free = u0 + lat.transfer_time(init.nbytes)
            tl.add("channel", "send", step, -1, u0, up_free)
            if worker is not None:
                worker.handle(init)
            for p, (first, last) in enumerate(packs):
                cache_side(step, p, first, last, up_free, None)

    if worker is not None:
        tl.selections = dict(worker.selections)
    tl.counters = {
        "units_sent": units_sent,
        "units_processed": units_processed,
        "filtered_sent": filtered_sent,
        "filtered_consumed": consumed,
        "filtered_reused": reused,
        "filtered_discarded": filtered_sent - consumed,
        "queue_depth_end": 0,
    }
    return tl


# -- live execution ---------------------------------------------------------

class PipelineWorkerError(KvPrefetchError, RuntimeError):
    """A worker failed; ``timeline`` holds everything recorded up to the failure."""

    def __init__(self, message: str, timeline: PipelineTimeline):
        super().__init__(message)
        self.timeline = timeline


def run_live(cfg: PipelineConfig, trace: DecodeTrace, timeout: float = 120.0,
             _fail_at: tuple[int, int] | None = None) -> PipelineTimeline:
    """Run the protocol on two threads with real queues and real compute.

    The calling thread plays the inference worker; a second thread plays the
    cache worker.  ``_fail_at=(step, pack)`` makes the cache worker raise on
    that message (used to exercise failure propagation).
    """
    _check_trace(cfg, trace)
    packs = cfg.packs
    theta = cfg.threshold
    tl = PipelineTimeline(theta, len(packs), mode="live")
    lock = threading.Lock()
    up: queue.Queue = queue.Queue()
    down: queue.Queue = queue.Queue()
    clock0 = time.perf_counter()

    def now() -> float:
        return time.perf_counter() - clock0

    def record(*args) -> None:
        with lock:
            tl.add(*args)

    worker = CacheWorker(cfg)

    def cache_loop() -> None:
        try:
            while True:
                msg = up.get()
                if isinstance(msg, _Stop):
                    return
                if _fail_at is not None and isinstance(msg, PackUnit) and (msg.step, msg.layers[0] // cfg.pack_size) == _fail_at:
                    raise RuntimeError(f"injected cache worker failure at {_fail_at}")
                t0 = now()
                out = worker.handle(msg)
                t1 = now()
                pack_id = -1 if isinstance(msg, InitBundle) else msg.layers[0] // cfg.pack_size
                record("cache", "compute", msg.step, pack_id, t0, t1)
                for fp in out:
                    record("channel", "receive", fp.step, fp.layers[0] // cfg.pack_size, t1, t1)
                    down.put(fp)
        except BaseException as exc:  # noqa: BLE001 - forwarded to the inference side
            down.put(_Failure(exc))

    thread = threading.Thread(target=cache_loop, name="cache-worker", daemon=True)
    thread.start()

    arrived: dict[tuple[int, int], FilteredPack] = {}
    previous: dict[int, FilteredPack] = {}
    units_sent = consumed = reused = discarded = 0
    deadline = time.monotonic() + timeout

    def receive(block: bool) -> bool:
        try:
            msg = down.get(block=block, timeout=max(deadline - time.monotonic(), 0.001) if block else None)
        except queue.Empty:
            if block:
                raise PipelineWorkerError("timed out waiting for the cache worker", tl)
            return False
        if isinstance(msg, _Failure):
            raise PipelineWorkerError(f"cache worker failed: {msg.exc!r}", tl) from msg.exc
        arrived[(msg.step, msg.layers[0] // cfg.pack_size)] = msg
        return True

    try:
        for step in range(cfg.steps):
            for p, (first, last) in enumerate(packs):
                fp = None
                if step >= theta:
                    while receive(block=False):
                        pass
                    key = (step, p)
                    if key not in arrived and cfg.stall_policy == "reuse-previous" and p in previous:
                        fp = previous[p]
                        reused += 1
                    else:
                        t0 = now()
                        while key not in arrived:
                            receive(block=True)
                        t1 = now()
                        if t1 > t0:
                            record("inference", "stall", step, p, t0, t1)
                        fp = arrived.pop(key)
                        consumed += 1
                    # drop packs that were overtaken by the one in use
                    for stale in [k for k in arrived if k[1] == p and k[0] <= fp.step]:
                        arrived.pop(stale)
                        discarded += 1
                    previous[p] = fp
                    tl.consumptions.append(Consumption(step, p, fp.step, fp.built_from))
                t0 = now()
                _inference_compute(cfg, trace, step, first, last, fp)
                t1 = now()
                record("inference", "compute", step, p, t0, t1)
                if step >= theta:
                    unit = _make_unit(cfg, trace, step, (first, last))
                    record("channel", "send", step, p, t1, t1)
                    up.put(unit)
                    units_sent += 1
                    tl.messages_per_step[step] = tl.messages_per_step.get(step, 0) + 2
            tl.step_end[step] = now()
            if step == theta - 1:
                t = now()
                record("channel", "send", step, -1, t, t)
                up.put(_make_init(cfg, trace))
        # the last step's filtered packs target a step that never runs
        pending = len(packs)
        while sum(1 for k in arrived if k[0] == cfg.steps) < pending:
            receive(block=True)
        discarded += len(arrived)
        arrived.clear()
    finally:
        up.put(_Stop())
        thread.join(timeout=max(deadline - time.monotonic(), 1.0))

    tl.selections = dict(worker.selections)
    tl.counters = {
        "units_sent": units_sent,
        "units_processed": worker.units_processed,
        "filtered_sent": _filtered_count(tl),
        "filtered_consumed": consumed,
        "filtered_reused": reused,
        "filtered_discarded": discarded,
        "queue_depth_end": up.qsize() + down.qsize(),
    }
    return tl


def _filtered_count(tl: PipelineTimeline) -> int:
    return sum(1 for e in tl.events if e.rank == "channel" and e.kind == "receive")


def _inference_compute(cfg: PipelineConfig, trace: DecodeTrace, step: int, first: int, last: int,
                       fp: FilteredPack | None) -> None:
    for i, layer in enumerate(range(first, last)):
        q = trace.query(layer, step).astype(np.float64)
        if fp is None:
            end = trace.context + step + 1
            cache = KvCache(1, cfg.batch, cfg.layout, capacity=end)
            cache.extend(0, trace.keys[layer][:, :, :end], trace.values[layer][:, :, :end])
            full_attention(q, cache, 0)
        else:
            sel = fp.selections[i]
            k_new, v_new = trace.kv(layer, step)
            merged = SelectionResult(
                sel.indices,
                np.concatenate([sel.keys, k_new[:, :, None]], axis=2),
                np.concatenate([sel.values, v_new[:, :, None]], axis=2),
                sel.n_tokens + 1,
            )
            sparse_attention(q, merged)


# -- verdicts and presets ---------------------------------------------------

def verify_overlap(timeline: PipelineTimeline, cfg: PipelineConfig) -> dict:
    """Is the measured TPOT the compute-only optimum with no stalls?

    Returns a record with ``verdict`` and, when false, the ``binding``
    constraint: ``channel`` (round trip slower than a pack), ``cache-compute``
    (cache work slower than a pack) or ``other``.
    """
    m = timeline.metrics
    ideal = cfg.ideal_tpot
    tpot = m["tpot"]
    on_target = abs(tpot - ideal) <= 1e-9 * max(ideal, 1e-300)
    verdict = m["stall_total"] == 0 and on_target
    lat = cfg.latency
    channel_ratio = cache_ratio = 0.0
    for first, last in cfg.packs:
        budget = cfg.pack_latency(first, last)
        trip = 2 * lat.launch_overhead + (pack_bytes(cfg, last - first) + filtered_bytes(cfg, last - first)) / lat.bandwidth
        ratio = trip / budget if budget > 0 else float("inf")
        channel_ratio = max(channel_ratio, ratio)
        cache_ratio = max(cache_ratio, cfg.cache_latency(first, last) / budget if budget > 0 else float("inf"))
    binding = None
    if not verdict:
        if channel_ratio > 1 and channel_ratio >= cache_ratio:
            binding = "channel"
        elif cache_ratio > 1:
            binding = "cache-compute"
        else:
            binding = "other"
    return {
        "verdict": verdict,
        "binding": binding,
        "tpot": tpot,
        "ideal_tpot": ideal,
        "stall_total": m["stall_total"],
        "channel_ratio": channel_ratio,
        "cache_ratio": cache_ratio,
    }


@dataclass(frozen=True)
class ScenarioPreset:
    """One measured configuration: per-pack latencies and the published minimal bandwidth."""

    name: str
    model: str
    batch: int
    context: int
    selected: int
    device: str
    pack_size: int
    inference_ms: float
    cache_ms: float
    reference_bandwidth_gbps: float

    @property
    def device_bandwidth(self) -> float:
        return DEVICE_BANDWIDTH[self.device]

    def config(self, steps: int = 64, threshold: int = 16, bandwidth: float | None = None,
               launch_overhead: float = 0.0, element_width: int = 4,
               stall_policy: StallPolicy = "wait", cache_ms: float | None = None,
               regression: RegressionConfig = RegressionConfig()) -> PipelineConfig:
        lat = LatencyModel(
            bandwidth=self.device_bandwidth if bandwidth is None else bandwidth,
            launch_overhead=launch_overhead,
            inference_latency_per_pack=self.inference_ms * 1e-3,
            cache_latency_per_pack=(self.cache_ms if cache_ms is None else cache_ms) * 1e-3,
            element_width=element_width,
        )
        return PipelineConfig(get_preset(self.model), self.batch, self.context, self.selected,
                              threshold, self.pack_size, steps, lat, stall_policy, regression)


# inter-GPU bandwidth of the two measured nodes, bytes/s
DEVICE_BANDWIDTH = {"a100": 250e9, "h100": 350e9}

_ROWS = [
    # model, batch, context, selected, device, pack, inference ms, cache ms, GB/s
    ("qwen3-8b", 8, 32768, 2048, "a100", 6, 7.13, 6.42, 107.71),
    ("qwen3-8b", 8, 32768, 2048, "a100", 12, 14.26, 12.75, 107.71),
    ("qwen3-8b", 8, 32768, 2048, "h100", 6, 5.47, 3.92, 140.40),
    ("qwen3-8b", 8, 32768, 2048, "h100", 12, 10.94, 7.85, 140.40),
    ("qwen3-8b", 16, 16384, 1024, "a100", 6, 7.30, 7.02, 105.20),
    ("qwen3-8b", 16, 16384, 1024, "a100", 12, 14.60, 14.43, 105.20),
    ("qwen3-8b", 16, 16384, 1024, "h100", 6, 5.91, 5.18, 129.94),
    ("qwen3-8b", 16, 16384, 1024, "h100", 12, 11.82, 11.14, 129.94),
    ("qwen3-32b", 8, 32768, 2048, "a100", 4, 6.30, 5.16, 159.49),
    ("qwen3-32b", 8, 32768, 2048, "a100", 8, 12.60, 8.32, 159.49),
    ("qwen3-32b", 8, 32768, 2048, "h100", 4, 4.39, 3.74, 228.88),
    ("qwen3-32b", 8, 32768, 2048, "h100", 8, 8.78, 7.48, 228.88),
    ("qwen3-32b", 16, 16384, 1024, "a100", 4, 7.77, 7.02, 129.32),
    ("qwen3-32b", 16, 16384, 1024, "a100", 8, 15.54, 14.01, 129.32),
    ("qwen3-32b", 16, 16384, 1024, "h100", 4, 4.37, 3.72, 229.93),
    ("qwen3-32b", 16, 16384, 1024, "h100", 8, 8.74, 7.48, 229.93),
]


def _preset_name(model, batch, context, device, pack) -> str:
    return f"{model}-b{batch}-{context // 1024}k-{device}-p{pack}"


SCENARIOS: dict[str, ScenarioPreset] = {
    _preset_name(m, b, t, d, p): ScenarioPreset(_preset_name(m, b, t, d, p), m, b, t, c, d, p, inf, cache, bw)
    for m, b, t, c, d, p, inf, cache, bw in _ROWS
}


def get_scenario(name: str) -> ScenarioPreset:
    try:
        return SCENARIOS[name]
    except KeyError:
        raise ValidationError(f"unknown scenario {name!r}; available: {', '.join(SCENARIOS)}") from None
