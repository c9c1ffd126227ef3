"""End-to-end acceptance checks, one test per criterion.

Each test reports through the ``acceptance`` fixture, which prints a
PASS/FAIL line per criterion at the end of the session.
"""

import time

import numpy as np
import pytest

from kvprefetch.attention import evaluate_selector, full_attention, generate_trace, page_bounds, sparse_attention
from kvprefetch.flops import PRESETS, ModelConfig, StrategyConfig, attn_flops, param_flops
from kvprefetch.pipeline import (
    LatencyModel,
    PipelineConfig,
    filtered_bytes,
    get_scenario,
    min_bandwidth,
    pack_bytes,
    run_live,
    run_pipeline,
    verify_overlap,
)
from kvprefetch.predictor import (
    QueryWindow,
    RegressionConfig,
    normalize_weights,
    predict_assembled,
    predict_single_window,
    solve_ridge_weights,
)
from kvprefetch.selection import AttentionLayout, KvCache, filter_cache, select_tokens

from .oracles import flops_substitution as hand
from .oracles.reference import convex_error, np_softmax, softmax_objective_gd_np, sort_top_k

pytestmark = pytest.mark.acceptance

TABLE_ROW = "qwen3-8b-b8-32k-a100-p6"


def window_of(rows):
    rows = np.asarray(rows, dtype=np.float32)
    w = QueryWindow(len(rows), 1, 1, rows.shape[1])
    for r in rows:
        w.push(r[None, None])
    return w


def test_criterion_1_regression_vs_gradient_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    excess = []
    for i in range(100):
        W = (2, 4, 8, 16)[i % 4]
        D = (16, 64)[(i // 4) % 2]
        q = rng.standard_normal((W, D))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        hist, target = q[:-1], q[-1]
        eps = 1e-2 * np.mean(np.sum(hist * hist, axis=1))
        ours = convex_error(normalize_weights(solve_ridge_weights(hist, target, eps)), hist, target)
        best = convex_error(np_softmax(softmax_objective_gd_np(hist, target, eps)), hist, target)
        excess.append(ours / best - 1)
    excess = np.array(excess)
    bad = int(np.sum(excess > 0.05))
    detail = (f"{bad}/100 instances above +5%; worst {excess.max():+.1%}, "
              f"mean {excess.mean():+.2%}")
    acceptance("1", bad == 0, detail, time.perf_counter() - t0, 10)


def test_criterion_2_prediction_degenerate_cases(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    failures = []
    for W in (2, 4, 8, 16):
        q = rng.standard_normal(32).astype(np.float32)
        w = window_of(np.tile(q, (W, 1)))
        for mode in ("masked-shared", "per-window"):
            cfg = RegressionConfig(window=W, assembly_mode=mode)
            for fn in (predict_single_window, predict_assembled):
                if fn(w, cfg).vectors[0, 0].tobytes() != q.astype(np.float64).tobytes():
                    failures.append(f"constant W={W} {mode} {fn.__name__}")
        rows = rng.standard_normal((W, 32)).astype(np.float32)
        big = RegressionConfig(window=W, epsilon=1e9, epsilon_mode="absolute")
        pred = predict_single_window(window_of(rows), big).vectors[0, 0]
        if np.max(np.abs(pred - rows[1:].astype(np.float64).mean(axis=0))) > 1e-6:
            failures.append(f"eps=1e9 W={W}")
    for _ in range(100):
        rows = rng.standard_normal((2, 32))
        a = predict_assembled(window_of(rows), RegressionConfig(window=2, assembly_mode="masked-shared")).vectors
        b = predict_assembled(window_of(rows), RegressionConfig(window=2, assembly_mode="per-window")).vectors
        if np.max(np.abs(a - b)) > 1e-9:
            failures.append("W=2 modes differ")
            break
    acceptance("2", not failures, "all degenerate cases exact" if not failures else ", ".join(failures),
               time.perf_counter() - t0, 1)


def test_criterion_3_selection_vs_sort_oracle(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = scale_breaks = 0
    for i in range(1000):
        n = int(rng.integers(1, 8193))
        if i % 3 == 0:
            scores = rng.integers(0, 8, n).astype(np.float64)  # heavy ties
        else:
            scores = rng.standard_normal(n)
        C = int(rng.integers(0, n + 1))
        sel = select_tokens(scores, C)
        if sel.tolist() != sort_top_k(scores, C):
            mismatches += 1
        for c in (0.5, 3.0, 1e-3, 7.25):
            if not np.array_equal(select_tokens(scores * c, C), sel):
                scale_breaks += 1
    detail = f"{mismatches} oracle mismatches, {scale_breaks} scale-invariance breaks over 1000 vectors"
    acceptance("3", mismatches == 0 and scale_breaks == 0, detail, time.perf_counter() - t0, 10)


def test_criterion_4_full_selection_lossless(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for g in (1, 4, 32):
        for _ in range(50):
            lay = AttentionLayout(32, 32 // g, 16)
            n = int(rng.integers(1, 257))
            B = int(rng.integers(1, 3))
            cache = KvCache(1, B, lay)
            shape = (B, lay.n_kv_heads, n, 16)
            cache.extend(0, rng.standard_normal(shape), rng.standard_normal(shape))
            q = rng.standard_normal((B, 32, 16))
            diff = sparse_attention(q, filter_cache(q, cache, 0, n)) - full_attention(q, cache, 0)
            worst = max(worst, float(np.max(np.abs(diff))))
    acceptance("4", worst <= 1e-6, f"max |sparse - full| = {worst:.2e}", time.perf_counter() - t0, 10)


@pytest.fixture(scope="module")
def locality_trace():
    # C / N_t = 256 / 2048 = 1/8
    return generate_trace(AttentionLayout(4, 2, 64), steps=500, alpha=0.95, sigma=0.05, seed=0, context=2048)


def test_criterion_5_temporal_locality(acceptance, locality_trace):
    t0 = time.perf_counter()
    dists = (1, 2, 4, 8, 16)
    rep = evaluate_selector(locality_trace, "last", 256, distances=dists)
    means = [rep.mean(d) for d in dists]
    ok = all(a >= b for a, b in zip(means, means[1:])) and means[0] >= 0.40
    detail = "mean O_{t-d,t} " + ", ".join(f"d={d}: {m:.3f}" for d, m in zip(dists, means))
    acceptance("5", ok, detail, time.perf_counter() - t0, 60)


def test_criterion_6_predictor_vs_baselines(acceptance, locality_trace):
    t0 = time.perf_counter()
    ours = evaluate_selector(locality_trace, "assembled", 256, distances=[1]).mean(1)
    last = evaluate_selector(locality_trace, "last", 256, distances=[1]).mean(1)
    rand = evaluate_selector(locality_trace, "random", 256, distances=[1]).mean(1)
    ok = ours >= last - 0.02 and ours >= 3 * rand
    detail = f"assembled {ours:.3f}, last-query {last:.3f}, random {rand:.3f}"
    acceptance("6", ok, detail, time.perf_counter() - t0, 120)


def test_criterion_7a_flops_constants(acceptance):
    t0 = time.perf_counter()
    m = PRESETS["qwen3-8b"]
    p = param_flops(m)
    a = attn_flops(m, StrategyConfig("asyncspade", 32768, 2048))
    ok = p == hand.param == 13_891_534_848 and a == hand.attn_async_c2048 == 1_207_959_552
    acceptance("7a", ok, f"param {p:,}, asyncspade attn {a:,}", time.perf_counter() - t0, 5)


def test_criterion_7b_strategy_ordering(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    violations = {"asyncspade<quest": 0, "quest<tova": 0, "tova<full": 0}
    for _ in range(1000):
        m = PRESETS[str(rng.choice(list(PRESETS)))]
        T = int(rng.integers(2, 131073))
        C = int(rng.integers(1, T))
        P = int(rng.integers(2, 129))
        a, q, t, f = (attn_flops(m, StrategyConfig(k, T, C, P)) for k in ("asyncspade", "quest", "tova", "full"))
        violations["asyncspade<quest"] += not a < q
        violations["quest<tova"] += not q < t
        violations["tova<full"] += not t < f
    ok = not any(violations.values())
    detail = "violations: " + ", ".join(f"{k} {v}" for k, v in violations.items())
    acceptance("7b", ok, detail, time.perf_counter() - t0, 5)


def test_criterion_8_table_row_overlap(acceptance):
    t0 = time.perf_counter()
    row = get_scenario(TABLE_ROW)
    cfg = row.config(steps=64)
    bw = min_bandwidth(cfg)
    assert cfg.latency.bandwidth >= bw
    tl = run_pipeline(cfg)
    m = tl.metrics
    v = verify_overlap(tl, cfg)
    half = row.config(steps=64, bandwidth=0.5 * bw)
    tl_half = run_pipeline(half)
    v_half = verify_overlap(tl_half, half)
    ok = (abs(m["tpot"] - 0.04278) <= 1e-9 * 0.04278 and m["stall_total"] == 0 and v["verdict"]
          and tl_half.metrics["stall_total"] > 0 and v_half["binding"] == "channel")
    detail = (f"TPOT {m['tpot'] * 1e3:.6f} ms, stalls {m['stall_total']:.1e} s, verdict {v['verdict']}; "
              f"half bandwidth: stalls {tl_half.metrics['stall_total'] * 1e3:.2f} ms, binding {v_half['binding']}")
    acceptance("8", ok, detail, time.perf_counter() - t0, 5)


def test_criterion_9_minimal_bandwidth(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(200):
        kv = int(rng.choice([1, 2, 4, 8]))
        layers = int(rng.integers(1, 65))
        divisors = [d for d in range(1, layers + 1) if layers % d == 0]
        model = ModelConfig("r", layers, 4096, kv * int(rng.integers(1, 9)), kv, int(rng.choice([64, 128])), 8192)
        lat = LatencyModel(1.0, float(rng.uniform(0, 1e-4)), float(rng.uniform(1e-3, 2e-2)), 0.0,
                           int(rng.choice([2, 4])))
        cfg = PipelineConfig(model, int(rng.integers(1, 33)), int(rng.integers(0, 65537)),
                             int(rng.integers(1, 4097)), 16, int(rng.choice(divisors)), 17, lat)
        bw = min_bandwidth(cfg)
        for first, last in cfg.packs:
            trip = 2 * lat.launch_overhead + (pack_bytes(cfg, last - first) + filtered_bytes(cfg, last - first)) / bw
            worst = max(worst, abs(trip / cfg.pack_latency(first, last) - 1))
    preset = get_scenario(TABLE_ROW)
    ours = min_bandwidth(preset.config()) / 1e9
    ref = preset.reference_bandwidth_gbps
    rel = (ours - ref) / ref
    ok = worst <= 1e-9 and abs(rel) <= 0.25
    detail = (f"closed-form worst rel. error {worst:.1e}; {TABLE_ROW}: computed {ours:.2f} GB/s "
              f"vs reference {ref:.2f} GB/s ({rel:+.2%})")
    acceptance("9", ok, detail, time.perf_counter() - t0, 5)


def test_criterion_10_live_matches_simulated(acceptance):
    t0 = time.perf_counter()
    model = ModelConfig("tiny", 4, 64, 4, 2, 16, 128)
    lat = LatencyModel(1e12, 0.0, 1e-3, 0.5e-3)
    problems = []
    for seed in range(3):
        cfg = PipelineConfig(model, 2, 64, 16, 8, 2, 100, lat, regression=RegressionConfig(window=8))
        trace = generate_trace(cfg.layout, 100, 0.95, 0.05, seed, batch=2, context=64, n_layers=4)
        sim = run_pipeline(cfg, trace)
        live = run_live(cfg, trace)
        if sim.selections.keys() != live.selections.keys():
            problems.append(f"seed {seed}: different selection keys")
        elif not all(np.array_equal(sim.selections[k], live.selections[k]) for k in sim.selections):
            problems.append(f"seed {seed}: selections differ")
        problems += [f"seed {seed} {mode}: {p}" for mode, tl in (("sim", sim), ("live", live))
                     for p in tl.check_invariants()]
    detail = "identical selections, invariants hold for 3 seeds" if not problems else "; ".join(problems[:3])
    acceptance("10", not problems, detail, time.perf_counter() - t0, 60)


def test_criterion_11_page_bound_soundness(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    violations = 0
    for _ in range(100):
        n = int(rng.integers(1, 1025))
        D = int(rng.choice([16, 64, 128]))
        keys = rng.standard_normal((n, D)) * rng.uniform(0.1, 10)
        q = rng.standard_normal(D)
        bounds = page_bounds(q, keys, 16)
        exact = keys @ q
        for p, b in enumerate(bounds):
            violations += int(np.sum(exact[p * 16:(p + 1) * 16] > b + 1e-9 * (1 + abs(b))))
    acceptance("11", violations == 0, f"{violations} member tokens above their page bound",
               time.perf_counter() - t0, 10)
