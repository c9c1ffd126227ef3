"""The two-worker pipeline: when does the cache worker stay off the critical path?

    python3 demos/pipeline_overlap.py
"""

from kvprefetch.attention import generate_trace
from kvprefetch.flops import ModelConfig
from kvprefetch.pipeline import (
    LatencyModel,
    PipelineConfig,
    get_scenario,
    min_bandwidth,
    run_live,
    run_pipeline,
    verify_overlap,
)
from kvprefetch.predictor import RegressionConfig

row = get_scenario("qwen3-8b-b8-32k-a100-p6")
cfg = row.config(steps=64)
need = min_bandwidth(cfg)
print(f"{row.name}: {len(cfg.packs)} packs of {row.inference_ms} ms, cache side {row.cache_ms} ms")
print(f"minimal bandwidth {need / 1e9:.2f} GB/s (reference {row.reference_bandwidth_gbps} GB/s)\n")

print(f"{'bandwidth':>16} {'cache ms':>9} {'TPOT ms':>9} {'stall ms':>9}  binding")
for factor, cache_ms in ((2.0, None), (1.0, None), (0.5, None), (2.0, 2 * row.inference_ms)):
    c = row.config(steps=64, bandwidth=factor * need, cache_ms=cache_ms)
    tl = run_pipeline(c)
    v = verify_overlap(tl, c)
    m = tl.metrics
    print(f"{factor:>5.1f} x minimum  {c.latency.cache_latency_per_pack * 1e3:9.2f} {m['tpot'] * 1e3:9.3f} "
          f"{m['stall_total'] * 1e3:9.2f}  {v['binding'] or 'none (fully overlapped)'}")

# reusing the previous selection instead of waiting hides a slow cache worker
slow = row.config(steps=64, cache_ms=2 * row.inference_ms, stall_policy="reuse-previous")
m = run_pipeline(slow).metrics
print(f"\nreuse-previous with a 2x slower cache worker: TPOT {m['tpot'] * 1e3:.3f} ms, "
      f"{m['filtered_reused']} stale selections used")

# the same protocol on two real threads picks the same tokens
tiny = ModelConfig("tiny", 4, 64, 4, 2, 16, 128)
small = PipelineConfig(tiny, 2, 64, 16, 8, 2, 40, LatencyModel(1e12, 0.0, 1e-3, 5e-4),
                       regression=RegressionConfig(window=8))
trace = generate_trace(small.layout, 40, 0.95, 0.05, 0, batch=2, context=64, n_layers=4)
sim, live = run_pipeline(small, trace), run_live(small, trace)
same = all((sim.selections[k] == live.selections[k]).all() for k in sim.selections)
print(f"live threads vs virtual clock: {len(sim.selections)} selections, identical = {same}")
