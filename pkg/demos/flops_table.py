"""Per-token decoding FLOPs of each strategy for the bundled model presets.

    python3 demos/flops_table.py
"""

from kvprefetch.flops import PRESETS, flops_table

T, C, P = 32768, 2048, 16
print(f"context {T}, selected {C}, page {P}\n")
print(f"{'model':<11} {'strategy':<11} {'attn GFLOPs':>12} {'total GFLOPs':>13}")
for name, model in PRESETS.items():
    for row in flops_table(model, T, C, P):
        print(f"{name:<11} {row['strategy']:<11} {row['attn'] / 1e9:12.2f} {row['total'] / 1e9:13.2f}")
    print()

# TOVA scores the whole context and then attends to C tokens; once C passes
# T/2 that costs more than plain full attention.
m = PRESETS["qwen3-8b"]
for C in (4096, 16384, 20000):
    rows = {r["strategy"]: r["attn"] for r in flops_table(m, T, C, P)}
    print(f"C={C:<6d} tova/full attention = {rows['tova'] / rows['full']:.3f}")
