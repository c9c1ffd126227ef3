"""How much do consecutive decode steps agree on which KV tokens matter?

Generates an AR(1) query trace, measures the overlap of top-C token sets
between steps t-d and t, then compares next-query predictors against the
"reuse the last query" baseline and a random selection.

    python3 demos/locality_and_prediction.py
"""

from kvprefetch.attention import evaluate_selector, generate_trace
from kvprefetch.selection import AttentionLayout

layout = AttentionLayout(n_query_heads=4, n_kv_heads=2, head_dim=64)
trace = generate_trace(layout, steps=300, alpha=0.95, sigma=0.05, seed=0, context=2048)
C = 256  # one eighth of the prefix

print("overlap of the top-C set at step t-d with the one at step t")
rep = evaluate_selector(trace, "last", C, distances=[1, 2, 4, 8, 16])
for d, m in rep.summary().items():
    print(f"  d={d:<2d}  {m:.3f}  " + "#" * int(40 * m))

print("\nselecting for step t with information up to t-1")
for name in ("oracle", "last", "assembled", "single", "page:16", "random"):
    dist = [0] if name == "oracle" else [1]
    m = evaluate_selector(trace, name, C, distances=dist).mean(dist[0])
    print(f"  {name:>10}  {m:.3f}")

# The trace is a Markov chain, so the newest query is already the best guess
# for the next one; the regression predictors average older queries in and
# land between the last-query and random baselines.
