"""Token scoring under grouped heads, top-k gather, and what sparsity costs.

    python3 demos/selection_and_attention.py
"""

import numpy as np

from kvprefetch.attention import full_attention, page_level_select, sparse_attention
from kvprefetch.selection import AttentionLayout, KvCache, criticality_scores, filter_cache, overlap_ratio

rng = np.random.default_rng(0)
layout = AttentionLayout(n_query_heads=8, n_kv_heads=2, head_dim=32)
n = 1024
cache = KvCache(n_layers=1, batch=1, layout=layout)
shape = (1, layout.n_kv_heads, n, layout.head_dim)
cache.extend(0, rng.standard_normal(shape), rng.standard_normal(shape))
q = rng.standard_normal((1, layout.n_query_heads, layout.head_dim))

print(f"{layout.kind}: {layout.group_size} query heads share each kv head")
scores = criticality_scores(q, cache, 0, layout, "max")
print("score tensor (batch, kv head, token):", scores.shape)

full = full_attention(q, cache, 0)
print("\n   C   max |sparse - full|   overlap(max vs sum aggregation)")
for C in (16, 64, 256, 1024):
    sel_max = filter_cache(q, cache, 0, C, "max")
    sel_sum = filter_cache(q, cache, 0, C, "sum")
    err = np.max(np.abs(sparse_attention(q, sel_max) - full))
    print(f"{C:5d}   {err:.3e}             {overlap_ratio(sel_max, sel_sum):.3f}")

# page-granular selection scores each 16-token page by an upper bound
pages = page_level_select(q, cache, 0, 256, page_size=16)
tokens = filter_cache(q, cache, 0, 256)
print(f"\npage-level vs token-level top-256 overlap: {overlap_ratio(pages, tokens):.3f}")
