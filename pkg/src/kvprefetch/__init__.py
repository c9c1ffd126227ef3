"""Asynchronous KV-cache prefetching for sparse decoding.

Next-query prediction by ridge regression over a sliding query window,
token-level KV selection, decoding FLOPs accounting, and a two-worker
(inference / cache) pipeline model with simulated and live execution.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .linalg import matmul, softmax, solve_spd, top_k
from .predictor import (
    PredictedQuery,
    QueryWindow,
    RegressionConfig,
    normalize_weights,
    predict_assembled,
    predict_next,
    predict_single_window,
    push_query,
    solve_ridge_weights,
)
from .selection import (
    AttentionLayout,
    KvCache,
    SelectionResult,
    append_kv,
    criticality_scores,
    filter_cache,
    gather_filtered,
    overlap_ratio,
    select_tokens,
)
from .attention import (
    DecodeTrace,
    Selector,
    evaluate_selector,
    full_attention,
    generate_trace,
    page_level_select,
    sparse_attention,
)
from .flops import PRESETS, ModelConfig, StrategyConfig, attn_flops, param_flops, total_flops
from .pipeline import (
    SCENARIOS,
    LatencyModel,
    PipelineConfig,
    PipelineTimeline,
    min_bandwidth,
    run_live,
    run_pipeline,
    verify_overlap,
)
