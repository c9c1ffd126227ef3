"""Per-token decoding FLOPs for dense, TOVA, Quest and predicted-selection decoding.

Counts follow the 2-FLOPs-per-multiply-accumulate convention and are exact
Python integers.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError

STRATEGIES = ("full", "tova", "quest", "asyncspade")


@dataclass(frozen=True)
class ModelConfig:
    name: str
    layers: int
    hidden: int
    q_heads: int
    kv_heads: int
    head_dim: int
    intermediate: int

    def __post_init__(self):
        dims = (self.layers, self.hidden, self.q_heads, self.kv_heads, self.head_dim, self.intermediate)
        if min(dims) < 1:
            raise ValidationError(f"{self.name}: all dimensions must be positive")
        if self.q_heads % self.kv_heads:
            raise ValidationError(f"{self.name}: q_heads not divisible by kv_heads")


# head_dim is 128 for every Qwen3 dense model; hidden != q_heads * head_dim for 32B
PRESETS: dict[str, ModelConfig] = {
    "qwen3-1.7b": ModelConfig("qwen3-1.7b", 28, 2048, 16, 8, 128, 6144),
    "qwen3-4b": ModelConfig("qwen3-4b", 36, 2560, 32, 8, 128, 9728),
    "qwen3-8b": ModelConfig("qwen3-8b", 36, 4096, 32, 8, 128, 12288),
    "qwen3-32b": ModelConfig("qwen3-32b", 64, 5120, 64, 8, 128, 25600),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ValidationError(f"unknown model preset {name!r}; available: {', '.join(PRESETS)}") from None


@dataclass(frozen=True)
class StrategyConfig:
    kind: str
    context: int
    selected: int = 0
    page_size: int = 16

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.kind!r}; choose from {', '.join(STRATEGIES)}")
        if self.context < 0 or self.selected < 0:
            raise ValidationError("token counts must be non-negative")
        if self.kind != "full" and self.selected > self.context:
            raise ValidationError("selected tokens exceed the context")
        if self.page_size < 1:
            raise ValidationError("page size must be >= 1")


def param_flops(m: ModelConfig) -> int:
    per_layer = (2 * 2 * m.hidden * m.q_heads * m.head_dim
                 + 2 * 2 * m.kv_heads * m.head_dim * m.hidden
                 + 3 * 2 * m.hidden * m.intermediate)
    return m.layers * per_layer


def attn_flops(m: ModelConfig, s: StrategyConfig) -> int:
    qh = m.q_heads * m.head_dim
    if s.kind == "full":
        per_layer = 4 * qh * s.context
    elif s.kind == "tova":
        per_layer = 4 * qh * s.selected + 2 * qh * s.context
    elif s.kind == "quest":
        pages = -(-s.context // s.page_size)  # partial pages still get scored
        per_layer = 4 * qh * s.selected + 2 * qh * pages
    else:
        per_layer = 4 * qh * s.selected
    return m.layers * per_layer


def total_flops(m: ModelConfig, s: StrategyConfig) -> int:
    return param_flops(m) + attn_flops(m, s)


def flops_table(m: ModelConfig, context: int, selected: int, page_size: int = 16) -> list[dict]:
    """One row per strategy: asyncspade, quest, tova, full."""
    rows = []
    for kind in ("asyncspade", "quest", "tova", "full"):
        s = StrategyConfig(kind, context, selected, page_size)
        rows.append({"strategy": kind, "param": param_flops(m), "attn": attn_flops(m, s),
                     "total": total_flops(m, s)})
    return rows
