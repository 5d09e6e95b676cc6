"""Attention anchoring lab: VAS metrics, attention-guided objectives, attention
reallocation and visual-anchored GRPO on a tiny instrumented transformer."""

from .attn_core import (
    AttentionTensor,
    TokenSegmentation,
    read_dump,
    softmax_rows,
    validate_attention,
    validate_segmentation,
    write_dump,
)
from .vas import aggregate_vas, classify_band, pearson, vas_model, vas_per_head

__version__ = "0.1.0"

__all__ = [
    "AttentionTensor",
    "TokenSegmentation",
    "aggregate_vas",
    "classify_band",
    "pearson",
    "read_dump",
    "softmax_rows",
    "validate_attention",
    "validate_segmentation",
    "vas_model",
    "vas_per_head",
    "write_dump",
]
