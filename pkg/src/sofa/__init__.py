"""Soft inter-image attention (SoFA) and position-bias evaluation on a toy decoder."""

from .layout import Image, SequenceLayout, Text, build_layout, image_token_pairs, parse_layout
from .mask import (
    BidirectionalImages,
    Causal,
    IsolatedImages,
    LayerSchedule,
    Soft,
    build_mask,
    mask_to_log_bias,
    schedule_masks,
)
from .attn import AttentionConfig, apply_position_encoding, attend

__all__ = [
    "Image", "SequenceLayout", "Text", "build_layout", "image_token_pairs", "parse_layout",
    "BidirectionalImages", "Causal", "IsolatedImages", "LayerSchedule", "Soft", "build_mask",
    "mask_to_log_bias", "schedule_masks",
    "AttentionConfig", "apply_position_encoding", "attend",
]
