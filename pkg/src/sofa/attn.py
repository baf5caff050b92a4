"""Masked scaled dot-product attention with rotary position encoding.

Masks may hold fractional entries. Two readings of a fractional mask are
supported:

* ``renormalized`` (default): the masked softmax is renormalized per row,
  which is the same as adding ``log(mask)`` to the scores before softmax.
* ``literal``: ``softmax(scores) * mask`` with no renormalization, so rows
  may sum to less than one.

With ``sigma = 0`` only the renormalized reading reproduces ordinary causal
attention, hence the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

ROPE_BASE = 10000.0


@dataclass(frozen=True)
class AttentionConfig:
    d_head: int = 16
    n_heads: int = 4
    semantics: str = "renormalized"  # or "literal"
    rope: bool = True
    rope_enabled_for_images: bool = True

    def __post_init__(self) -> None:
        if self.d_head < 1 or self.n_heads < 1:
            raise ValueError("d_head and n_heads must be positive")
        if self.rope and self.d_head % 2:
            raise ValueError("rotary encoding needs an even d_head")
        if self.semantics not in ("renormalized", "literal"):
            raise ValueError(f"unknown semantics {self.semantics!r}")


def rope_angles(positions, d: int, dtype=torch.float64) -> torch.Tensor:
    """``(L, d/2)`` angles ``pos * base**(-2i/d)``."""
    pos = torch.as_tensor(positions, dtype=dtype)
    inv_freq = ROPE_BASE ** (-torch.arange(0, d, 2, dtype=dtype) / d)
    return pos[:, None] * inv_freq[None, :]


def apply_position_encoding(
    x: torch.Tensor,
    positions,
    config: AttentionConfig,
    image_rows=None,
) -> torch.Tensor:
    """Rotate each dimension pair ``(2i, 2i+1)`` of the rows of ``x``.

    ``x`` has shape ``(..., L, d)``. ``image_rows`` is an optional boolean
    vector marking image tokens; when ``config.rope_enabled_for_images`` is
    false those rows get angle 0 (i.e. are left as is).
    """
    L, d = x.shape[-2], x.shape[-1]
    if len(positions) != L:
        raise ValueError(f"{len(positions)} positions for {L} rows")
    if d % 2:
        raise ValueError("rotary encoding needs an even dimension")
    if not config.rope:
        return x
    pos = torch.as_tensor(positions, dtype=x.dtype)
    if image_rows is not None and not config.rope_enabled_for_images:
        pos = torch.where(torch.as_tensor(image_rows, dtype=torch.bool), torch.zeros_like(pos), pos)
    ang = rope_angles(pos, d, dtype=x.dtype)
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x1 * cos - x2 * sin, x1 * sin + x2 * cos), dim=-1)
    return out.flatten(-2)


def log_bias(mask: torch.Tensor) -> torch.Tensor:
    """Torch counterpart of :func:`sofa.mask.mask_to_log_bias`."""
    return torch.where(mask > 0, torch.log(mask.clamp_min(torch.finfo(mask.dtype).tiny)),
                       torch.full_like(mask, -math.inf))


def attend(Q, K, V, mask, config: AttentionConfig | None = None):
    """Return ``(H, weights)`` for queries/keys/values of shape ``(..., L, d)``.

    ``mask`` is ``(L, L)`` (or broadcastable), numpy or torch.
    """
    semantics = config.semantics if config is not None else "renormalized"
    Q, K, V = (torch.as_tensor(t) for t in (Q, K, V))
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask, dtype=Q.dtype)
    if Q.shape[-2] != m.shape[-2] or K.shape[-2] != m.shape[-1]:
        raise ValueError(f"mask {tuple(m.shape)} does not fit scores {Q.shape[-2]}x{K.shape[-2]}")
    if not torch.all((m > 0).any(dim=-1)):
        raise ValueError("mask has an all-zero row")
    scores = Q @ K.transpose(-1, -2) / math.sqrt(Q.shape[-1])
    if semantics == "renormalized":
        z = scores + log_bias(m)
        z = z - z.amax(dim=-1, keepdim=True)
        e = torch.exp(z)
        weights = e / e.sum(dim=-1, keepdim=True)
    elif semantics == "literal":
        z = scores - scores.amax(dim=-1, keepdim=True)
        e = torch.exp(z)
        weights = e / e.sum(dim=-1, keepdim=True) * m
    else:
        raise ValueError(f"unknown semantics {semantics!r}")
    return weights @ V, weights
