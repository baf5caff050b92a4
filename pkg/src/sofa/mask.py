"""Inter-image attention masks and their per-layer schedule.

All masks are dense ``L x L`` float64 arrays, rows are queries and columns
keys. Only entries where query and key are image tokens of *different* images
ever deviate from the plain causal mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .layout import TEXT, SequenceLayout


@dataclass(frozen=True)
class Causal:
    pass


@dataclass(frozen=True)
class IsolatedImages:
    pass


@dataclass(frozen=True)
class BidirectionalImages:
    pass


@dataclass(frozen=True)
class Soft:
    sigma: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.sigma <= 1.0) or math.isnan(self.sigma):
            raise ValueError(f"sigma must lie in [0, 1], got {self.sigma}")


MaskVariant = Union[Causal, IsolatedImages, BidirectionalImages, Soft]


def parse_variant(name: str, sigma: float | None = None) -> MaskVariant:
    name = name.lower()
    if name == "causal":
        return Causal()
    if name in ("isolated", "isolatedimages"):
        return IsolatedImages()
    if name in ("bidirectional", "bidirectionalimages"):
        return BidirectionalImages()
    if name == "soft":
        if sigma is None:
            raise ValueError("soft variant needs sigma")
        return Soft(float(sigma))
    raise ValueError(f"unknown mask variant {name!r}")


def _inter_image(layout: SequenceLayout) -> np.ndarray:
    kinds = np.asarray(layout.kinds)
    img = kinds != TEXT
    return img[:, None] & img[None, :] & (kinds[:, None] != kinds[None, :])


def causal_mask(L: int) -> np.ndarray:
    return np.tril(np.ones((L, L), dtype=np.float64))


def build_mask(layout: SequenceLayout, variant: MaskVariant) -> np.ndarray:
    causal = causal_mask(layout.L)
    if isinstance(variant, Causal):
        return causal
    inter = _inter_image(layout)
    if isinstance(variant, BidirectionalImages):
        out = causal.copy()
        out[inter] = 1.0
        return out
    if isinstance(variant, IsolatedImages):
        out = causal.copy()
        out[inter] = 0.0
        return out
    if isinstance(variant, Soft):
        s = variant.sigma
        return (1.0 - s) * causal + s * build_mask(layout, BidirectionalImages())
    raise TypeError(f"not a mask variant: {variant!r}")


def validate_mask(mask: np.ndarray, layout: SequenceLayout | None = None) -> None:
    """Raise ``ValueError`` if ``mask`` breaks the AttentionMask invariants."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"mask must be square, got shape {m.shape}")
    if not np.all((m >= 0) & (m <= 1)):
        raise ValueError("mask entries must lie in [0, 1]")
    if not np.all(np.diag(m) == 1):
        raise ValueError("mask diagonal must be 1")
    if layout is not None:
        if m.shape[0] != layout.L:
            raise ValueError("mask size does not match layout")
        outside = ~_inter_image(layout)
        if not np.array_equal(m[outside], causal_mask(layout.L)[outside]):
            raise ValueError("mask differs from causal outside inter-image pairs")


@dataclass(frozen=True)
class LayerSchedule:
    n_layers: int
    soft_layers: frozenset[int]

    def __post_init__(self) -> None:
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        bad = [i for i in self.soft_layers if not 0 <= i < self.n_layers]
        if bad:
            raise ValueError(f"soft layer indices out of range: {sorted(bad)}")

    @classmethod
    def from_mode(cls, n_layers: int, mode: str | Iterable[int]) -> "LayerSchedule":
        """Build from a mode string or an explicit set of layer indices.

        Modes: ``"all"``, ``"none"``, ``"every_<k>"`` (layers ``k-1, 2k-1, ...``
        so layer 0 stays causal), ``"every_<k>@<offset>"`` (layers
        ``offset, offset+k, ...``) and ``"explicit:i,j,..."``.
        """
        if isinstance(mode, str):
            if mode == "all":
                return cls(n_layers, frozenset(range(n_layers)))
            if mode == "none":
                return cls(n_layers, frozenset())
            if mode.startswith("every_"):
                k_str, _, off_str = mode[len("every_"):].partition("@")
                k = int(k_str)
                if k < 1:
                    raise ValueError("every_k needs k >= 1")
                offset = int(off_str) if off_str else k - 1
                if not 0 <= offset < k:
                    raise ValueError("every_k offset must lie in [0, k)")
                return cls(n_layers, frozenset(range(offset, n_layers, k)))
            if mode.startswith("explicit:"):
                idx = [int(x) for x in mode[len("explicit:"):].split(",") if x.strip()]
                return cls(n_layers, frozenset(idx))
            raise ValueError(f"unknown schedule mode {mode!r}")
        return cls(n_layers, frozenset(int(i) for i in mode))


def schedule_masks(
    layout: SequenceLayout,
    sigma: float,
    n_layers: int,
    mode: str | Sequence[int] = "every_2",
) -> list[np.ndarray]:
    """One mask per layer: ``Soft(sigma)`` on scheduled layers, causal elsewhere."""
    sched = LayerSchedule.from_mode(n_layers, mode)
    causal = build_mask(layout, Causal())
    soft = build_mask(layout, Soft(sigma))
    return [soft if i in sched.soft_layers else causal for i in range(n_layers)]


def mask_to_log_bias(mask: np.ndarray) -> np.ndarray:
    """Elementwise log; zeros become ``-inf``."""
    m = np.asarray(mask, dtype=np.float64)
    out = np.full(m.shape, -np.inf)
    pos = m > 0
    out[pos] = np.log(m[pos])
    return out


def mask_to_csv(mask: np.ndarray) -> str:
    """Row-major CSV with an ``L=<n>`` header line."""
    m = np.asarray(mask)
    lines = [f"L={m.shape[0]}"]
    lines += [",".join(repr(float(v)) for v in row) for row in m]
    return "\n".join(lines) + "\n"


def mask_from_csv(text: str) -> np.ndarray:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("L="):
        raise ValueError("missing L=<n> header")
    n = int(lines[0][2:])
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:]]
    m = np.array(rows, dtype=np.float64)
    if m.shape != (n, n):
        raise ValueError(f"expected {n}x{n} mask, got {m.shape}")
    return m
