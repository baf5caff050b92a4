"""Interleaved image/text token layouts.

A layout only records structure: which token belongs to which image and the
plain integer position of every token. Position encoding is applied later by
the attention code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

TEXT = -1  # kind code for text tokens; image tokens carry their image index


@dataclass(frozen=True)
class Segment:
    kind: str  # "T" or "I"
    length: int


def Text(length: int) -> Segment:
    return Segment("T", length)


def Image(length: int) -> Segment:
    return Segment("I", length)


@dataclass(frozen=True)
class SequenceLayout:
    """Token kinds, positions and image spans of one sequence.

    ``kinds[t]`` is ``TEXT`` for text tokens and the 0-based image index for
    image tokens. ``image_spans[i]`` is the half-open range of image ``i``.
    """

    kinds: tuple[int, ...]
    positions: tuple[int, ...]
    image_spans: tuple[tuple[int, int], ...]
    _segments: tuple[Segment, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self) -> None:
        L = len(self.kinds)
        if L == 0:
            raise ValueError("empty layout")
        if tuple(self.positions) != tuple(range(L)):
            raise ValueError("positions must be 0..L-1")
        prev_end = 0
        for i, (s, e) in enumerate(self.image_spans):
            if not (prev_end <= s < e <= L):
                raise ValueError(f"bad image span {i}: {(s, e)}")
            if any(self.kinds[t] != i for t in range(s, e)):
                raise ValueError(f"span {i} does not match token kinds")
            prev_end = e
        n_img_tokens = sum(e - s for s, e in self.image_spans)
        if n_img_tokens != sum(1 for k in self.kinds if k != TEXT):
            raise ValueError("image tokens outside declared spans (non-contiguous image?)")

    @property
    def L(self) -> int:
        return len(self.kinds)

    @property
    def n_images(self) -> int:
        return len(self.image_spans)

    def is_image(self, t: int) -> bool:
        return self.kinds[t] != TEXT

    def segments(self) -> list[Segment]:
        """Decompose back into maximal segments (adjacent text runs merge)."""
        out: list[Segment] = []
        t = 0
        while t < self.L:
            k = self.kinds[t]
            u = t
            while u < self.L and self.kinds[u] == k:
                u += 1
            out.append(Segment("T" if k == TEXT else "I", u - t))
            t = u
        return out

    def __str__(self) -> str:
        return format_layout(self.segments())


def build_layout(segments: Sequence[Segment]) -> SequenceLayout:
    if len(segments) == 0:
        raise ValueError("empty segment list")
    kinds: list[int] = []
    spans: list[tuple[int, int]] = []
    for seg in segments:
        if seg.length < 1:
            raise ValueError(f"segment length must be >= 1, got {seg.length}")
        if seg.kind == "T":
            kinds.extend([TEXT] * seg.length)
        elif seg.kind == "I":
            start = len(kinds)
            kinds.extend([len(spans)] * seg.length)
            spans.append((start, len(kinds)))
        else:
            raise ValueError(f"unknown segment kind {seg.kind!r}")
    return SequenceLayout(tuple(kinds), tuple(range(len(kinds))), tuple(spans), tuple(segments))


_SEG_RE = re.compile(r"^([TI])(\d+)$")


def parse_layout(spec: str) -> SequenceLayout:
    """Parse a segment string such as ``"T5 I4 T2 I4 T3"``."""
    segs = []
    for word in spec.split():
        m = _SEG_RE.match(word.upper())
        if m is None:
            raise ValueError(f"cannot parse layout segment {word!r}")
        segs.append(Segment(m.group(1), int(m.group(2))))
    return build_layout(segs)


def format_layout(segments: Iterable[Segment]) -> str:
    return " ".join(f"{s.kind}{s.length}" for s in segments)


def image_token_pairs(layout: SequenceLayout) -> set[tuple[int, int]]:
    """All (query, key) pairs of image tokens that belong to different images."""
    img = [t for t in range(layout.L) if layout.is_image(t)]
    kinds = layout.kinds
    return {(q, k) for q in img for k in img if kinds[q] != kinds[k]}
