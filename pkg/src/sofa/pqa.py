"""Synthetic position-wise question answering (PQA) data.

Every instance holds ``N`` synthetic images and asks one question that needs
a separate answer per image. An image is a block of ``k`` tokens:

    [content, marker, distractor * (k - 3), slot]

The content token stores ``(value + key) mod n_values``, where ``key`` is
shared by all images of the instance. Each marker token shows the key with
probability ``marker_reliability`` and a different value otherwise. Reading an
image therefore means estimating the key from as many markers as the image
can see. The model gives its answer for an image at that image's slot token.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .layout import Image, SequenceLayout, Text, build_layout

# vocabulary
PAD, END, LBR, COMMA, RBR, SLOT = 0, 1, 2, 3, 4, 5
INSTRUCTION = (8, 9, 10, 11, 12)
QUESTION = (13, 14, 15, 16)
N_VALUES = 8
VALUE_BASE = 20
CONTENT_BASE = VALUE_BASE + N_VALUES
MARKER_BASE = CONTENT_BASE + N_VALUES
DISTRACTOR_BASE = MARKER_BASE + N_VALUES
VOCAB_SIZE = 64
N_DISTRACTORS = VOCAB_SIZE - DISTRACTOR_BASE

FORMAT_VERSION = 1


@dataclass(frozen=True)
class SyntheticImage:
    attribute_value: int
    tokens: tuple[int, ...]

    def decode(self, key: int) -> int:
        return (self.tokens[0] - CONTENT_BASE - key) % N_VALUES


@dataclass(frozen=True)
class PqaInstance:
    """One PQA example in one image ordering.

    ``perm[p]`` is the base-ordering index of the image shown at position
    ``p``; the base instance has the identity permutation.
    """

    instance_id: int
    images: tuple[SyntheticImage, ...]
    key: int
    ground_truth: tuple[int, ...]
    question_id: int = 0
    ordering_id: int = 0
    perm: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.perm:
            object.__setattr__(self, "perm", tuple(range(len(self.images))))
        if len(self.ground_truth) != len(self.images):
            raise ValueError("ground_truth and images differ in length")
        if any(g != im.attribute_value for g, im in zip(self.ground_truth, self.images)):
            raise ValueError("ground_truth inconsistent with images")
        if sorted(self.perm) != list(range(len(self.images))):
            raise ValueError("perm is not a permutation")

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def k_tokens(self) -> int:
        return len(self.images[0].tokens)


def make_image(value: int, key: int, k_tokens: int, rng: np.random.Generator,
               marker_reliability: float) -> SyntheticImage:
    if rng.random() < marker_reliability:
        marker = key
    else:
        marker = (key + 1 + int(rng.integers(N_VALUES - 1))) % N_VALUES
    distract = [DISTRACTOR_BASE + int(d) for d in rng.integers(N_DISTRACTORS, size=k_tokens - 3)]
    tokens = (CONTENT_BASE + (value + key) % N_VALUES, MARKER_BASE + marker, *distract, SLOT)
    return SyntheticImage(value, tokens)


def generate_dataset(
    n_images: int,
    n_examples: int,
    k_tokens_per_image: int = 4,
    seed: int = 0,
    marker_reliability: float = 0.4,
    id_offset: int = 0,
) -> list[PqaInstance]:
    """Base (unshuffled) PQA instances; attribute values are i.i.d. uniform."""
    if n_images < 1 or n_examples < 1:
        raise ValueError("n_images and n_examples must be >= 1")
    if k_tokens_per_image < 3:
        raise ValueError("an image block needs at least 3 tokens")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_examples):
        key = int(rng.integers(N_VALUES))
        values = rng.integers(N_VALUES, size=n_images)
        images = tuple(make_image(int(v), key, k_tokens_per_image, rng, marker_reliability)
                       for v in values)
        out.append(PqaInstance(id_offset + i, images, key, tuple(int(v) for v in values)))
    return out


def permute(instance: PqaInstance, order: Sequence[int], ordering_id: int) -> PqaInstance:
    """Show image ``order[p]`` of ``instance`` at position ``p``."""
    images = tuple(instance.images[j] for j in order)
    return replace(
        instance,
        images=images,
        ground_truth=tuple(im.attribute_value for im in images),
        ordering_id=ordering_id,
        perm=tuple(instance.perm[j] for j in order),
    )


def shuffle_augment(instance: PqaInstance, n_shuffles: int = 4, seed: int = 0) -> list[PqaInstance]:
    """The instance followed by ``n_shuffles`` shuffled copies.

    Shuffles avoid repeating an ordering (including the original) while
    enough distinct orderings exist.
    """
    if n_shuffles < 0:
        raise ValueError("n_shuffles must be >= 0")
    n = instance.n_images
    rng = np.random.default_rng([seed, instance.instance_id])
    n_orders = math.factorial(n) if n <= 12 else None
    seen = {tuple(range(n))}
    out = [instance]
    for j in range(1, n_shuffles + 1):
        while True:
            order = tuple(int(x) for x in rng.permutation(n))
            if order not in seen or (n_orders is not None and len(seen) >= n_orders):
                break
        seen.add(order)
        out.append(permute(instance, order, j))
    return out


def augment_all(base: Iterable[PqaInstance], n_shuffles: int = 4, seed: int = 0) -> list[PqaInstance]:
    return [x for inst in base for x in shuffle_augment(inst, n_shuffles, seed)]


def prompt_layout(n_images: int, k_tokens: int) -> SequenceLayout:
    segs = [Text(len(INSTRUCTION))] + [Image(k_tokens)] * n_images + [Text(len(QUESTION))]
    return build_layout(segs)


def render_prompt(instance: PqaInstance) -> tuple[list[int], SequenceLayout]:
    tokens = list(INSTRUCTION)
    for im in instance.images:
        tokens.extend(im.tokens)
    tokens.extend(QUESTION)
    return tokens, prompt_layout(instance.n_images, instance.k_tokens)


def answer_slots(layout: SequenceLayout) -> list[int]:
    """Token index at which each image's answer is read (its last token)."""
    return [e - 1 for _, e in layout.image_spans]


# answers ---------------------------------------------------------------

def render_answer(values: Sequence[int]) -> str:
    return "[" + ", ".join(str(int(v)) for v in values) + "]"


def answer_tokens(values: Sequence[int]) -> list[int]:
    out = [LBR]
    for i, v in enumerate(values):
        if i:
            out.append(COMMA)
        out.append(VALUE_BASE + int(v))
    return out + [RBR, END]


def detokenize(tokens: Sequence[int]) -> str:
    parts = []
    for t in tokens:
        if t == END:
            break
        if t == LBR:
            parts.append("[")
        elif t == RBR:
            parts.append("]")
        elif t == COMMA:
            parts.append(", ")
        elif VALUE_BASE <= t < VALUE_BASE + N_VALUES:
            parts.append(str(t - VALUE_BASE))
        else:
            parts.append(f"<{t}>")
    return "".join(parts)


@dataclass(frozen=True)
class ParseFailure:
    reason: str  # "malformed" or "wrong_length"
    text: str = field(default="", compare=False)


_LIST_RE = re.compile(r"^\s*\[\s*(-?\d+(?:\s*,\s*-?\d+)*)?\s*\]\s*$")


def parse_answer_list(output, n_images: int) -> list[int] | ParseFailure:
    """Parse ``"[3, 2, 0]"`` (or its token form) into ``[3, 2, 0]``."""
    text = output if isinstance(output, str) else detokenize(output)
    m = _LIST_RE.match(text)
    if m is None:
        return ParseFailure("malformed", text)
    body = m.group(1)
    values = [int(x) for x in body.split(",")] if body else []
    if len(values) != n_images:
        return ParseFailure("wrong_length", text)
    return values


# serialization ------------------------------------------------------------

def _record(inst: PqaInstance) -> dict:
    return {
        "id": inst.instance_id,
        "ordering": inst.ordering_id,
        "n": inst.n_images,
        "question": inst.question_id,
        "key": inst.key,
        "perm": list(inst.perm),
        "values": list(inst.ground_truth),
        "blocks": [list(im.tokens) for im in inst.images],
    }


def dumps_dataset(instances: Sequence[PqaInstance], meta: dict | None = None) -> str:
    """JSON-lines text: one header line, then one record per instance.

    Record fields in order: id, ordering, n, question, key, perm, values, blocks.
    """
    header = {"format": "sofa-pqa", "version": FORMAT_VERSION,
              "fields": ["id", "ordering", "n", "question", "key", "perm", "values", "blocks"]}
    if meta:
        header["meta"] = meta
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(_record(x), separators=(",", ":")) for x in instances]
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> tuple[list[PqaInstance], dict]:
    lines = text.splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "sofa-pqa":
        raise ValueError("not a sofa-pqa dataset")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {header.get('version')}")
    out = []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        r = json.loads(ln)
        images = tuple(SyntheticImage(v, tuple(b)) for v, b in zip(r["values"], r["blocks"]))
        out.append(PqaInstance(r["id"], images, r["key"], tuple(r["values"]), r["question"],
                               r["ordering"], tuple(r["perm"])))
    return out, header.get("meta", {})


def save_dataset(path, instances, meta=None) -> None:
    Path(path).write_text(dumps_dataset(instances, meta))


def load_dataset(path) -> tuple[list[PqaInstance], dict]:
    return loads_dataset(Path(path).read_text())


def key_token(instance: PqaInstance) -> int:
    return MARKER_BASE + instance.key


def target_positions(layout: SequenceLayout) -> list[int]:
    """Supervised positions: every answer slot, then the last prompt token."""
    return answer_slots(layout) + [layout.L - 1]


def batch_arrays(instances: Sequence[PqaInstance]) -> tuple[np.ndarray, np.ndarray, SequenceLayout]:
    """Stack prompts into ``tokens (B, L)`` and targets ``(B, N + 1)``.

    Targets follow :func:`target_positions`: the answer value of each image,
    then the instance key at the last prompt token. All instances must share
    ``N`` and ``k``.
    """
    shapes = {(x.n_images, x.k_tokens) for x in instances}
    if len(shapes) != 1:
        raise ValueError(f"instances have mixed shapes: {sorted(shapes)}")
    toks = []
    for x in instances:
        t, layout = render_prompt(x)
        toks.append(t)
    targets = np.array([[VALUE_BASE + g for g in x.ground_truth] + [key_token(x)] for x in instances],
                       dtype=np.int64)
    return np.array(toks, dtype=np.int64), targets, layout
