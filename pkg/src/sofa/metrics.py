"""Position-bias measurements over PQA evaluations."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch

from . import pqa
from .model import Batch, ModelParams, forward, predict
from .mask import schedule_masks


@dataclass(frozen=True)
class EvalRecord:
    """Scored model output for one instance in one ordering.

    ``predictions`` is ``None`` when the output failed to parse; such a record
    counts as wrong at every position.
    """

    instance_id: int
    ordering_id: int
    predictions: tuple[int, ...] | None
    correctness: tuple[bool, ...]
    parse_status: str = "ok"
    perm: tuple[int, ...] = ()

    @property
    def n(self) -> int:
        return len(self.correctness)

    def aligned(self) -> tuple[int, ...] | None:
        """Predictions re-indexed to the base image ordering."""
        if self.predictions is None:
            return None
        perm = self.perm or tuple(range(len(self.predictions)))
        out = [0] * len(perm)
        for p, j in enumerate(perm):
            out[j] = self.predictions[p]
        return tuple(out)


def score_output(instance: pqa.PqaInstance, output) -> EvalRecord:
    parsed = pqa.parse_answer_list(output, instance.n_images)
    if isinstance(parsed, pqa.ParseFailure):
        return EvalRecord(instance.instance_id, instance.ordering_id, None,
                          (False,) * instance.n_images, parsed.reason, instance.perm)
    correct = tuple(int(a) == int(g) for a, g in zip(parsed, instance.ground_truth))
    return EvalRecord(instance.instance_id, instance.ordering_id, tuple(parsed), correct, "ok", instance.perm)


def position_wise_accuracy(records: Sequence[EvalRecord]) -> np.ndarray:
    if not records:
        raise ValueError("no records")
    ns = {r.n for r in records}
    if len(ns) != 1:
        raise ValueError("records disagree on the number of images")
    return np.array([r.correctness for r in records], dtype=np.float64).mean(axis=0)


def overall_accuracy(records: Sequence[EvalRecord]) -> float:
    return float(position_wise_accuracy(records).mean())


def group_by_ordering(records: Iterable[EvalRecord]) -> dict[int, list[EvalRecord]]:
    groups: dict[int, list[EvalRecord]] = defaultdict(list)
    for r in records:
        groups[r.ordering_id].append(r)
    return dict(sorted(groups.items()))


@dataclass(frozen=True)
class OrderingStats:
    min: float
    avg: float
    max: float
    best_id: int
    worst_id: int
    per_ordering: dict[int, float]


def ordering_stats(records: Iterable[EvalRecord] | dict[int, Sequence[EvalRecord]]) -> OrderingStats:
    """Min/avg/max of the overall accuracy of each ordering.

    Ties for best or worst go to the smallest ordering id.
    """
    groups = records if isinstance(records, dict) else group_by_ordering(records)
    if len(groups) < 2:
        raise ValueError("need at least two orderings")
    accs = {oid: overall_accuracy(rs) for oid, rs in sorted(groups.items())}
    ids = sorted(accs)
    best = min(ids, key=lambda i: (-accs[i], i))
    worst = min(ids, key=lambda i: (accs[i], i))
    vals = [accs[i] for i in ids]
    lo, hi = min(vals), max(vals)
    # rounding in the sum can push the mean one ulp outside [lo, hi]
    avg = min(max(math.fsum(vals) / len(vals), lo), hi)
    return OrderingStats(lo, avg, hi, best, worst, accs)


def prediction_inconsistency(best: Sequence[EvalRecord], worst: Sequence[EvalRecord]) -> float:
    """Fraction of instances whose base-aligned predictions differ."""
    a = {r.instance_id: r.aligned() for r in best}
    b = {r.instance_id: r.aligned() for r in worst}
    if set(a) != set(b) or len(a) != len(best) or len(b) != len(worst):
        raise ValueError("best and worst records must cover the same instance ids once each")
    if not a:
        raise ValueError("no records")
    return sum(a[i] != b[i] for i in a) / len(a)


# model-backed measurements ------------------------------------------------

def evaluate(params: ModelParams, instances: Sequence[pqa.PqaInstance], sigma: float,
             mode: str = "every_2") -> list[EvalRecord]:
    """Score the model's answer list for every instance."""
    by_shape: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, x in enumerate(instances):
        by_shape[(x.n_images, x.k_tokens)].append(i)
    records: list[EvalRecord | None] = [None] * len(instances)
    for idx in by_shape.values():
        preds = predict([instances[i] for i in idx], params, sigma, mode)
        for i, p in zip(idx, preds):
            records[i] = score_output(instances[i], pqa.answer_tokens(p))
    return records  # type: ignore[return-value]


def attention_distribution(params: ModelParams, instance: pqa.PqaInstance, sigma: float,
                           mode: str = "every_2") -> np.ndarray:
    """Per-image attention mass of the last prompt token in the final layer.

    Weights are averaged over heads before summing inside each image span.
    """
    tokens, layout = pqa.render_prompt(instance)
    masks = schedule_masks(layout, sigma, params.config.n_layers, mode)
    with torch.no_grad():
        _, weights = forward(tokens, layout, masks, params)
    row = weights[-1][:, -1, :].mean(dim=0).double().numpy()
    return span_mass(row, layout.image_spans)


def span_mass(row: np.ndarray, spans) -> np.ndarray:
    return np.array([row[s:e].sum() for s, e in spans])


def mean_attention_distribution(params, instances, sigma, mode="every_2") -> np.ndarray:
    return np.mean([attention_distribution(params, x, sigma, mode) for x in instances], axis=0)


SIGMA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def calibrate_sigma(params: ModelParams, validation: Sequence[pqa.PqaInstance],
                    grid: Sequence[float] = SIGMA_GRID, mode: str = "every_2",
                    return_scores: bool = False):
    """Grid value with the best validation accuracy; ties go to the smaller sigma."""
    if not validation:
        raise ValueError("empty validation set")
    if not grid or any(not 0.0 <= s <= 1.0 for s in grid):
        raise ValueError("grid must be a nonempty subset of [0, 1]")
    scores = {float(s): overall_accuracy(evaluate(params, validation, s, mode)) for s in grid}
    best = min(scores, key=lambda s: (-scores[s], s))
    return (best, scores) if return_scores else best


# reports -----------------------------------------------------------------

@dataclass
class BiasReport:
    position_accuracy: list[float]
    overall_accuracy: float
    min_accuracy: float
    avg_accuracy: float
    max_accuracy: float
    inconsistency: float
    attention_mass: list[float]
    sigma: float
    n_images: int
    n_records: int
    n_parse_failures: int
    per_ordering: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "BiasReport":
        return cls(**json.loads(text))

    def positions_csv(self) -> str:
        """Columns: position, accuracy, attention_mass."""
        rows = ["position,accuracy,attention_mass"]
        for i, (a, m) in enumerate(zip(self.position_accuracy, self.attention_mass)):
            rows.append(f"{i},{a!r},{m!r}")
        return "\n".join(rows) + "\n"

    def orderings_csv(self) -> str:
        """Columns: ordering_id, accuracy."""
        rows = ["ordering_id,accuracy"]
        rows += [f"{k},{v!r}" for k, v in sorted(self.per_ordering.items(), key=lambda kv: int(kv[0]))]
        return "\n".join(rows) + "\n"

    def summary_csv(self) -> str:
        cols = ["sigma", "n_images", "overall_accuracy", "min_accuracy", "avg_accuracy",
                "max_accuracy", "inconsistency", "n_parse_failures"]
        return ",".join(cols) + "\n" + ",".join(repr(getattr(self, c)) for c in cols) + "\n"


def bias_report(records: Sequence[EvalRecord], sigma: float, attention_mass: Sequence[float] = (),
                metadata: dict | None = None) -> BiasReport:
    groups = group_by_ordering(records)
    acc = position_wise_accuracy(records)
    if len(groups) >= 2:
        st = ordering_stats(groups)
        inc = prediction_inconsistency(groups[st.best_id], groups[st.worst_id])
        lo, avg, hi, per = st.min, st.avg, st.max, {str(k): v for k, v in st.per_ordering.items()}
    else:
        a = float(acc.mean())
        lo = avg = hi = a
        inc = 0.0
        per = {str(k): a for k in groups}
    meta = {"attention_average": "mean over heads", "parse_failure_scoring": "wrong at every position"}
    meta.update(metadata or {})
    return BiasReport(
        position_accuracy=[float(x) for x in acc],
        overall_accuracy=float(acc.mean()),
        min_accuracy=lo, avg_accuracy=avg, max_accuracy=hi,
        inconsistency=float(inc),
        attention_mass=[float(x) for x in attention_mass],
        sigma=float(sigma),
        n_images=records[0].n,
        n_records=len(records),
        n_parse_failures=sum(r.parse_status != "ok" for r in records),
        per_ordering=per,
        metadata=meta,
    )
