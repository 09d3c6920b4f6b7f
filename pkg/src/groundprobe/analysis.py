"""Measurement procedures quantifying how much a model uses its image.

Two instruments over model-generated captions:

* Gradient sensitivity: replay a caption, take the probability of the actual
  next token at each position, and backpropagate it to the raw image feature
  vector and to the embedding output of the previous word. Records hold the
  mean absolute gradient over the coordinates of each.
* Omission scoring: replay a caption twice, once with its own image and once
  with a foil (the test image farthest in cosine distance), and compare the
  per-step multimodal vectors, softmax outputs and logits.

Positions run 0..L for a caption of L words: position t scores the word at
index t, position L scores END. Aggregation restricts to captions of one
fixed length so curves never mix positions with different roles.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import ShapeError, as_tensor, backward
from .captioner import (
    END_ID,
    START_ID,
    ArchitectureKind,
    ModelParams,
    build_replay_graph,
    forward_replay,
)

__all__ = [
    "AnalysisError",
    "CaptionSample",
    "SensitivityRecord",
    "OmissionRecord",
    "AggregateCurve",
    "CurvePoint",
    "WordClassTable",
    "cosine_distance",
    "js_divergence",
    "fraction_negative",
    "select_foil",
    "build_foil_map",
    "sensitivity_analysis",
    "omission_scoring",
    "caption_lengths",
    "aggregate",
    "word_class_table",
    "SENSITIVITY_METRICS",
    "OMISSION_METRICS",
]

_NORM_FLOOR = 1e-12

SENSITIVITY_METRICS = ("mean_abs_grad_image", "mean_abs_grad_prevword")
OMISSION_METRICS = ("cos_dist_multimodal", "cos_dist_softmax", "jsd_softmax",
                    "cos_dist_logits", "frac_neg_logits_orig", "frac_neg_logits_foil")


class AnalysisError(ValueError):
    """Invalid analysis input (degenerate vectors, bad captions, empty sets)."""


@dataclass(frozen=True)
class CaptionSample:
    """A model-generated caption: body token ids ending in END, no START."""

    id: int
    image_id: int
    tokens: tuple[int, ...]

    def validate(self):
        if not self.tokens or self.tokens[-1] != END_ID:
            raise AnalysisError(f"caption {self.id} does not end with END")

    @property
    def length(self) -> int:
        """Number of words; END sits at position `length`."""
        return len(self.tokens) - 1


@dataclass(frozen=True)
class SensitivityRecord:
    caption_id: int
    position: int
    mean_abs_grad_image: float
    mean_abs_grad_prevword: float


@dataclass(frozen=True)
class OmissionRecord:
    caption_id: int
    position: int
    cos_dist_multimodal: float
    cos_dist_softmax: float
    jsd_softmax: float
    cos_dist_logits: float
    frac_neg_logits_orig: float
    frac_neg_logits_foil: float


@dataclass(frozen=True)
class CurvePoint:
    mean: float
    count: int
    std: float


@dataclass(frozen=True)
class AggregateCurve:
    length: int
    metric: str
    points: list[CurvePoint]


def cosine_distance(a, b) -> float:
    """1 - cos(a, b); lies in [0, 2]. Near-zero-norm operands are rejected."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("cosine_distance", a.shape, b.shape)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        raise AnalysisError(f"cosine_distance: degenerate vector "
                            f"(norms {na:.3e}, {nb:.3e} below {_NORM_FLOOR})")
    return 1.0 - float(np.dot(a, b)) / (na * nb)


def _check_distribution(name: str, p: np.ndarray):
    if p.ndim != 1:
        raise AnalysisError(f"js_divergence: {name} must be a vector")
    if np.any(p < 0):
        raise AnalysisError(f"js_divergence: {name} has negative entries")
    total = float(p.sum())
    if abs(total - 1.0) > 1e-6:
        raise AnalysisError(f"js_divergence: {name} sums to {total}, not 1")


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logs, so the value lies in [0, 1].

    0*log(0) terms are treated as 0.
    """
    p = as_tensor(p)
    q = as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("js_divergence", p.shape, q.shape)
    _check_distribution("p", p)
    _check_distribution("q", q)
    m = 0.5 * (p + q)

    def kl(a: np.ndarray) -> float:
        mask = a > 0
        return float(np.sum(a[mask] * np.log2(a[mask] / m[mask])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def fraction_negative(v) -> float:
    """Fraction of strictly negative entries; invariant to positive rescaling."""
    v = as_tensor(v)
    if v.size == 0:
        raise AnalysisError("fraction_negative: empty vector")
    return float(np.count_nonzero(v < 0)) / v.size


def select_foil(target_id: int, features: Mapping[int, np.ndarray]) -> int:
    """Id of the candidate image farthest (cosine distance) from the target.

    Candidates with near-zero norm are skipped; ties resolve to the lowest id.
    """
    if target_id not in features:
        raise AnalysisError(f"select_foil: unknown target id {target_id}")
    target = as_tensor(features[target_id])
    if float(np.linalg.norm(target)) < _NORM_FLOOR:
        raise AnalysisError(f"select_foil: target {target_id} is degenerate")
    best_id = None
    best_dist = -math.inf
    for cand_id in sorted(features):
        if cand_id == target_id:
            continue
        cand = as_tensor(features[cand_id])
        if float(np.linalg.norm(cand)) < _NORM_FLOOR:
            continue
        dist = cosine_distance(target, cand)
        if dist > best_dist:
            best_dist = dist
            best_id = cand_id
    if best_id is None:
        raise AnalysisError(f"select_foil: no usable candidates for target {target_id}")
    return best_id


def build_foil_map(features: Mapping[int, np.ndarray], mode: str = "farthest") -> dict[int, int]:
    """Foil id per image id; `mode="self"` maps every image to itself."""
    if mode == "self":
        return {i: i for i in features}
    if mode != "farthest":
        raise AnalysisError(f"unknown foil mode {mode!r}")
    if len(features) < 2:
        raise AnalysisError("foil selection needs at least two images")
    return {i: select_foil(i, features) for i in sorted(features)}


def _worker_count(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("GPRB_THREADS")
    return max(1, int(env)) if env else 1


def _fan_out(fn: Callable, samples: Sequence[CaptionSample], workers: int | None):
    count = _worker_count(workers)
    if count == 1 or len(samples) < 2:
        chunks = map(fn, samples)
    else:
        with ThreadPoolExecutor(max_workers=count) as pool:
            chunks = list(pool.map(fn, samples))
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r.caption_id, r.position))
    return records


def sensitivity_analysis(
    kind: ArchitectureKind,
    params: ModelParams,
    samples: Sequence[CaptionSample],
    features: Mapping[int, np.ndarray],
    workers: int | None = None,
) -> list[SensitivityRecord]:
    """Mean-abs gradients of p(next word) w.r.t. image and previous word.

    Captions should have been generated by this same model; each is replayed
    teacher-forced and every position 0..L contributes one record. Gradients
    target the raw feature vector (before projection) and the embedding
    output of the word consumed at that step (START's embedding at position
    0).
    """

    def per_sample(sample: CaptionSample) -> list[SensitivityRecord]:
        sample.validate()
        image = features[sample.image_id]
        replay = build_replay_graph(kind, params, image, [START_ID, *sample.tokens])
        out = []
        for t in range(len(sample.tokens)):
            grads = backward(replay.graph, replay.probs[t])
            g_img = grads.get(replay.image)
            g_img_mean = float(np.mean(np.abs(g_img))) if g_img is not None else 0.0
            g_emb = grads[replay.embeds[t]]
            out.append(SensitivityRecord(sample.id, t, g_img_mean,
                                         float(np.mean(np.abs(g_emb)))))
        return out

    return _fan_out(per_sample, samples, workers)


def omission_scoring(
    kind: ArchitectureKind,
    params: ModelParams,
    samples: Sequence[CaptionSample],
    features: Mapping[int, np.ndarray],
    foil_map: Mapping[int, int],
    workers: int | None = None,
) -> list[OmissionRecord]:
    """Per-position divergence between original-image and foil-image replays."""

    def per_sample(sample: CaptionSample) -> list[OmissionRecord]:
        sample.validate()
        full = [START_ID, *sample.tokens]
        orig = forward_replay(kind, params, features[sample.image_id], full)
        foil = forward_replay(kind, params, features[foil_map[sample.image_id]], full)
        out = []
        for t, (a, b) in enumerate(zip(orig, foil)):
            out.append(OmissionRecord(
                caption_id=sample.id,
                position=t,
                cos_dist_multimodal=cosine_distance(a.multimodal, b.multimodal),
                cos_dist_softmax=cosine_distance(a.softmax, b.softmax),
                jsd_softmax=js_divergence(a.softmax, b.softmax),
                cos_dist_logits=cosine_distance(a.logits, b.logits),
                frac_neg_logits_orig=fraction_negative(a.logits),
                frac_neg_logits_foil=fraction_negative(b.logits),
            ))
        return out

    return _fan_out(per_sample, samples, workers)


def caption_lengths(records: Iterable) -> dict[int, int]:
    """Caption length per caption id, inferred as the maximum position seen
    (position L is the END prediction)."""
    lengths: dict[int, int] = {}
    for rec in records:
        cur = lengths.get(rec.caption_id, -1)
        if rec.position > cur:
            lengths[rec.caption_id] = rec.position
    return lengths


def aggregate(records: Sequence, length: int, metric: str) -> AggregateCurve:
    """Mean/count/std of `metric` per position over captions of exactly `length`."""
    if not records:
        raise AnalysisError("aggregate: no records")
    if not hasattr(records[0], metric):
        raise AnalysisError(f"aggregate: records carry no metric {metric!r}")
    lengths = caption_lengths(records)
    keep = {cid for cid, L in lengths.items() if L == length}
    if not keep:
        raise AnalysisError(f"aggregate: no captions of length {length}")
    buckets: list[list[float]] = [[] for _ in range(length + 1)]
    for rec in records:
        if rec.caption_id in keep:
            buckets[rec.position].append(float(getattr(rec, metric)))
    points = []
    for values in buckets:
        if values:
            arr = np.asarray(values)
            points.append(CurvePoint(float(arr.mean()), len(values),
                                     float(arr.std(ddof=0))))
        else:
            points.append(CurvePoint(math.nan, 0, math.nan))
    return AggregateCurve(length, metric, points)


@dataclass
class WordClassTable:
    """Percentage of each word class at each caption position."""

    rows: list[dict[str, float]]  # rows[position][class] -> percent
    counts: list[int]  # samples contributing at each position
    unknown_tokens: int  # tokens that fell outside the grammar

    def percent(self, position: int, cls: str) -> float:
        return self.rows[position].get(cls, 0.0)

    def classes(self) -> list[str]:
        seen = set()
        for row in self.rows:
            seen.update(row)
        return sorted(seen)


def word_class_table(class_sequences: Sequence[Sequence[str]]) -> WordClassTable:
    """Tabulate class percentages by position over aligned tag sequences.

    Tags equal to "UNK" are tallied like any class but also counted in
    `unknown_tokens` so callers can flag them.
    """
    seqs = [list(s) for s in class_sequences]
    if not seqs:
        raise AnalysisError("word_class_table: empty example set")
    max_len = max(len(s) for s in seqs)
    rows = []
    counts = []
    unknown = 0
    for pos in range(max_len):
        tally: dict[str, int] = {}
        total = 0
        for seq in seqs:
            if pos < len(seq):
                tally[seq[pos]] = tally.get(seq[pos], 0) + 1
                total += 1
        unknown += tally.get("UNK", 0)
        rows.append({cls: 100.0 * n / total for cls, n in sorted(tally.items())})
        counts.append(total)
    return WordClassTable(rows, counts, unknown)
