"""Inference-side filtering (score threshold, greedy NMS) and score-gap analysis."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import BBox, GroundTruth, pairwise_iou

DEFAULT_BINS = 50
DISPLAY_CAP = 10_000  # figure-style y-axis cap, written as export metadata only


@dataclass(frozen=True)
class Detection:
    box: BBox
    category: int
    score: float

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must be finite and in [0, 1], got {self.score}")
        if self.category < 0:
            raise ValueError("negative category")

    def to_dict(self) -> dict:
        return {"box": self.box.as_list(), "category": self.category, "score": self.score}

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        return cls(BBox.from_seq(d["box"]), int(d["category"]), float(d["score"]))


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> list[tuple[float, float, int]]:
        return [(float(self.edges[k]), float(self.edges[k + 1]), int(self.counts[k]))
                for k in range(len(self.counts))]

    def write_csv(self, path, display_cap: int = DISPLAY_CAP) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# display_cap={display_cap}\n")
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in self.rows():
                writer.writerow([f"{lo:.6g}", f"{hi:.6g}", c])


@dataclass
class ScoreGapReport:
    i_max: Optional[int]
    gap: Optional[float]
    histogram: ScoreHistogram
    per_object_gaps: list[Optional[float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "i_max": self.i_max,
            "gap": self.gap,
            "per_object_gaps": self.per_object_gaps,
            "missing_objects": [k for k, g in enumerate(self.per_object_gaps) if g is None],
            "histogram": [{"bin_lo": lo, "bin_hi": hi, "count": c} for lo, hi, c in self.histogram.rows()],
        }


def score_histogram(scores, bins: int = DEFAULT_BINS) -> ScoreHistogram:
    scores = np.clip(np.asarray(scores, dtype=np.float64).ravel(), 0.0, 1.0)
    counts, edges = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return ScoreHistogram(edges=edges, counts=counts)


def score_filter(dets: Sequence[Detection], tau: float) -> list[Detection]:
    if not 0.0 <= tau <= 1.0:
        raise ValueError("score threshold must lie in [0, 1]")
    return [d for d in dets if d.score > tau]


def nms_indices(boxes, scores, labels=None, iou_thr: float = 0.5, classwise: bool = True) -> np.ndarray:
    """Greedy NMS on arrays. Returns kept indices in descending-score order
    (input order among equal scores)."""
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError("iou_thr must lie in (0, 1]")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    if classwise and labels is not None:
        labels = np.asarray(labels).ravel()
    else:
        labels = None
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        overlaps = pairwise_iou(boxes[i:i + 1], boxes[rest])[0]
        drop = overlaps >= iou_thr
        if labels is not None:
            drop &= labels[rest] == labels[i]
        order = rest[~drop]
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thr: float = 0.5, classwise: bool = True) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box.as_list() for d in dets])
    scores = np.array([d.score for d in dets])
    labels = np.array([d.category for d in dets])
    keep = nms_indices(boxes, scores, labels, iou_thr, classwise)
    return [dets[i] for i in keep]


def score_gap(scores, bins: int = DEFAULT_BINS) -> ScoreGapReport:
    """Gap between the highest score and every other score (i.e. to the runner-up)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size < 2:
        raise ValueError("score gap needs at least two samples")
    i_max = int(np.argmax(s))
    rest = np.delete(s, i_max)
    gap = float(np.min(s[i_max] - rest))
    return ScoreGapReport(i_max=i_max, gap=gap, histogram=score_histogram(s, bins))


def per_object_score_gap(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_floor: float = 0.3,
    bins: int = DEFAULT_BINS,
) -> ScoreGapReport:
    """Score gap per object, over the same-category detections overlapping it by at least
    ``iou_floor``. Objects with fewer than two such detections get ``None``."""
    if not dets:
        return ScoreGapReport(None, None, score_histogram([], bins), [None] * len(gts))
    boxes = np.array([d.box.as_list() for d in dets])
    scores = np.array([d.score for d in dets])
    cats = np.array([d.category for d in dets])
    gt_boxes = np.array([g.box.as_list() for g in gts]).reshape(-1, 4)
    overlaps = pairwise_iou(boxes, gt_boxes)
    gaps: list[Optional[float]] = []
    for j, g in enumerate(gts):
        member = (overlaps[:, j] >= iou_floor) & (cats == g.category)
        if member.sum() < 2:
            gaps.append(None)
            continue
        gaps.append(score_gap(scores[member], bins).gap)
    i_max = int(np.argmax(scores))
    defined = [g for g in gaps if g is not None]
    return ScoreGapReport(
        i_max=i_max,
        gap=float(min(defined)) if defined else None,
        histogram=score_histogram(scores, bins),
        per_object_gaps=gaps,
    )
