"""Matching cost between candidates (samples) and ground-truth objects.

The total cost of assigning sample ``i`` to object ``j`` is

    C[i, j] = lambda_cls * C_cls[i, j] + lambda_iou * C_iou[i, j] + lambda_l1 * C_l1[i, j]

where the location terms are measured either against the candidate's static
geometry (``predefined``) or against the box the network currently predicts
for it (``predicted``). Setting ``lambda_cls = 0`` gives the location-only
matching used by classic dense detectors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np

from .geometry import (
    BBox,
    GridPoint,
    GroundTruth,
    giou,
    iou,
    l1_distance,
    pairwise_center_distance,
    pairwise_giou,
    pairwise_iou,
    pairwise_l1,
    point_center_distance,
)

PROB_EPS = 1e-7


@dataclass
class Candidate:
    kind: Literal["point", "anchor"]
    predefined_location: Union[GridPoint, BBox]
    class_scores: np.ndarray
    predicted_box: Optional[BBox] = None

    def __post_init__(self):
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64).ravel()
        if self.kind == "point" and not isinstance(self.predefined_location, GridPoint):
            raise ValueError("point candidates carry a GridPoint")
        if self.kind == "anchor" and not isinstance(self.predefined_location, BBox):
            raise ValueError("anchor candidates carry a BBox")
        if self.kind not in ("point", "anchor"):
            raise ValueError(f"unknown candidate kind {self.kind!r}")
        if np.any(self.class_scores < 0) or np.any(self.class_scores > 1):
            raise ValueError("class scores must be probabilities in [0, 1]")


@dataclass(frozen=True)
class CostWeights:
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_iou: float = 2.0
    location_mode: Literal["predefined", "predicted"] = "predefined"
    cls_cost_form: Literal["bce", "focal"] = "focal"
    iou_kind: Literal["iou", "giou"] = "iou"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        lams = (self.lambda_cls, self.lambda_l1, self.lambda_iou)
        if any(v < 0 or not math.isfinite(v) for v in lams):
            raise ValueError(f"cost coefficients must be finite and nonnegative: {lams}")
        if max(lams) <= 0:
            raise ValueError("at least one cost coefficient must be positive")
        if self.location_mode not in ("predefined", "predicted"):
            raise ValueError(f"unknown location_mode {self.location_mode!r}")
        if self.cls_cost_form not in ("bce", "focal"):
            raise ValueError(f"unknown cls_cost_form {self.cls_cost_form!r}")
        if self.iou_kind not in ("iou", "giou"):
            raise ValueError(f"unknown iou_kind {self.iou_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostWeights":
        return cls(**d)


@dataclass
class CostMatrix:
    total: np.ndarray
    cls_part: np.ndarray  # unweighted classification cost
    loc_part: np.ndarray  # already weighted by lambda_l1 / lambda_iou
    lambda_cls: float

    @property
    def n_samples(self) -> int:
        return self.total.shape[0]

    @property
    def n_objects(self) -> int:
        return self.total.shape[1]

    def summary(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "n_objects": self.n_objects,
            "lambda_cls": self.lambda_cls,
            "column_min": self.total.min(axis=0).tolist() if self.total.size else [],
            "column_argmin": self.total.argmin(axis=0).tolist() if self.total.size else [],
        }

    @classmethod
    def from_total(cls, total) -> "CostMatrix":
        """Wrap a bare cost table, e.g. from a fixture file."""
        total = np.asarray(total, dtype=np.float64)
        if total.ndim != 2:
            raise ValueError("cost table must be 2-D (samples x objects)")
        if not np.all(np.isfinite(total)):
            raise ValueError("cost table has non-finite entries")
        return cls(total=total, cls_part=np.zeros_like(total), loc_part=total.copy(), lambda_cls=0.0)


def _focal_or_bce(p: np.ndarray, w: CostWeights) -> np.ndarray:
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    nll = -np.log(p)
    if w.cls_cost_form == "bce":
        return nll
    return w.focal_alpha * (1.0 - p) ** w.focal_gamma * nll


def classification_cost(c: Candidate, g: GroundTruth, w: CostWeights) -> float:
    if g.category >= c.class_scores.size:
        raise ValueError(f"category {g.category} out of range for K={c.class_scores.size}")
    return float(_focal_or_bce(np.float64(c.class_scores[g.category]), w))


def location_cost(c: Candidate, g: GroundTruth, w: CostWeights) -> float:
    """Weighted L1 + (1 - IoU) cost. Points have no extent, so their IoU term is dropped
    and the L1 term becomes the distance from the point to the box center."""
    if w.location_mode == "predicted":
        if c.predicted_box is None:
            raise ValueError("predicted location mode needs a predicted_box")
        geom: Union[GridPoint, BBox] = c.predicted_box
    else:
        geom = c.predefined_location
    if isinstance(geom, GridPoint):
        return w.lambda_l1 * point_center_distance(geom, g.box)
    overlap = giou(geom, g.box) if w.iou_kind == "giou" else iou(geom, g.box)
    return w.lambda_iou * (1.0 - overlap) + w.lambda_l1 * l1_distance(geom, g.box)


def classification_cost_matrix(scores: np.ndarray, gt_labels: np.ndarray, w: CostWeights) -> np.ndarray:
    """Raw (unweighted) classification cost, shape (n_samples, n_objects)."""
    scores = np.asarray(scores, dtype=np.float64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    if gt_labels.size and gt_labels.max() >= scores.shape[1]:
        raise ValueError("ground-truth category out of range for class scores")
    return _focal_or_bce(scores[:, gt_labels], w)


def location_cost_matrix(
    gt_boxes: np.ndarray,
    w: CostWeights,
    *,
    points: Optional[np.ndarray] = None,
    boxes: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Weighted location cost against either candidate points or candidate boxes."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if (points is None) == (boxes is None):
        raise ValueError("pass exactly one of points / boxes")
    if points is not None:
        return w.lambda_l1 * pairwise_center_distance(points, gt_boxes)
    overlap = pairwise_giou(boxes, gt_boxes) if w.iou_kind == "giou" else pairwise_iou(boxes, gt_boxes)
    return w.lambda_iou * (1.0 - overlap) + w.lambda_l1 * pairwise_l1(boxes, gt_boxes)


def cost_matrix_from_arrays(
    scores: np.ndarray,
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    w: CostWeights,
    *,
    points: Optional[np.ndarray] = None,
    anchors: Optional[np.ndarray] = None,
    pred_boxes: Optional[np.ndarray] = None,
) -> CostMatrix:
    if w.location_mode == "predicted":
        if pred_boxes is None:
            raise ValueError("predicted location mode needs predicted boxes")
        loc = location_cost_matrix(gt_boxes, w, boxes=pred_boxes)
    elif anchors is not None:
        loc = location_cost_matrix(gt_boxes, w, boxes=anchors)
    else:
        loc = location_cost_matrix(gt_boxes, w, points=points)
    cls_raw = classification_cost_matrix(scores, gt_labels, w)
    total = w.lambda_cls * cls_raw + loc
    if not np.all(np.isfinite(total)):
        raise FloatingPointError("cost matrix has non-finite entries")
    return CostMatrix(total=total, cls_part=cls_raw, loc_part=loc, lambda_cls=w.lambda_cls)


def build_cost_matrix(cands: Sequence[Candidate], gts: Sequence[GroundTruth], w: CostWeights) -> CostMatrix:
    if not cands:
        raise ValueError("need at least one candidate")
    k = cands[0].class_scores.size
    if any(c.class_scores.size != k for c in cands):
        raise ValueError("inconsistent number of classes across candidates")
    kinds = {c.kind for c in cands}
    if len(kinds) != 1:
        raise ValueError(f"mixed candidate kinds {sorted(kinds)}")
    scores = np.stack([c.class_scores for c in cands])
    gt_boxes = np.array([g.box.as_list() for g in gts], dtype=np.float64).reshape(-1, 4)
    gt_labels = np.array([g.category for g in gts], dtype=np.int64)
    kwargs = {}
    if w.location_mode == "predicted":
        if any(c.predicted_box is None for c in cands):
            raise ValueError("predicted location mode needs a predicted_box on every candidate")
        kwargs["pred_boxes"] = np.array([c.predicted_box.as_list() for c in cands])
    elif kinds == {"anchor"}:
        kwargs["anchors"] = np.array([c.predefined_location.as_list() for c in cands])
    else:
        kwargs["points"] = np.array([[c.predefined_location.x, c.predefined_location.y] for c in cands])
    return cost_matrix_from_arrays(scores, gt_boxes, gt_labels, w, **kwargs)
