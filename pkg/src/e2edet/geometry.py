"""Axis-aligned box arithmetic in normalized corner coordinates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise ValueError(f"non-finite box coordinates: {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box has negative extent: {self}")

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "BBox":
        if len(seq) != 4:
            raise ValueError(f"box needs 4 coordinates, got {len(seq)}")
        return cls(*(float(v) for v in seq))

    def to_cxcywh(self) -> tuple[float, float, float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2),
                self.x2 - self.x1, self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class GridPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
            raise ValueError(f"grid point outside the unit square: {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class GroundTruth:
    box: BBox
    category: int

    def __post_init__(self):
        if self.category < 0:
            raise ValueError(f"negative category {self.category}")


def area(b: BBox) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def _intersection(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    return iw * ih


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when either box has zero area."""
    area_a, area_b = area(a), area(b)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = _intersection(a, b)
    return inter / (area_a + area_b - inter)


def giou(a: BBox, b: BBox) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box."""
    area_a, area_b = area(a), area(b)
    inter = _intersection(a, b)
    union = area_a + area_b - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if enclose <= 0.0:
        return 0.0
    iou_ab = inter / union if union > 0.0 else 0.0
    return iou_ab - (enclose - union) / enclose


def l1_distance(a: BBox, b: BBox) -> float:
    return abs(a.x1 - b.x1) + abs(a.y1 - b.y1) + abs(a.x2 - b.x2) + abs(a.y2 - b.y2)


def point_center_distance(p: GridPoint, b: BBox) -> float:
    cx, cy = b.center
    return math.hypot(p.x - cx, p.y - cy)


# Vectorized kernels on (N, 4) corner arrays. Used by the cost, NMS and metric hot paths.

def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, M) IoU matrix; entries involving a zero-area box are 0."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a, area_b = box_areas(a), box_areas(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid)
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a, area_b = box_areas(a), box_areas(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou_ab = np.zeros_like(inter)
    np.divide(inter, union, out=iou_ab, where=union > 0)
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = erb - elt
    enclose = ewh[..., 0] * ewh[..., 1]
    out = np.zeros_like(inter)
    np.divide(enclose - union, enclose, out=out, where=enclose > 0)
    return np.where(enclose > 0, iou_ab - out, 0.0)


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(-1)


def pairwise_center_distance(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    centers = 0.5 * (boxes[:, :2] + boxes[:, 2:])
    return np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=-1)
