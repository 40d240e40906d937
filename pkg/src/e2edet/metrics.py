"""Detection metrics: COCO-style AP, log-average miss rate, recall and redundancy.

Images are evaluated independently. Each image's detections may be given as a
list of :class:`Detection` or as a ``(boxes, scores, labels)`` array triple;
ground truths as a list of :class:`GroundTruth` or a ``(boxes, labels)`` pair.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .geometry import pairwise_iou

COCO_IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))
RECALL_POINTS = np.arange(101) / 100.0
MMR_FPPI_REFS = np.logspace(-2.0, 0.0, 9)


def _det_arrays(dets):
    if isinstance(dets, tuple):
        boxes, scores, labels = dets
        return (np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                np.asarray(scores, dtype=np.float64).ravel(),
                np.asarray(labels, dtype=np.int64).ravel())
    boxes = np.array([d.box.as_list() for d in dets], dtype=np.float64).reshape(-1, 4)
    return boxes, np.array([d.score for d in dets], dtype=np.float64), np.array([d.category for d in dets], dtype=np.int64)


def _gt_arrays(gts):
    if isinstance(gts, tuple):
        boxes, labels = gts
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(labels, dtype=np.int64).ravel()
    return (np.array([g.box.as_list() for g in gts], dtype=np.float64).reshape(-1, 4),
            np.array([g.category for g in gts], dtype=np.int64))


def _cap(boxes, scores, labels, max_dets):
    if max_dets is None or scores.size <= max_dets:
        return boxes, scores, labels
    keep = np.sort(np.argsort(-scores, kind="stable")[:max_dets])
    return boxes[keep], scores[keep], labels[keep]


def _prepare(dets_per_image, gts_per_image, max_dets=None):
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths cover different numbers of images")
    dets = [_cap(*_det_arrays(d), max_dets) for d in dets_per_image]
    gts = [_gt_arrays(g) for g in gts_per_image]
    return dets, gts


def _match_image(boxes, scores, gt_boxes, iou_thr, class_ok) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching in descending score order. Each detection takes the unmatched
    gt with the highest IoU (lowest index on ties) if that IoU reaches ``iou_thr``.

    Returns per-detection TP flags and per-gt matched flags.
    """
    n, m = scores.size, gt_boxes.shape[0]
    tp = np.zeros(n, dtype=bool)
    matched = np.zeros(m, dtype=bool)
    if n == 0 or m == 0:
        return tp, matched
    overlaps = pairwise_iou(boxes, gt_boxes)
    overlaps = np.where(class_ok, overlaps, -1.0)
    for i in np.argsort(-scores, kind="stable"):
        cand = np.where(matched, -1.0, overlaps[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            tp[i] = True
            matched[j] = True
    return tp, matched


def _pooled_flags(dets, gts, iou_thr, category=None, class_agnostic=False):
    """Score-ordered TP flags pooled across images, plus the gt count."""
    all_scores, all_tp = [], []
    n_gt = 0
    for (boxes, scores, labels), (gt_boxes, gt_labels) in zip(dets, gts):
        if category is not None:
            dsel, gsel = labels == category, gt_labels == category
            boxes, scores, labels = boxes[dsel], scores[dsel], labels[dsel]
            gt_boxes, gt_labels = gt_boxes[gsel], gt_labels[gsel]
        class_ok = True if class_agnostic else labels[:, None] == gt_labels[None, :]
        tp, _ = _match_image(boxes, scores, gt_boxes, iou_thr, class_ok)
        all_scores.append(scores)
        all_tp.append(tp)
        n_gt += gt_boxes.shape[0]
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    return tp[order], n_gt


def interpolated_ap(tp_sorted: np.ndarray, n_gt: int) -> tuple[float, np.ndarray]:
    """101-point interpolated AP from score-ordered TP flags."""
    if n_gt <= 0:
        raise ValueError("AP undefined without ground truth")
    tp_cum = np.cumsum(tp_sorted)
    fp_cum = np.cumsum(~tp_sorted)
    if tp_sorted.size == 0:
        curve = np.zeros(RECALL_POINTS.size)
        return 0.0, curve
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    curve = np.zeros(RECALL_POINTS.size)
    ok = idx < recall.size
    curve[ok] = envelope[idx[ok]]
    return math.fsum(curve.tolist()) / curve.size, curve


@dataclass
class EvalResult:
    ap: float = 0.0
    ap50: float = 0.0
    recall50: float = 0.0
    mmr: float = 1.0
    redundancy: Optional[float] = None
    ap_per_threshold: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)  # iou threshold -> mean interpolated precision at RECALL_POINTS

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap50": self.ap50,
            "recall50": self.recall50,
            "mmr": self.mmr,
            "redundancy": self.redundancy,
            "ap_per_threshold": {f"{k:.2f}": v for k, v in self.ap_per_threshold.items()},
        }

    def write_pr_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iou_threshold", "recall", "precision"])
            for thr, curve in self.curves.items():
                for r, p in zip(RECALL_POINTS, curve):
                    writer.writerow([f"{thr:.2f}", f"{r:.2f}", f"{p:.6g}"])


def evaluate_ap(dets_per_image, gts_per_image, iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
                max_dets: Optional[int] = None) -> EvalResult:
    """Category-averaged, threshold-averaged 101-point AP."""
    dets, gts = _prepare(dets_per_image, gts_per_image, max_dets)
    categories = sorted({int(c) for _, labels in gts for c in labels})
    if not categories:
        raise ValueError("no ground truth in any image")
    result = EvalResult()
    for thr in iou_thresholds:
        aps, curves = [], []
        for c in categories:
            tp, n_gt = _pooled_flags(dets, gts, thr, category=c)
            ap_c, curve = interpolated_ap(tp, n_gt)
            aps.append(ap_c)
            curves.append(curve)
        result.ap_per_threshold[float(thr)] = math.fsum(aps) / len(aps)
        result.curves[float(thr)] = np.mean(curves, axis=0)
    result.ap = math.fsum(result.ap_per_threshold.values()) / len(result.ap_per_threshold)
    result.ap50 = result.ap_per_threshold.get(0.5, result.ap50)
    return result


def miss_rate_curve(dets_per_image, gts_per_image, iou_thr: float = 0.5, max_dets: Optional[int] = None):
    """(fppi, miss_rate) along the score-ordered detection list, starting from the empty operating point."""
    dets, gts = _prepare(dets_per_image, gts_per_image, max_dets)
    if not dets:
        raise ValueError("need at least one image")
    tp, n_gt = _pooled_flags(dets, gts, iou_thr)
    if n_gt == 0:
        raise ValueError("miss rate undefined without ground truth")
    tp_cum = np.concatenate([[0], np.cumsum(tp)])
    fp_cum = np.concatenate([[0], np.cumsum(~tp)])
    return fp_cum / len(dets), 1.0 - tp_cum / n_gt


def evaluate_mmr(dets_per_image, gts_per_image, iou_thr: float = 0.5, max_dets: Optional[int] = None,
                 refs: np.ndarray = MMR_FPPI_REFS) -> float:
    """Log-average miss rate over FPPI in [1e-2, 1] (Caltech convention)."""
    fppi, mr = miss_rate_curve(dets_per_image, gts_per_image, iou_thr, max_dets)
    sampled = []
    for ref in refs:
        ok = np.flatnonzero(fppi <= ref)
        sampled.append(mr[ok[-1]] if ok.size else 1.0)
    sampled = np.asarray(sampled)
    if np.any(sampled <= 0.0):
        return 0.0
    return float(np.exp(np.mean(np.log(sampled))))


def recall_at(dets_per_image, gts_per_image, iou_thr: float = 0.5, max_dets: Optional[int] = None,
              class_agnostic: bool = False) -> float:
    dets, gts = _prepare(dets_per_image, gts_per_image, max_dets)
    matched_total, n_gt = 0, 0
    for (boxes, scores, labels), (gt_boxes, gt_labels) in zip(dets, gts):
        class_ok = True if class_agnostic else labels[:, None] == gt_labels[None, :]
        _, matched = _match_image(boxes, scores, gt_boxes, iou_thr, class_ok)
        matched_total += int(matched.sum())
        n_gt += gt_boxes.shape[0]
    if n_gt == 0:
        raise ValueError("recall undefined without ground truth")
    return matched_total / n_gt


def redundancy(dets_per_image, gts_per_image, tau: float = 0.3, iou_thr: float = 0.5) -> float:
    """Mean number of same-category detections above ``tau`` overlapping each gt by ``iou_thr``."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    dets, gts = _prepare(dets_per_image, gts_per_image)
    counts = []
    for (boxes, scores, labels), (gt_boxes, gt_labels) in zip(dets, gts):
        if gt_boxes.shape[0] == 0:
            continue
        keep = scores > tau
        overlaps = pairwise_iou(boxes[keep], gt_boxes)
        hit = (overlaps >= iou_thr) & (labels[keep][:, None] == gt_labels[None, :])
        counts.extend(hit.sum(axis=0).tolist())
    if not counts:
        raise ValueError("redundancy undefined without ground truth")
    return float(np.mean(counts))


def evaluate(dets_per_image, gts_per_image, *, iou_thresholds=COCO_IOU_THRESHOLDS,
             max_dets: Optional[int] = None, tau: Optional[float] = None) -> EvalResult:
    """AP, AP50, recall@0.5 and mMR in one pass; redundancy when ``tau`` is given."""
    result = evaluate_ap(dets_per_image, gts_per_image, iou_thresholds, max_dets)
    if 0.5 not in result.ap_per_threshold:
        result.ap50 = evaluate_ap(dets_per_image, gts_per_image, (0.5,), max_dets).ap
    result.recall50 = recall_at(dets_per_image, gts_per_image, 0.5, max_dets)
    result.mmr = evaluate_mmr(dets_per_image, gts_per_image, 0.5, max_dets)
    if tau is not None:
        result.redundancy = redundancy(dets_per_image, gts_per_image, tau, 0.5)
    return result
