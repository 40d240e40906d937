"""Crowded-scene study: how an NMS threshold trades duplicates against overlapping true objects.

Two kinds of rows are produced. The annotation rows feed the ground-truth boxes
themselves through NMS, so any recall lost there is lost by NMS alone. The
model rows evaluate an end-to-end (one-to-one, classification-aware) detector
with and without NMS at several thresholds.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .. import metrics
from ..postprocess import nms_indices
from .experiment import ExperimentConfig, image_detections, make_scenes, train_model
from .model import forward
from .scene import Scene, SceneConfig

CROWD_SCENE = SceneConfig(
    num_classes=1, min_objects=3, max_objects=5, crowded=True, crowd_count=2,
    crowd_iou=0.3, crowd_iou_max=0.75,
)


@dataclass(frozen=True)
class CrowdConfig:
    experiment: ExperimentConfig = ExperimentConfig(scene=CROWD_SCENE)
    regime: str = "o2o_loc_cls_pred"
    nms_thresholds: tuple = (0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    oracle_threshold: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nms_thresholds"] = list(self.nms_thresholds)
        d["experiment"] = self.experiment.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrowdConfig":
        d = dict(d)
        if isinstance(d.get("experiment"), dict):
            d["experiment"] = ExperimentConfig.from_dict(d["experiment"])
        if "nms_thresholds" in d:
            d["nms_thresholds"] = tuple(d["nms_thresholds"])
        return cls(**d)


@dataclass
class CrowdRow:
    source: str                 # "annotation" or "model"
    nms_iou: Optional[float]    # None means no NMS
    ap50: float
    mmr: float
    recall: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CrowdReport:
    seed: int
    rows: list[CrowdRow] = field(default_factory=list)
    seconds: float = 0.0

    def row(self, source: str, nms_iou: Optional[float]) -> CrowdRow:
        for r in self.rows:
            if r.source == source and r.nms_iou == nms_iou:
                return r
        raise KeyError((source, nms_iou))

    def to_dict(self) -> dict:
        return {"seed": self.seed, "seconds": self.seconds, "rows": [r.to_dict() for r in self.rows]}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["source", "nms_iou", "ap50", "mmr", "recall"])
            for r in self.rows:
                w.writerow([r.source, "none" if r.nms_iou is None else r.nms_iou,
                            f"{r.ap50:.6f}", f"{r.mmr:.6f}", f"{r.recall:.6f}"])
        return path


def annotation_detections(scene: Scene, nms_iou: Optional[float]):
    """Ground truth as unit-score detections, optionally passed through NMS (annotation order breaks ties)."""
    boxes, labels = scene.gt_arrays()
    scores = np.ones(len(labels))
    if nms_iou is not None:
        keep = nms_indices(boxes, scores, labels, nms_iou, classwise=True)
        boxes, scores, labels = boxes[keep], scores[keep], labels[keep]
    return boxes, scores, labels


def _row(source: str, nms_iou, dets, gts) -> CrowdRow:
    return CrowdRow(
        source, nms_iou,
        ap50=metrics.evaluate_ap(dets, gts, (0.5,)).ap,
        mmr=metrics.evaluate_mmr(dets, gts, 0.5),
        recall=metrics.recall_at(dets, gts, 0.5),
    )


def annotation_rows(scenes: list[Scene], thresholds) -> list[CrowdRow]:
    gts = [sc.gt_arrays() for sc in scenes]
    rows = []
    for thr in (None, *thresholds):
        dets = [annotation_detections(sc, thr) for sc in scenes]
        rows.append(_row("annotation", thr, dets, gts))
    return rows


def model_rows(model, scenes: list[Scene], cfg: ExperimentConfig, thresholds) -> list[CrowdRow]:
    gts = [sc.gt_arrays() for sc in scenes]
    outputs = [forward(model, sc.pixels) for sc in scenes]
    rows = [_row("model", None, [image_detections(s, b, cfg, False) for s, b in outputs], gts)]
    for thr in thresholds:
        c = replace(cfg, nms_iou=thr)
        rows.append(_row("model", thr, [image_detections(s, b, c, True) for s, b in outputs], gts))
    return rows


def run_crowd(seed: int = 0, cfg: CrowdConfig = CrowdConfig(), model=None) -> CrowdReport:
    """Train the end-to-end regime on crowded scenes (unless ``model`` is given) and sweep NMS."""
    t0 = time.perf_counter()
    exp = cfg.experiment
    thresholds = tuple(sorted(set(cfg.nms_thresholds) | {cfg.oracle_threshold}))
    test = make_scenes(exp.scene, seed, "scenes-test", exp.n_test)
    if model is None:
        model, *_ = train_model(cfg.regime, seed, exp)
    report = CrowdReport(seed)
    report.rows = annotation_rows(test, thresholds) + model_rows(model, test, exp, thresholds)
    report.seconds = time.perf_counter() - t0
    report._model = model
    return report
