"""Train-and-evaluate runs for the five assignment regimes."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .. import metrics
from ..assign import AssignConfig, ThresholdRule
from ..costs import CostWeights
from ..geometry import pairwise_iou
from ..postprocess import nms_indices, score_histogram
from ..rng import derive_seed, stream
from .model import LossWeights, ModelConfig, ToyModel, forward
from .scene import Scene, SceneConfig, generate_scene
from .train import training_step

log = logging.getLogger(__name__)

REGIMES = ("o2m", "o2o_loc_predef", "o2o_loc_pred", "o2o_loc_cls_predef", "o2o_loc_cls_pred")
LOC_ONLY_REGIMES = ("o2o_loc_predef", "o2o_loc_pred")
LOC_CLS_REGIMES = ("o2o_loc_cls_predef", "o2o_loc_cls_pred")


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = SceneConfig()
    model: ModelConfig = ModelConfig()
    loss: LossWeights = LossWeights()
    lambda_cls: float = 2.0
    lambda_l1: float = 5.0
    lambda_iou: float = 2.0
    cls_cost_form: str = "bce"
    iou_kind: str = "giou"
    o2m_radius: float = 1.5       # cells; o2m positives lie within this distance of the gt center
    assign_strategy: str = "bipartite"  # one-to-one strategy: bipartite or mincost
    lr: float = 0.2
    steps: int = 3000
    batch_size: int = 4
    n_train: int = 512
    n_test: int = 24
    pre_nms_topk: int = 1000
    max_dets: int = 100
    nms_iou: float = 0.5
    tau: float = 0.3
    gap_iou_floor: float = 0.3
    hist_bins: int = 50
    stages: tuple = (0.1, 0.5, 1.0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        sub = {"scene": SceneConfig, "model": ModelConfig, "loss": LossWeights}
        for k, typ in sub.items():
            if k in d and isinstance(d[k], dict):
                d[k] = typ(**d[k])
        if "stages" in d:
            d["stages"] = tuple(d["stages"])
        return cls(**d)


def regime_settings(regime: str, cfg: ExperimentConfig) -> tuple[CostWeights, AssignConfig]:
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    with_cls = regime in LOC_CLS_REGIMES
    predicted = regime.endswith("_pred")
    weights = CostWeights(
        lambda_cls=cfg.lambda_cls if with_cls else 0.0,
        lambda_l1=cfg.lambda_l1,
        lambda_iou=cfg.lambda_iou,
        location_mode="predicted" if predicted else "predefined",
        cls_cost_form=cfg.cls_cost_form,
        iou_kind=cfg.iou_kind,
        focal_alpha=cfg.loss.focal_alpha,
        focal_gamma=cfg.loss.focal_gamma,
    )
    if regime == "o2m":
        theta = ThresholdRule("constant", cfg.lambda_l1 * cfg.o2m_radius / cfg.model.grid)
        return weights, AssignConfig("threshold", theta)
    return weights, AssignConfig(cfg.assign_strategy)


def make_scenes(cfg: SceneConfig, seed: int, name: str, n: int) -> list[Scene]:
    return [generate_scene(cfg, derive_seed(seed, name, k)) for k in range(n)]


def image_detections(scores: np.ndarray, boxes: np.ndarray, cfg: ExperimentConfig, use_nms: bool):
    """(boxes, scores, labels) for one image: every (cell, class) pair, top-k, optional NMS."""
    k = scores.shape[1]
    flat = scores.ravel()
    order = np.argsort(-flat, kind="stable")[:cfg.pre_nms_topk]
    det_scores = flat[order]
    det_labels = order % k
    det_boxes = boxes[order // k]
    if use_nms:
        keep = nms_indices(det_boxes, det_scores, det_labels, cfg.nms_iou, classwise=True)
        det_boxes, det_scores, det_labels = det_boxes[keep], det_scores[keep], det_labels[keep]
    sl = slice(0, cfg.max_dets)
    return det_boxes[sl], det_scores[sl], det_labels[sl]


def object_score_stats(scores: np.ndarray, boxes: np.ndarray, scene: Scene, iou_floor: float):
    """Per object: (top-1 score, gap to runner-up) over cells whose predicted box overlaps it."""
    gt_boxes, gt_labels = scene.gt_arrays()
    overlaps = pairwise_iou(boxes, gt_boxes)
    out = []
    for j, lab in enumerate(gt_labels):
        s = np.sort(scores[overlaps[:, j] >= iou_floor, lab])[::-1]
        if s.size >= 2:
            out.append((float(s[0]), float(s[0] - s[1])))
        elif s.size == 1:
            out.append((float(s[0]), None))
        else:
            out.append((None, None))
    return out


@dataclass
class EvalSummary:
    ap: float
    ap_nms: float
    ap50: float
    ap50_nms: float
    recall50: float
    recall50_nms: float
    mmr: float
    mmr_nms: float
    redundancy: float
    median_gap: Optional[float]
    mean_gap: Optional[float]
    median_top1: Optional[float]
    missing_gaps: int

    @property
    def nms_delta(self) -> float:
        return self.ap_nms - self.ap


def evaluate_model(model: ToyModel, scenes: list[Scene], cfg: ExperimentConfig) -> tuple[EvalSummary, list]:
    raw, nmsed, gts, gaps, tops, cell_scores = [], [], [], [], [], []
    for sc in scenes:
        scores, boxes = forward(model, sc.pixels)
        raw.append(image_detections(scores, boxes, cfg, use_nms=False))
        nmsed.append(image_detections(scores, boxes, cfg, use_nms=True))
        gts.append(sc.gt_arrays())
        for top1, gap in object_score_stats(scores, boxes, sc, cfg.gap_iou_floor):
            if top1 is not None:
                tops.append(top1)
            gaps.append(gap)
        cell_scores.append(scores.max(axis=1))
    ev_raw = metrics.evaluate(raw, gts, tau=cfg.tau)
    ev_nms = metrics.evaluate(nmsed, gts)
    defined = [g for g in gaps if g is not None]
    summary = EvalSummary(
        ap=ev_raw.ap, ap_nms=ev_nms.ap, ap50=ev_raw.ap50, ap50_nms=ev_nms.ap50,
        recall50=ev_raw.recall50, recall50_nms=ev_nms.recall50, mmr=ev_raw.mmr, mmr_nms=ev_nms.mmr,
        redundancy=float(ev_raw.redundancy),
        median_gap=float(np.median(defined)) if defined else None,
        mean_gap=float(np.mean(defined)) if defined else None,
        median_top1=float(np.median(tops)) if tops else None,
        missing_gaps=len(gaps) - len(defined),
    )
    return summary, cell_scores


@dataclass
class StageHistogram:
    stage: float
    step: int
    pooled_counts: list[int]
    per_image_counts: list[list[int]]


@dataclass
class ExperimentReport:
    regime: str
    seed: int
    steps: int
    n_scenes: int
    eval: EvalSummary
    loss_curve: list[tuple[int, float, float, float]]
    histograms: list[StageHistogram] = field(default_factory=list)
    hist_edges: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def row(self) -> dict:
        e = self.eval
        return {
            "regime": self.regime, "seed": self.seed,
            "ap": 100 * e.ap, "ap_nms": 100 * e.ap_nms, "nms_delta": 100 * e.nms_delta,
            "ap50": 100 * e.ap50, "ap50_nms": 100 * e.ap50_nms,
            "gap": e.median_gap, "top1": e.median_top1, "redundancy": e.redundancy,
            "recall50": e.recall50, "recall50_nms": e.recall50_nms,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eval"]["nms_delta"] = self.eval.nms_delta
        return d

    def write_histograms(self, directory) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        names = {0: "early", 1: "middle", 2: "late"}
        for k, h in enumerate(self.histograms):
            tag = names.get(k, f"stage{k}")
            path = directory / f"{self.regime}_seed{self.seed}_{tag}_pooled.csv"
            with open(path, "w", newline="") as fh:
                fh.write("# display_cap=10000\n")
                w = csv.writer(fh)
                w.writerow(["bin_lo", "bin_hi", "count"])
                for b, c in enumerate(h.pooled_counts):
                    w.writerow([f"{self.hist_edges[b]:.6g}", f"{self.hist_edges[b + 1]:.6g}", c])
            paths.append(path)
            path = directory / f"{self.regime}_seed{self.seed}_{tag}_per_image.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["image", "bin_lo", "bin_hi", "count"])
                for img, counts in enumerate(h.per_image_counts):
                    for b, c in enumerate(counts):
                        w.writerow([img, f"{self.hist_edges[b]:.6g}", f"{self.hist_edges[b + 1]:.6g}", c])
            paths.append(path)
        return paths


def _stage_histogram(model: ToyModel, scenes: list[Scene], cfg: ExperimentConfig, stage: float, step: int):
    per_image = []
    pooled = []
    for sc in scenes:
        scores, _ = forward(model, sc.pixels)
        s = scores.max(axis=1)
        pooled.append(s)
        per_image.append(score_histogram(s, cfg.hist_bins).counts.tolist())
    hist = score_histogram(np.concatenate(pooled), cfg.hist_bins)
    return StageHistogram(stage, step, hist.counts.tolist(), per_image), hist.edges.tolist()


def train_model(regime: str, seed: int, cfg: ExperimentConfig, n_scenes: Optional[int] = None,
                steps: Optional[int] = None, stage_scenes: Optional[list[Scene]] = None):
    n_scenes = cfg.n_train if n_scenes is None else n_scenes
    steps = cfg.steps if steps is None else steps
    weights, acfg = regime_settings(regime, cfg)
    train = make_scenes(cfg.scene, seed, "scenes-train", n_scenes)
    model = ToyModel.init(cfg.model, stream(seed, "init"))
    order_rng = stream(seed, "batches")
    stage_steps = sorted({max(1, int(round(f * steps))) for f in cfg.stages})
    curve, hists, edges = [], [], []
    perm = order_rng.permutation(n_scenes)
    pos = 0
    features: dict = {}
    for step in range(1, steps + 1):
        if pos + cfg.batch_size > n_scenes:
            perm = order_rng.permutation(n_scenes)
            pos = 0
        batch = [train[i] for i in perm[pos:pos + cfg.batch_size]]
        pos += cfg.batch_size
        res = training_step(model, batch, weights, acfg, cfg.lr, cfg.loss, features)
        if step == 1 or step % max(1, steps // 20) == 0 or step == steps:
            curve.append((step, res.loss.cls_loss, res.loss.loc_loss, res.loss.total))
        if stage_scenes is not None and step in stage_steps:
            frac = step / steps
            h, edges = _stage_histogram(model, stage_scenes, cfg, frac, step)
            hists.append(h)
    return model, curve, hists, edges


def run_experiment(regime: str, n_scenes: Optional[int] = None, steps: Optional[int] = None, seed: int = 0,
                   cfg: ExperimentConfig = ExperimentConfig()) -> ExperimentReport:
    t0 = time.perf_counter()
    steps = cfg.steps if steps is None else steps
    n_scenes = cfg.n_train if n_scenes is None else n_scenes
    test = make_scenes(cfg.scene, seed, "scenes-test", cfg.n_test)
    model, curve, hists, edges = train_model(regime, seed, cfg, n_scenes, steps, stage_scenes=test)
    summary, _ = evaluate_model(model, test, cfg)
    report = ExperimentReport(regime, seed, steps, n_scenes, summary, curve, hists, edges)
    report.seconds = time.perf_counter() - t0
    report._model = model  # not serialized; lets callers checkpoint
    return report
