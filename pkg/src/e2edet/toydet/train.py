"""Assignment-driven training of the toy detector."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..assign import AssignConfig, assign
from ..costs import Candidate, CostWeights, cost_matrix_from_arrays
from ..geometry import BBox, GridPoint
from .model import (
    ForwardCache,
    LossWeights,
    Targets,
    ToyModel,
    TrainLoss,
    cell_centers,
    extract_patches,
    forward_features,
    loss_and_grad,
)
from .scene import Scene

log = logging.getLogger(__name__)


def stack_batch(model: ToyModel, scenes: Sequence[Scene],
                feature_cache: Optional[dict] = None) -> tuple[np.ndarray, np.ndarray]:
    """Stacked patch features and cell centers; ``feature_cache`` maps id(scene) -> patches."""
    feats = []
    for sc in scenes:
        if feature_cache is None:
            feats.append(extract_patches(sc.pixels, model.cfg))
            continue
        key = id(sc)
        if key not in feature_cache:
            feature_cache[key] = extract_patches(sc.pixels, model.cfg)
        feats.append(feature_cache[key])
    x = np.concatenate(feats)
    centers = np.tile(cell_centers(model.cfg.grid), (len(scenes), 1))
    return x, centers


def candidates_for_image(model: ToyModel, cache: ForwardCache, image: int) -> list[Candidate]:
    """Candidate objects for one image of a stacked forward pass (slow path, for inspection)."""
    n = model.cfg.grid**2
    sl = slice(image * n, (image + 1) * n)
    centers = cell_centers(model.cfg.grid)
    return [
        Candidate("point", GridPoint(*centers[i]), cache.scores[sl][i], BBox.from_seq(cache.boxes[sl][i]))
        for i in range(n)
    ]


def build_targets(model: ToyModel, cache: ForwardCache, scenes: Sequence[Scene], weights: CostWeights,
                  cfg: AssignConfig) -> Targets:
    n = model.cfg.grid**2
    centers = cell_centers(model.cfg.grid)
    cells, boxes, labels = [], [], []
    for b, sc in enumerate(scenes):
        gt_boxes, gt_labels = sc.gt_arrays()
        sl = slice(b * n, (b + 1) * n)
        cm = cost_matrix_from_arrays(cache.scores[sl], gt_boxes, gt_labels, weights,
                                     points=centers, pred_boxes=cache.boxes[sl])
        a = assign(cm, cfg)
        pairs = a.pairs()
        if a.mode == "one_to_many":
            # a sample claimed by several objects regresses to the cheapest one
            best: dict[int, int] = {}
            for i, j in pairs:
                if i not in best or cm.total[i, j] < cm.total[i, best[i]]:
                    best[i] = j
            pairs = sorted(best.items())
            if not pairs:
                log.warning("image %d: no positive samples; localization loss is zero", b)
        for i, j in pairs:
            cells.append(b * n + i)
            boxes.append(gt_boxes[j])
            labels.append(gt_labels[j])
    return Targets(
        pos_cells=np.asarray(cells, dtype=np.int64),
        pos_boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        pos_labels=np.asarray(labels, dtype=np.int64),
        n_cells=n * len(scenes),
        num_classes=model.cfg.num_classes,
    )


@dataclass
class StepResult:
    loss: TrainLoss
    targets: Targets


def training_step(model: ToyModel, scenes: Sequence[Scene], weights: CostWeights, cfg: AssignConfig,
                  lr: float, loss_weights: LossWeights = LossWeights(),
                  feature_cache: Optional[dict] = None) -> StepResult:
    """Forward, assign, compute the loss and take one gradient-descent step in place."""
    x, centers = stack_batch(model, scenes, feature_cache)
    cache = forward_features(model, x, centers)
    targets = build_targets(model, cache, scenes, weights, cfg)
    loss, grads = loss_and_grad(model, cache, targets, loss_weights)
    for k, g in grads.items():
        model.params[k] -= lr * g
    return StepResult(loss, targets)


def batch_loss(model: ToyModel, scenes: Sequence[Scene], targets: Targets, loss_weights: LossWeights) -> TrainLoss:
    x, centers = stack_batch(model, scenes)
    return loss_and_grad(model, forward_features(model, x, centers), targets, loss_weights, want_grad=False)[0]


def gradient_check(model: ToyModel, scenes: Sequence[Scene], weights: CostWeights, cfg: AssignConfig,
                   loss_weights: LossWeights, coords: np.ndarray, eps: float = 1e-6):
    """Analytic vs central-difference gradient at flat parameter indices ``coords``.

    The assignment is frozen at the current parameters so the loss is a smooth
    function of the weights. Returns (analytic, numeric).
    """
    x, centers = stack_batch(model, scenes)
    cache = forward_features(model, x, centers)
    targets = build_targets(model, cache, scenes, weights, cfg)
    _, grads = loss_and_grad(model, cache, targets, loss_weights)
    analytic = np.concatenate([grads[k].ravel() for k in ("W1", "b1", "W2", "b2")])[coords]
    theta = model.flat()
    probe = model.copy()
    numeric = np.empty(len(coords))
    for n, i in enumerate(coords):
        vals = []
        for s in (1.0, -1.0):
            t = theta.copy()
            t[i] += s * eps
            probe.set_flat(t)
            vals.append(loss_and_grad(probe, forward_features(probe, x, centers), targets, loss_weights, False)[0].total)
        numeric[n] = (vals[0] - vals[1]) / (2 * eps)
    return analytic, numeric
