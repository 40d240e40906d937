"""One-hidden-layer dense detector on an S x S grid of point candidates.

Each cell sees a (2r+1) x (2r+1) window of the pooled image and predicts K
sigmoid class scores plus four softplus side distances (left, top, right,
bottom) from the cell center. Gradients are derived by hand.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PARAM_NAMES = ("W1", "b1", "W2", "b2")


@dataclass(frozen=True)
class ModelConfig:
    grid: int = 16
    patch_radius: int = 3
    hidden: int = 24
    num_classes: int = 3
    box_scale: float = 0.0625   # side distance = box_scale * softplus(z)
    prior_prob: float = 0.01
    init_side: float = 1.5      # initial softplus output of the box head

    @property
    def input_dim(self) -> int:
        return 3 * (2 * self.patch_radius + 1) ** 2

    @property
    def out_dim(self) -> int:
        return self.num_classes + 4

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def to_dict(self) -> dict:
        return asdict(self)


class ToyModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "ToyModel":
        d, h, o, k = cfg.input_dim, cfg.hidden, cfg.out_dim, cfg.num_classes
        b2 = np.zeros(o)
        b2[:k] = -np.log((1 - cfg.prior_prob) / cfg.prior_prob)
        b2[k:] = np.log(np.expm1(cfg.init_side))
        params = {
            "W1": rng.standard_normal((d, h)) / np.sqrt(d),
            "b1": np.zeros(h),
            "W2": 0.01 * rng.standard_normal((h, o)),
            "b2": b2,
        }
        return cls(cfg, params)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "ToyModel":
        d, h, o = cfg.input_dim, cfg.hidden, cfg.out_dim
        return cls(cfg, {"W1": np.zeros((d, h)), "b1": np.zeros(h), "W2": np.zeros((h, o)), "b2": np.zeros(o)})

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ToyModel":
        return ToyModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for k in PARAM_NAMES:
            p = self.params[k]
            self.params[k] = np.asarray(theta[i:i + p.size], dtype=np.float64).reshape(p.shape)
            i += p.size

    def save(self, path) -> None:
        """Flat little-endian float64 parameters in ``path`` plus a JSON header next to it."""
        path = Path(path)
        self.flat().astype("<f8").tofile(path)
        header = {
            "format": "e2edet-toymodel",
            "version": 1,
            "dtype": "<f8",
            "config": self.cfg.to_dict(),
            "layout": [{"name": k, "shape": list(self.params[k].shape)} for k in PARAM_NAMES],
        }
        path.with_suffix(".json").write_text(json.dumps(header, indent=2))

    @classmethod
    def load(cls, path) -> "ToyModel":
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        cfg = ModelConfig.from_dict(header["config"])
        model = cls.zeros(cfg)
        theta = np.fromfile(path, dtype=header["dtype"]).astype(np.float64)
        if theta.size != model.n_params:
            raise ValueError(f"checkpoint has {theta.size} values, expected {model.n_params}")
        model.set_flat(theta)
        return model


def cell_centers(grid: int) -> np.ndarray:
    """(grid*grid, 2) normalized (x, y) cell centers in row-major order."""
    c = (np.arange(grid) + 0.5) / grid
    xs, ys = np.meshgrid(c, c)
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def extract_patches(pixels: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """(grid*grid, input_dim) centered patch features for one image."""
    h, w, _ = pixels.shape
    if h % cfg.grid or w % cfg.grid:
        raise ValueError(f"image size {h}x{w} is not a multiple of the grid {cfg.grid}")
    ph, pw = h // cfg.grid, w // cfg.grid
    fmap = pixels.reshape(cfg.grid, ph, cfg.grid, pw, 3).mean(axis=(1, 3)) - 0.5
    r = cfg.patch_radius
    padded = np.pad(fmap, ((r, r), (r, r), (0, 0)))
    win = sliding_window_view(padded, (2 * r + 1, 2 * r + 1), axis=(0, 1))  # (g, g, 3, k, k)
    return np.ascontiguousarray(win.reshape(cfg.grid * cfg.grid, -1))


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ForwardCache:
    x: np.ndarray
    h: np.ndarray
    z_cls: np.ndarray
    z_box: np.ndarray
    scores: np.ndarray
    dist: np.ndarray
    boxes: np.ndarray


def forward_features(model: ToyModel, x: np.ndarray, centers: np.ndarray) -> ForwardCache:
    p = model.params
    k = model.cfg.num_classes
    h = np.tanh(x @ p["W1"] + p["b1"])
    out = h @ p["W2"] + p["b2"]
    z_cls, z_box = out[:, :k], out[:, k:]
    dist = model.cfg.box_scale * _softplus(z_box)
    boxes = np.concatenate([centers - dist[:, :2], centers + dist[:, 2:]], axis=1)
    return ForwardCache(x, h, z_cls, z_box, _sigmoid(z_cls), dist, boxes)


def forward(model: ToyModel, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell class scores (S^2, K) and decoded boxes (S^2, 4)."""
    x = extract_patches(pixels, model.cfg)
    cache = forward_features(model, x, cell_centers(model.cfg.grid))
    return cache.scores, cache.boxes


# ---- losses and their gradients -------------------------------------------------------

def focal_loss_and_grad(z: np.ndarray, target: np.ndarray, alpha: Optional[float], gamma: float):
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logit.

    ``alpha=None`` and ``gamma=0`` give plain binary cross-entropy.
    """
    p = _sigmoid(z)
    log_p = -_softplus(-z)
    log_q = -_softplus(z)
    a_pos = 1.0 if alpha is None else alpha
    a_neg = 1.0 if alpha is None else 1.0 - alpha
    q = 1.0 - p
    pos = target > 0.5
    loss = np.where(pos, -a_pos * q**gamma * log_p, -a_neg * p**gamma * log_q)
    g_pos = a_pos * (gamma * q**gamma * p * log_p - q ** (gamma + 1))
    g_neg = a_neg * (p ** (gamma + 1) - gamma * p**gamma * q * log_q)
    return loss, np.where(pos, g_pos, g_neg)


def giou_and_grad(pred: np.ndarray, gt: np.ndarray):
    """Row-wise GIoU between (P, 4) predicted and gt boxes, and d GIoU / d pred."""
    x1, y1, x2, y2 = pred.T
    g1, g2, g3, g4 = gt.T
    area_p = (x2 - x1) * (y2 - y1)
    area_g = (g3 - g1) * (g4 - g2)
    iw_raw = np.minimum(x2, g3) - np.maximum(x1, g1)
    ih_raw = np.minimum(y2, g4) - np.maximum(y1, g2)
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    union = area_p + area_g - inter
    cw = np.maximum(x2, g3) - np.minimum(x1, g1)
    ch = np.maximum(y2, g4) - np.minimum(y1, g2)
    enc = cw * ch
    giou = inter / union - 1.0 + union / enc

    d_inter = 1.0 / union + inter / union**2 - 1.0 / enc
    d_area = -inter / union**2 + 1.0 / enc
    d_enc = -union / enc**2
    wx, wy = (iw_raw > 0).astype(float), (ih_raw > 0).astype(float)
    dI = np.stack([
        -ih * wx * (x1 > g1),
        -iw * wy * (y1 > g2),
        ih * wx * (x2 < g3),
        iw * wy * (y2 < g4),
    ], axis=1)
    dA = np.stack([-(y2 - y1), -(x2 - x1), (y2 - y1), (x2 - x1)], axis=1)
    dC = np.stack([
        -ch * (x1 < g1),
        -cw * (y1 < g2),
        ch * (x2 > g3),
        cw * (y2 > g4),
    ], axis=1)
    grad = d_inter[:, None] * dI + d_area[:, None] * dA + d_enc[:, None] * dC
    return giou, grad


@dataclass
class Targets:
    """Supervision for a stacked batch of cells."""
    pos_cells: np.ndarray     # (P,) indices into the stacked cells, repeats allowed
    pos_boxes: np.ndarray     # (P, 4) matched gt boxes
    pos_labels: np.ndarray    # (P,) matched gt categories
    n_cells: int
    num_classes: int

    @property
    def normalizer(self) -> float:
        return float(max(1, self.pos_cells.size))

    def class_targets(self) -> np.ndarray:
        t = np.zeros((self.n_cells, self.num_classes))
        t[self.pos_cells, self.pos_labels] = 1.0
        return t


@dataclass
class TrainLoss:
    cls_loss: float
    loc_loss: float
    total: float
    n_positive: int

    def to_dict(self) -> dict:
        return asdict(self)


def loss_and_grad(model: ToyModel, cache: ForwardCache, targets: Targets, lw: LossWeights,
                  want_grad: bool = True):
    """Detection loss: classification on every cell, box regression on positives only.

    Both terms are divided by the number of positives.
    """
    norm = targets.normalizer
    alpha = lw.focal_alpha if lw.focal_gamma > 0 else None
    cls_el, dz_cls = focal_loss_and_grad(cache.z_cls, targets.class_targets(), alpha, lw.focal_gamma)
    cls_loss = lw.cls * cls_el.sum() / norm

    pc = targets.pos_cells
    if pc.size:
        pred = cache.boxes[pc]
        diff = pred - targets.pos_boxes
        giou, dgiou = giou_and_grad(pred, targets.pos_boxes)
        loc_loss = (lw.l1 * np.abs(diff).sum() + lw.giou * (1.0 - giou).sum()) / norm
    else:
        loc_loss = 0.0
    loss = TrainLoss(float(cls_loss), float(loc_loss), float(cls_loss + loc_loss), int(pc.size))
    if not want_grad:
        return loss, None

    p = model.params
    d_out = np.zeros((cache.x.shape[0], model.cfg.out_dim))
    d_out[:, :model.cfg.num_classes] = lw.cls * dz_cls / norm
    if pc.size:
        d_box = (lw.l1 * np.sign(diff) - lw.giou * dgiou) / norm
        # box = [cx - l, cy - t, cx + r, cy + b]
        d_dist = d_box * np.array([-1.0, -1.0, 1.0, 1.0])
        d_zbox = d_dist * model.cfg.box_scale * _sigmoid(cache.z_box[pc])
        np.add.at(d_out[:, model.cfg.num_classes:], pc, d_zbox)
    grads = {"W2": cache.h.T @ d_out, "b2": d_out.sum(axis=0)}
    d_a = (d_out @ p["W2"].T) * (1.0 - cache.h**2)
    grads["W1"] = cache.x.T @ d_a
    grads["b1"] = d_a.sum(axis=0)
    return loss, grads
