"""Synthetic scenes: colored, outlined rectangles on a noisy background."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from ..geometry import BBox, GroundTruth, pairwise_iou

PALETTE = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.80, 0.30],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.85, 0.85],
])


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 32
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 0.12
    max_size: float = 0.30
    crowded: bool = False
    crowd_count: int = 2          # objects placed overlapping an earlier one
    crowd_iou: float = 0.3        # minimum IoU for a crowded pair
    crowd_iou_max: float = 0.75
    max_overlap: float = 0.1      # ceiling on IoU between non-crowded objects
    noise: float = 0.08
    max_retries: int = 200
    snap: bool = True             # align box edges to the pixel grid so they are recoverable

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.min_size <= self.max_size <= 1:
            raise ValueError("need 0 < min_size <= max_size <= 1")
        if not 1 <= self.num_classes <= len(PALETTE):
            raise ValueError(f"num_classes must be in [1, {len(PALETTE)}]")
        if self.crowded and not 0 < self.crowd_iou <= self.crowd_iou_max < 1:
            raise ValueError("need 0 < crowd_iou <= crowd_iou_max < 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Scene:
    width: int
    height: int
    pixels: np.ndarray  # (H, W, 3) in [0, 1]
    objects: list[GroundTruth]
    seed: int
    config: SceneConfig = field(repr=False, default_factory=SceneConfig)

    def gt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        boxes = np.array([g.box.as_list() for g in self.objects], dtype=np.float64).reshape(-1, 4)
        labels = np.array([g.category for g in self.objects], dtype=np.int64)
        return boxes, labels

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "size": [self.width, self.height],
            "objects": [{"box": g.box.as_list(), "category": g.category} for g in self.objects],
        }


class InfeasibleSceneError(RuntimeError):
    pass


def _random_box(rng: np.random.Generator, cfg: SceneConfig) -> np.ndarray:
    w, h = rng.uniform(cfg.min_size, cfg.max_size, size=2)
    x1 = rng.uniform(0.0, 1.0 - w)
    y1 = rng.uniform(0.0, 1.0 - h)
    return np.array([x1, y1, x1 + w, y1 + h])


def _overlapping_box(rng: np.random.Generator, cfg: SceneConfig, anchor: np.ndarray) -> np.ndarray:
    # Shift a similar-sized box from the anchor by a fraction of its size.
    aw, ah = anchor[2] - anchor[0], anchor[3] - anchor[1]
    w = np.clip(aw * rng.uniform(0.8, 1.25), cfg.min_size, cfg.max_size)
    h = np.clip(ah * rng.uniform(0.8, 1.25), cfg.min_size, cfg.max_size)
    dx, dy = rng.uniform(-0.45, 0.45) * aw, rng.uniform(-0.45, 0.45) * ah
    cx = np.clip(0.5 * (anchor[0] + anchor[2]) + dx, w / 2, 1 - w / 2)
    cy = np.clip(0.5 * (anchor[1] + anchor[3]) + dy, h / 2, 1 - h / 2)
    return np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def _snap(box: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    if not cfg.snap:
        return box
    s = cfg.image_size
    b = np.round(box * s)
    b[2] = max(b[2], b[0] + 1)
    b[3] = max(b[3], b[1] + 1)
    return np.clip(b, 0, s) / s


def _place_boxes(rng: np.random.Generator, cfg: SceneConfig, n: int) -> np.ndarray:
    boxes: list[np.ndarray] = []
    n_crowd = min(cfg.crowd_count, n - 1) if cfg.crowded else 0
    for k in range(n):
        crowd = k >= n - n_crowd and k > 0
        for _ in range(cfg.max_retries):
            if crowd:
                anchor = boxes[int(rng.integers(0, len(boxes)))]
                cand = _snap(_overlapping_box(rng, cfg, anchor), cfg)
                ious = pairwise_iou(cand[None], np.array(boxes))[0]
                if cfg.crowd_iou <= ious.max() <= cfg.crowd_iou_max:
                    break
            else:
                cand = _snap(_random_box(rng, cfg), cfg)
                if not boxes or pairwise_iou(cand[None], np.array(boxes))[0].max() <= cfg.max_overlap:
                    break
        else:
            raise InfeasibleSceneError(f"could not place object {k} after {cfg.max_retries} tries")
        boxes.append(cand)
    return np.array(boxes)


def render(boxes: np.ndarray, labels: np.ndarray, cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    s = cfg.image_size
    base = 0.45 + 0.1 * rng.standard_normal(3) * 0.5
    img = np.broadcast_to(base, (s, s, 3)).copy()
    img += cfg.noise * rng.standard_normal((s, s, 3))
    centers = (np.arange(s) + 0.5) / s
    for box, lab in zip(boxes, labels):
        color = np.clip(PALETTE[lab] + 0.06 * rng.standard_normal(3), 0, 1)
        inx = (centers >= box[0]) & (centers < box[2])
        iny = (centers >= box[1]) & (centers < box[3])
        mask = iny[:, None] & inx[None, :]
        img[mask] = color + 0.5 * cfg.noise * rng.standard_normal((int(mask.sum()), 3))
        cols, rows = np.flatnonzero(inx), np.flatnonzero(iny)
        if cols.size and rows.size:
            # darker one-pixel outline so that overlapping objects stay separable
            edge = np.zeros_like(mask)
            edge[rows[0], cols] = edge[rows[-1], cols] = True
            edge[rows, cols[0]] = edge[rows, cols[-1]] = True
            img[edge] = 0.4 * color
    return np.clip(img, 0.0, 1.0)


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes = _place_boxes(rng, cfg, n)
    labels = rng.integers(0, cfg.num_classes, size=n)
    pixels = render(boxes, labels, cfg, rng)
    objects = [GroundTruth(BBox.from_seq(b), int(c)) for b, c in zip(boxes, labels)]
    return Scene(cfg.image_size, cfg.image_size, pixels, objects, seed, cfg)


def write_scenes_jsonl(scenes: Iterable[Scene], path) -> None:
    with open(path, "w") as fh:
        for sc in scenes:
            fh.write(json.dumps(sc.to_record()) + "\n")


def read_scenes_jsonl(path, cfg: SceneConfig) -> list[Scene]:
    """Regenerate scenes from their seeds and check them against the stored objects."""
    scenes = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                seed = int(rec["seed"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad scene record ({exc})") from exc
            sc = generate_scene(cfg, seed)
            stored = np.array([o["box"] for o in rec.get("objects", [])], dtype=np.float64).reshape(-1, 4)
            if stored.shape != sc.gt_arrays()[0].shape or not np.allclose(stored, sc.gt_arrays()[0]):
                raise ValueError(f"{path}:{lineno}: stored objects do not match seed {seed} under this config")
            scenes.append(sc)
    return scenes
