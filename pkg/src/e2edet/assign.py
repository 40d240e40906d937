"""Positive-sample assignment from a cost matrix.

Three strategies are provided:

* ``threshold`` -- one-to-many: every sample whose cost is below ``theta(j)``.
* ``mincost``   -- one-to-one per object: independent column argmin; two objects
  may end up sharing a sample.
* ``bipartite`` -- one-to-one with no sharing: minimum-total-cost injective matching.

Ties are broken towards the lowest sample index everywhere; for bipartite
matching this means the lexicographically smallest optimal assignment.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .costs import CostMatrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThresholdRule:
    """Per-object cost threshold: a constant, a column quantile, or the k-th smallest cost."""

    kind: Literal["constant", "quantile", "topk"] = "constant"
    value: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "quantile", "topk"):
            raise ValueError(f"unknown threshold rule {self.kind!r}")
        if self.kind == "quantile" and not 0.0 <= self.value <= 1.0:
            raise ValueError("quantile threshold must lie in [0, 1]")
        if self.kind == "topk" and (self.value < 1 or int(self.value) != self.value):
            raise ValueError("topk threshold needs a positive integer k")

    def thresholds(self, total: np.ndarray) -> np.ndarray:
        n_samples, n_objects = total.shape
        if self.kind == "constant":
            return np.full(n_objects, float(self.value))
        if self.kind == "quantile":
            return np.quantile(total, self.value, axis=0)
        k = int(self.value)
        if k >= n_samples:
            return np.full(n_objects, np.inf)
        return np.sort(total, axis=0)[k]


@dataclass(frozen=True)
class AssignConfig:
    strategy: Literal["threshold", "mincost", "bipartite", "max_iou"] = "bipartite"
    theta: Optional[ThresholdRule] = None

    def __post_init__(self):
        if self.strategy not in ("threshold", "mincost", "bipartite", "max_iou"):
            raise ValueError(f"unknown assignment strategy {self.strategy!r}")
        if self.strategy == "threshold" and self.theta is None:
            raise ValueError("threshold strategy requires a theta rule")

    def to_dict(self) -> dict:
        d = {"strategy": self.strategy}
        if self.theta is not None:
            d["theta"] = {"kind": self.theta.kind, "value": self.theta.value}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AssignConfig":
        theta = d.get("theta")
        return cls(strategy=d.get("strategy", "bipartite"),
                   theta=ThresholdRule(**theta) if theta is not None else None)


@dataclass
class Assignment:
    mode: Literal["one_to_many", "one_to_one"]
    strategy: str
    positives: list[list[int]]
    n_samples: int
    conflicts: list[int] = field(default_factory=list)
    total_cost: Optional[float] = None

    def __post_init__(self):
        for idx in self.positives:
            if any(i < 0 or i >= self.n_samples for i in idx):
                raise ValueError("positive index out of range")

    @property
    def n_objects(self) -> int:
        return len(self.positives)

    def object_to_sample(self) -> list[int]:
        if self.mode != "one_to_one":
            raise ValueError("object_to_sample is only defined for one-to-one assignments")
        return [p[0] for p in self.positives]

    def pairs(self) -> list[tuple[int, int]]:
        """(sample, object) pairs, sorted by object then sample."""
        return [(i, j) for j, idx in enumerate(self.positives) for i in idx]

    def positive_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_samples, dtype=bool)
        for idx in self.positives:
            mask[idx] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "strategy": self.strategy,
            "n_samples": self.n_samples,
            "positives": [list(map(int, p)) for p in self.positives],
            "conflicts": list(map(int, self.conflicts)),
            "total_cost": self.total_cost,
        }


def _ordered_total(total: np.ndarray, cols: list[int]) -> float:
    # Sum in object order so exact comparisons against the enumeration oracle are meaningful.
    s = 0.0
    for j, i in enumerate(cols):
        s += float(total[i, j])
    return s


def assign_one_to_many(cm: CostMatrix, cfg: AssignConfig) -> Assignment:
    if cfg.strategy != "threshold" or cfg.theta is None:
        raise ValueError("one-to-many assignment needs the threshold strategy")
    theta = cfg.theta.thresholds(cm.total)
    positives = []
    for j in range(cm.n_objects):
        idx = np.flatnonzero(cm.total[:, j] < theta[j]).tolist()
        if not idx:
            log.warning("object %d has no sample below its threshold %.6g", j, theta[j])
        positives.append(idx)
    counts = np.bincount([i for p in positives for i in p], minlength=cm.n_samples)
    return Assignment("one_to_many", "threshold", positives, cm.n_samples,
                      conflicts=np.flatnonzero(counts > 1).tolist())


def assign_mincost(cm: CostMatrix) -> Assignment:
    if cm.n_samples < 1:
        raise ValueError("need at least one sample")
    cols = np.argmin(cm.total, axis=0).tolist()  # first occurrence = lowest index
    counts = np.bincount(cols, minlength=cm.n_samples)
    conflicts = np.flatnonzero(counts > 1).tolist()
    if conflicts:
        log.info("mincost: samples %s shared by several objects", conflicts)
    return Assignment("one_to_one", "mincost", [[i] for i in cols], cm.n_samples,
                      conflicts=conflicts, total_cost=_ordered_total(cm.total, cols))


def assign_max_iou(iou_matrix: np.ndarray) -> Assignment:
    """One-to-one by largest IoU per object (anchor-style rule), sharing allowed."""
    iou_matrix = np.asarray(iou_matrix, dtype=np.float64)
    cols = np.argmax(iou_matrix, axis=0).tolist()
    counts = np.bincount(cols, minlength=iou_matrix.shape[0])
    return Assignment("one_to_one", "max_iou", [[i] for i in cols], iou_matrix.shape[0],
                      conflicts=np.flatnonzero(counts > 1).tolist())


def _hungarian(cost: np.ndarray):
    """Kuhn-Munkres with potentials on an (n_rows <= n_cols) matrix.

    Returns (row_to_col, u, v) where u, v are optimal dual potentials with
    cost[r, c] - u[r] - v[c] >= 0 and equality on matched edges.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[c] = 1-based row matched to column c
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            upd = free & (cur < minv[1:])
            minv[1:][upd] = cur[upd]
            way[1:][upd] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for c in range(1, m + 1):
        if p[c]:
            row_to_col[p[c] - 1] = c - 1
    return row_to_col, u[1:], v[1:]


def _solve_restricted(cost_t: np.ndarray, rows: list[int], cols: list[int]):
    sub = cost_t[np.ix_(rows, cols)]
    r2c, _, _ = _hungarian(sub)
    return [cols[c] for c in r2c]


def assign_bipartite(cm: CostMatrix) -> Assignment:
    """Minimum-cost injective object->sample matching, lexicographically smallest under ties."""
    n_samples, n_objects = cm.total.shape
    if n_samples < n_objects:
        raise ValueError(f"bipartite matching needs n_samples >= n_objects ({n_samples} < {n_objects})")
    if n_objects == 0:
        return Assignment("one_to_one", "bipartite", [], n_samples, total_cost=0.0)
    cost_t = np.ascontiguousarray(cm.total.T)  # rows = objects
    r2c, u, v = _hungarian(cost_t)
    cols = r2c.tolist()
    best = _ordered_total(cm.total, cols)
    scale = 1.0 + float(np.max(np.abs(cost_t)))
    tight_tol = 1e-9 * scale
    accept_tol = 1e-12 * (1.0 + abs(best))
    # Any optimal matching only uses edges that are tight under the optimal duals,
    # so only those can lower the index chosen for an object.
    reduced = cost_t - u[:, None] - v[None, :]
    taken: list[int] = []
    for j in range(n_objects):
        options = np.flatnonzero(reduced[j] <= tight_tol)
        for c in options:
            c = int(c)
            if c >= cols[j]:
                break
            if c in taken:
                continue
            rest_rows = list(range(j + 1, n_objects))
            rest_cols = [k for k in range(n_samples) if k not in taken and k != c]
            trial = taken + [c] + (_solve_restricted(cost_t, rest_rows, rest_cols) if rest_rows else [])
            if _ordered_total(cm.total, trial) <= best + accept_tol:
                cols = trial
                break
        taken.append(cols[j])
    return Assignment("one_to_one", "bipartite", [[c] for c in cols], n_samples,
                      total_cost=_ordered_total(cm.total, cols))


MAX_BRUTE_OBJECTS = 8
MAX_BRUTE_PERMUTATIONS = 2_000_000


def brute_force_matching(cm: CostMatrix) -> Assignment:
    """Exhaustive search over injective object->sample maps (test oracle)."""
    n_samples, n_objects = cm.total.shape
    if n_objects > MAX_BRUTE_OBJECTS:
        raise ValueError(f"brute force limited to {MAX_BRUTE_OBJECTS} objects")
    if n_samples < n_objects:
        raise ValueError("need n_samples >= n_objects")
    n_perm = math.perm(n_samples, n_objects)
    if n_perm > MAX_BRUTE_PERMUTATIONS:
        raise ValueError(f"{n_perm} permutations exceeds the brute-force budget")
    if n_objects == 0:
        return Assignment("one_to_one", "brute_force", [], n_samples, total_cost=0.0)
    perms = np.array(list(itertools.permutations(range(n_samples), n_objects)), dtype=np.int64)
    sums = cm.total[perms[:, 0], 0].copy()
    for j in range(1, n_objects):
        sums = sums + cm.total[perms[:, j], j]
    k = int(np.argmin(sums))  # permutations come in lexicographic order
    cols = perms[k].tolist()
    return Assignment("one_to_one", "brute_force", [[c] for c in cols], n_samples,
                      total_cost=_ordered_total(cm.total, cols))


def assign(cm: CostMatrix, cfg: AssignConfig) -> Assignment:
    if cfg.strategy == "threshold":
        return assign_one_to_many(cm, cfg)
    if cfg.strategy == "mincost":
        return assign_mincost(cm)
    if cfg.strategy == "bipartite":
        return assign_bipartite(cm)
    raise ValueError(f"strategy {cfg.strategy!r} needs geometry, not a cost matrix")
