"""Perceptron training under one-to-one label assignment.

At every step the sample with the highest score ``w^T x`` is labelled +1 and all
others -1; the perceptron then corrects one misclassified sample. This module
runs that process, records for each step the separating certificate
``(gamma_t, delta_t)`` showing that the current labels are separable, checks
the stepsize hypothesis of the convergence theorem after the fact, and
evaluates the theorem's bound on the number of updates.

Points are stored augmented with a constant bias coordinate ``c``: ``x = [u, c]``.
The textbook augmentation ``[x_hat, 1]`` can have norm up to sqrt(2); the
``unit`` embedding divides by sqrt(2) so that ``||x|| <= 1`` as the norm-growth
argument requires. Every formula below is written for a general ``c``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Optional, Union

import numpy as np

CERT_TOL = 1e-9


class ConvergedError(RuntimeError):
    """Raised when a perceptron step is requested on an already-converged state."""


@dataclass
class SampleSet:
    points: np.ndarray  # (n, d + 1), last column is the constant bias coordinate

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2 or self.points.shape[1] < 2:
            raise ValueError("need at least two augmented points of dimension >= 2")
        c = self.points[:, -1]
        if not np.all(c == c[0]) or c[0] <= 0:
            raise ValueError("bias coordinate must be a positive constant")
        if np.unique(self.points, axis=0).shape[0] != self.points.shape[0]:
            raise ValueError("points must be distinct")
        if np.any(np.linalg.norm(self.raw, axis=1) > 1.0 + 1e-12):
            raise ValueError("unaugmented points must lie in the unit ball")

    @classmethod
    def from_raw(cls, x_hat, embedding: Literal["unit", "plain"] = "unit") -> "SampleSet":
        x_hat = np.asarray(x_hat, dtype=np.float64)
        if x_hat.ndim == 1:
            x_hat = x_hat[:, None]
        aug = np.hstack([x_hat, np.ones((x_hat.shape[0], 1))])
        if embedding == "unit":
            aug = aug / math.sqrt(2.0)
        elif embedding != "plain":
            raise ValueError(f"unknown embedding {embedding!r}")
        return cls(aug)

    @classmethod
    def random(cls, n: int, d: int, rng: np.random.Generator, embedding: str = "unit") -> "SampleSet":
        """n points drawn uniformly from the d-dimensional unit ball."""
        g = rng.standard_normal((n, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        r = rng.random(n) ** (1.0 / d)
        return cls.from_raw(g * r[:, None], embedding)

    @property
    def bias_coord(self) -> float:
        return float(self.points[0, -1])

    @property
    def raw(self) -> np.ndarray:
        return self.points[:, :-1] / self.points[:, -1:]

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Certificate:
    gamma: float
    delta: float
    i_max: int
    i_second: int
    min_margin: float  # min over samples of y * w_star^T x
    w_star_norm: float

    @property
    def valid(self) -> bool:
        return self.min_margin >= self.delta - CERT_TOL

    @property
    def delta_normalized(self) -> float:
        return self.delta / self.w_star_norm


@dataclass
class TraceEntry:
    t: int
    eta_t: float
    gamma_t: Optional[float]
    delta_t: Optional[float]
    delta_normalized: Optional[float]
    certificate_margin: Optional[float]
    i_max: int
    updated_index: int
    label: int
    violation: float
    gamma_next: Optional[float]
    condition_value: Optional[float]
    stepsize_condition_holds: bool
    norm_before: float
    norm_after: float

    @property
    def certificate_defined(self) -> bool:
        return self.delta_t is not None


@dataclass
class PerceptronState:
    w: np.ndarray
    t: int = 0
    trace: list[TraceEntry] = field(default_factory=list)

    def copy(self) -> "PerceptronState":
        return PerceptronState(self.w.copy(), self.t, list(self.trace))


EtaPolicy = Union[float, Callable[[int], float]]


def _eta(policy: EtaPolicy, t: int) -> float:
    eta = float(policy(t) if callable(policy) else policy)
    if not eta > 0:
        raise ValueError(f"stepsize must be positive, got {eta}")
    return eta


def assign_labels_one_to_one(w, S: SampleSet) -> np.ndarray:
    scores = S.points @ np.asarray(w, dtype=np.float64)
    labels = -np.ones(S.n, dtype=np.int64)
    labels[int(np.argmax(scores))] = 1
    return labels


def _labels(w, S: SampleSet, positive_index: Optional[int]) -> np.ndarray:
    if positive_index is None:
        return assign_labels_one_to_one(w, S)
    labels = -np.ones(S.n, dtype=np.int64)
    labels[positive_index] = 1
    return labels


def margin_certificate(w, S: SampleSet) -> Optional[Certificate]:
    """Certificate ``w_star = [w_hat, gamma]`` separating the one-to-one labels of ``w``
    with margin ``delta``; ``None`` when the top two scores tie (delta would be 0)."""
    w = np.asarray(w, dtype=np.float64)
    scores = S.points @ w
    i1 = int(np.argmax(scores))
    rest = scores.copy()
    rest[i1] = -np.inf
    i2 = int(np.argmax(rest))
    u = S.points[:, :-1]
    w_hat = w[:-1]
    proj = u @ w_hat
    delta = 0.5 * (proj[i1] - proj[i2])
    if not delta > 0:
        return None
    c = S.bias_coord
    gamma = -0.5 * (proj[i1] + proj[i2]) / c
    w_star = np.append(w_hat, gamma)
    labels = -np.ones(S.n)
    labels[i1] = 1.0
    min_margin = float(np.min(labels * (S.points @ w_star)))
    return Certificate(gamma=float(gamma), delta=float(delta), i_max=i1, i_second=i2,
                       min_margin=min_margin, w_star_norm=float(np.linalg.norm(w_star)))


def is_converged(w, S: SampleSet, positive_index: Optional[int] = None) -> bool:
    """Definitional check: exactly the positive sample scores > 0, all others <= 0."""
    scores = S.points @ np.asarray(w, dtype=np.float64)
    positive = scores > 0
    if positive_index is None:
        return int(positive.sum()) == 1
    return bool(positive[positive_index]) and int(positive.sum()) == 1


def stepsize_condition(x_norm_sq: float, eta: float, label: int, gamma_t: float, gamma_next: float,
                       bias_t: float) -> float:
    return x_norm_sq * eta**2 + label * (gamma_next - 2.0 * gamma_t) * eta + bias_t * (gamma_next - gamma_t)


def perceptron_step(state: PerceptronState, S: SampleSet, eta_policy: EtaPolicy = 1.0,
                    positive_index: Optional[int] = None) -> PerceptronState:
    """One update on the misclassified sample with the largest violation ``-y w^T x``."""
    w = state.w
    labels = _labels(w, S, positive_index)
    scores = S.points @ w
    wrong = ((labels == 1) & (scores <= 0)) | ((labels == -1) & (scores > 0))
    if not wrong.any():
        raise ConvergedError("no misclassified sample: the state has converged")
    violation = np.where(wrong, -labels * scores, -np.inf)
    k = int(np.argmax(violation))
    eta = _eta(eta_policy, state.t)
    x, y = S.points[k], int(labels[k])
    w_next = w + eta * y * x

    cert = margin_certificate(w, S)
    cert_next = margin_certificate(w_next, S)
    cond_value = None
    if cert is not None and cert_next is not None:
        cond_value = stepsize_condition(float(x @ x), eta, y, cert.gamma, cert_next.gamma, float(w[-1]))
    entry = TraceEntry(
        t=state.t,
        eta_t=eta,
        gamma_t=cert.gamma if cert else None,
        delta_t=cert.delta if cert else None,
        delta_normalized=cert.delta_normalized if cert else None,
        certificate_margin=cert.min_margin if cert else None,
        i_max=int(np.argmax(scores)),
        updated_index=k,
        label=y,
        violation=float(violation[k]),
        gamma_next=cert_next.gamma if cert_next else None,
        condition_value=cond_value,
        stepsize_condition_holds=cond_value is not None and cond_value > 0,
        norm_before=float(np.linalg.norm(w)),
        norm_after=float(np.linalg.norm(w_next)),
    )
    return PerceptronState(w_next, state.t + 1, state.trace + [entry])


@dataclass
class RunResult:
    w0: np.ndarray
    state: PerceptronState
    verdict: Literal["converged", "not_converged"]
    w1: Optional[np.ndarray] = None  # weights after the first update

    @property
    def steps(self) -> int:
        return self.state.t


def run_to_convergence(S: SampleSet, eta_policy: EtaPolicy = 1.0, max_steps: int = 10_000,
                       w0=None, positive_index: Optional[int] = None) -> RunResult:
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    w0 = np.zeros(S.points.shape[1]) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    state = PerceptronState(w0.copy())
    w1 = None
    # Trace entries are appended in place; building a new list each step is quadratic.
    while not is_converged(state.w, S, positive_index):
        if state.t >= max_steps:
            return RunResult(w0, state, "not_converged", w1)
        nxt = perceptron_step(PerceptronState(state.w, state.t, []), S, eta_policy, positive_index)
        state.trace.append(nxt.trace[0])
        state.w, state.t = nxt.w, nxt.t
        if w1 is None:
            w1 = state.w.copy()
    return RunResult(w0, state, "converged", w1)


@dataclass
class BoundResult:
    value: Optional[float]
    evaluable: bool
    hypotheses_hold: bool
    reason: str = ""
    delta_min: Optional[float] = None
    eta_min: Optional[float] = None
    eta_max: Optional[float] = None


def bound_formula(eta_min: float, eta_max: float, delta_min: float, w1_dot_w0star: float, w0_norm: float) -> float:
    return (eta_max**2 - 2.0 * eta_min * delta_min * (w1_dot_w0star - w0_norm - eta_max)) / (
        2.0 * eta_min**2 * delta_min**2)


def theorem_bound(trace: list[TraceEntry], w0, w1, S: SampleSet) -> BoundResult:
    """Upper bound on the update count. Margins are taken for unit-norm certificates,
    and ``w0_star`` is the normalized certificate of ``w0``."""
    if not trace or w1 is None:
        return BoundResult(None, False, False, "no updates recorded")
    if any(not e.certificate_defined for e in trace):
        return BoundResult(None, False, False, "undefined certificate (top-2 score tie)")
    cert0 = margin_certificate(w0, S)
    if cert0 is None:
        return BoundResult(None, False, False, "undefined certificate at initialization")
    w0 = np.asarray(w0, dtype=np.float64)
    w0_star = np.append(w0[:-1], cert0.gamma) / cert0.w_star_norm
    etas = [e.eta_t for e in trace]
    delta_min = min(e.delta_normalized for e in trace)
    eta_min, eta_max = min(etas), max(etas)
    value = bound_formula(eta_min, eta_max, delta_min, float(np.asarray(w1) @ w0_star), float(np.linalg.norm(w0)))
    hyp = all(e.stepsize_condition_holds for e in trace)
    return BoundResult(value, True, hyp, "" if hyp else "stepsize condition violated at some step",
                       delta_min, eta_min, eta_max)


TRACE_COLUMNS = ["t", "eta_t", "gamma_t", "delta_t", "i_max", "violation", "condition_flag", "w_norm",
                 "updated_index", "label", "delta_normalized", "certificate_margin", "condition_value"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_trace_csv(trace: list[TraceEntry], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for e in trace:
            writer.writerow([_fmt(v) for v in (
                e.t, e.eta_t, e.gamma_t, e.delta_t, e.i_max, e.violation, e.stepsize_condition_holds,
                e.norm_after, e.updated_index, e.label, e.delta_normalized, e.certificate_margin,
                e.condition_value)])


@dataclass(frozen=True)
class PerceptronConfig:
    n_runs: int = 100
    d_min: int = 1
    d_max: int = 16
    n_min: int = 2
    n_max: int = 64
    eta: float = 1.0
    max_steps: int = 10_000
    init_scale: float = 0.1
    embedding: str = "unit"


@dataclass
class TrialSummary:
    seed: int
    n: int
    d: int
    steps: int
    verdict: str
    bound: Optional[float]
    bound_evaluable: bool
    hypotheses_hold: bool
    bound_satisfied: Optional[bool]
    certificates_valid: bool
    norm_inequality_holds: bool
    undefined_certificates: int
    condition_failures: int
    exclusion_reason: str
    result: Optional[RunResult] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "result"}
        return d


def norm_inequality_holds(trace: list[TraceEntry], tol: float = CERT_TOL) -> bool:
    return all(e.norm_after**2 <= e.norm_before**2 + e.eta_t**2 + tol for e in trace)


def perceptron_trial(seed: int, cfg: PerceptronConfig = PerceptronConfig(), keep_result: bool = False) -> TrialSummary:
    from .rng import stream

    rng = stream(seed, "perceptron")
    d = int(rng.integers(cfg.d_min, cfg.d_max + 1))
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    S = SampleSet.random(n, d, rng, cfg.embedding)
    w0 = rng.standard_normal(d + 1)
    w0 *= cfg.init_scale / np.linalg.norm(w0)
    run = run_to_convergence(S, cfg.eta, cfg.max_steps, w0)
    trace = run.state.trace
    bound = theorem_bound(trace, w0, run.w1, S) if run.verdict == "converged" else \
        BoundResult(None, False, False, "run did not converge")
    usable = bound.evaluable and bound.hypotheses_hold
    reason = "" if usable else (bound.reason or "hypotheses not met")
    return TrialSummary(
        seed=seed, n=n, d=d, steps=run.steps, verdict=run.verdict,
        bound=bound.value, bound_evaluable=bound.evaluable, hypotheses_hold=bound.hypotheses_hold,
        bound_satisfied=(run.steps <= bound.value) if usable else None,
        certificates_valid=all(e.certificate_margin >= e.delta_t - CERT_TOL for e in trace if e.certificate_defined),
        norm_inequality_holds=norm_inequality_holds(trace),
        undefined_certificates=sum(not e.certificate_defined for e in trace),
        condition_failures=sum(not e.stepsize_condition_holds for e in trace),
        exclusion_reason=reason,
        result=run if keep_result else None,
    )


def summarize_trials(trials: list[TrialSummary]) -> dict:
    usable = [t for t in trials if t.bound_satisfied is not None]
    return {
        "runs": len(trials),
        "converged": sum(t.verdict == "converged" for t in trials),
        "bound_checked": len(usable),
        "bound_satisfied": sum(bool(t.bound_satisfied) for t in usable),
        "excluded": len(trials) - len(usable),
        "exclusion_rate": (len(trials) - len(usable)) / len(trials) if trials else 0.0,
        "certificates_valid": sum(t.certificates_valid for t in trials),
        "norm_inequality_holds": sum(t.norm_inequality_holds for t in trials),
        "max_steps_over_bound": max((t.steps / t.bound for t in usable if t.bound), default=None),
    }
