"""Command-line front end.

Every subcommand reads an optional JSON config (``--config``) carrying a
``schema_version`` field and one section per command. Command-line flags
override file values. The resolved configuration is written next to the
outputs, so re-running it with ``--config <out>/config.json`` reproduces them.

Exit codes: 0 success (warnings allowed), 2 config or input schema error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from . import metrics
from .assign import AssignConfig, assign
from .costs import Candidate, CostWeights, build_cost_matrix
from .geometry import BBox, GridPoint, GroundTruth
from .postprocess import Detection, nms, score_filter
from .theory import PerceptronConfig, perceptron_trial, summarize_trials, write_trace_csv

log = logging.getLogger("e2edet")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
COMMANDS = ("assign", "perceptron", "train", "crowd", "eval", "nms")

# Two point candidates, each sitting on the center of one of two boxes.
FIXTURE_CANDIDATES = [
    {"kind": "point", "location": [0.2, 0.2], "scores": [0.5]},
    {"kind": "point", "location": [0.7, 0.7], "scores": [0.5]},
]
FIXTURE_GTS = [
    {"box": [0.1, 0.1, 0.3, 0.3], "category": 0},
    {"box": [0.6, 0.6, 0.8, 0.8], "category": 0},
]


class SchemaError(ValueError):
    """Malformed config or input file; maps to exit code 2."""


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    out: str = "out"
    jobs: int = 1
    regime: Optional[str] = None
    section: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "command": self.command, "seed": self.seed,
             self.command: self.section}
        if self.regime is not None:
            d["regime"] = self.regime
        return d


# ---------------------------------------------------------------- parsing helpers

def load_config(path: Optional[str], command: str) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read config ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: config must be a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    section = data.get(command, {})
    if not isinstance(section, dict):
        raise SchemaError(f"{path}: section {command!r} must be an object")
    return data


def read_jsonl(path, parse: Callable[[Any], Any]) -> list:
    """Parse one JSON value per non-blank line; errors carry ``path:line``."""
    out = []
    try:
        fh = open(path)
    except OSError as exc:
        raise SchemaError(f"{path}: cannot read ({exc.strerror})") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(parse(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{lineno}: {type(exc).__name__}: {exc}") from exc
    return out


def _build(cls, d: Optional[dict], where: str):
    try:
        return cls.from_dict(d or {}) if hasattr(cls, "from_dict") else cls(**(d or {}))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def parse_candidate(rec: dict) -> Candidate:
    kind = rec["kind"]
    loc = rec["location"]
    where = GridPoint(*loc) if kind == "point" else BBox.from_seq(loc)
    pred = rec.get("predicted_box")
    return Candidate(kind, where, np.asarray(rec["scores"], dtype=np.float64),
                     BBox.from_seq(pred) if pred is not None else None)


def parse_gt(rec: dict) -> GroundTruth:
    return GroundTruth(BBox.from_seq(rec["box"]), int(rec["category"]))


def parse_image_dets(rec: dict) -> tuple[str, list[Detection]]:
    return str(rec["image"]), [Detection.from_dict(d) for d in rec["detections"]]


def parse_image_gts(rec: dict) -> tuple[str, list[GroundTruth]]:
    return str(rec["image"]), [parse_gt(o) for o in rec["objects"]]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _map(fn, items, jobs: int) -> list:
    """Ordered map; a process pool when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _without_timing(d):
    if isinstance(d, dict):
        return {k: _without_timing(v) for k, v in d.items() if k != "seconds"}
    if isinstance(d, list):
        return [_without_timing(v) for v in d]
    return d


# ---------------------------------------------------------------- commands

def cmd_assign(rc: RunConfig, args) -> int:
    sec = rc.section
    weights = _build(CostWeights, sec.get("weights"), "assign.weights")
    acfg = _build(AssignConfig, sec.get("assignment"), "assign.assignment")
    if args.candidates and args.gts:
        cands = read_jsonl(args.candidates, parse_candidate)
        gts = read_jsonl(args.gts, parse_gt)
    elif args.candidates or args.gts:
        raise SchemaError("--candidates and --gts must be given together")
    else:
        cands = [parse_candidate(r) for r in FIXTURE_CANDIDATES]
        gts = [parse_gt(r) for r in FIXTURE_GTS]
    try:
        cm = build_cost_matrix(cands, gts, weights)
    except ValueError as exc:
        raise SchemaError(f"inputs: {exc}") from exc
    collector = _Collector()
    assign_log = logging.getLogger("e2edet.assign")
    assign_log.addHandler(collector)
    try:
        result = assign(cm, acfg)
    finally:
        assign_log.removeHandler(collector)
    out = {"assignment": result.to_dict(), "cost_matrix": cm.summary(), "warnings": collector.messages}
    _write_json(Path(rc.out) / "assignment.json", out)
    print(json.dumps(out["assignment"], default=_json_default))
    return EXIT_OK


class _Collector(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.messages: list[str] = []

    def emit(self, record):
        self.messages.append(record.getMessage())


def _perceptron_job(job):
    seed, cfg, trace_path = job
    trial = perceptron_trial(seed, cfg, keep_result=True)
    write_trace_csv(trial.result.state.trace, trace_path)
    trial.result = None
    return trial


def cmd_perceptron(rc: RunConfig, args) -> int:
    cfg = _build(PerceptronConfig, rc.section, "perceptron")
    out = Path(rc.out)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    seeds = [rc.seed + k for k in range(cfg.n_runs)]
    jobs = [(s, cfg, out / "traces" / f"seed_{s}.csv") for s in seeds]
    trials = _map(_perceptron_job, jobs, rc.jobs)
    summary = summarize_trials(trials)
    _write_json(out / "perceptron.json", {"summary": summary, "runs": [t.to_dict() for t in trials]})
    with open(out / "perceptron_summary.csv", "w", newline="") as fh:
        cols = list(trials[0].to_dict()) if trials else []
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for t in trials:
            w.writerow(t.to_dict())
    print(json.dumps(summary))
    return EXIT_OK


def _train_job(job):
    from .toydet.experiment import run_experiment

    regime, seed, cfg = job
    return run_experiment(regime, seed=seed, cfg=cfg)


def _experiment_config(sec: dict, where: str):
    from .toydet.experiment import ExperimentConfig

    return _build(ExperimentConfig, sec.get("experiment"), where)


def cmd_train(rc: RunConfig, args) -> int:
    from .toydet.experiment import REGIMES

    sec = rc.section
    cfg = _experiment_config(sec, "train.experiment")
    regimes = [rc.regime] if rc.regime else list(sec.get("regimes", REGIMES))
    bad = [r for r in regimes if r not in REGIMES]
    if bad:
        raise SchemaError(f"unknown regime(s) {bad}; expected {list(REGIMES)}")
    n_seeds = int(sec.get("n_seeds", 1))
    seeds = [rc.seed + k for k in range(n_seeds)]
    jobs = [(r, s, cfg) for r in regimes for s in seeds]
    reports = _map(_train_job, jobs, rc.jobs)
    out = Path(rc.out)
    rows = []
    for rep in reports:
        tag = f"{rep.regime}_seed{rep.seed}"
        _write_json(out / "reports" / f"{tag}.json", _without_timing(rep.to_dict()))
        rep.write_histograms(out / "histograms")
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        rep._model.save(out / "checkpoints" / f"{tag}.bin")
        rows.append(rep.row())
    _write_rows(out / "runs.csv", rows)
    table = regime_table(rows)
    _write_rows(out / "regime_table.csv", table)
    for r in table:
        print(f"{r['regime']:<20} AP {r['ap']:6.2f}  AP+NMS {r['ap_nms']:6.2f}  delta {r['nms_delta']:+6.2f}  "
              f"gap {_fmt(r['gap'])}  redundancy {r['redundancy']:.2f}")
    return EXIT_OK


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def regime_table(rows: list[dict]) -> list[dict]:
    """One row per regime: mean AP figures, median gap and top-1 score, mean redundancy."""
    table = []
    for regime in dict.fromkeys(r["regime"] for r in rows):
        sub = [r for r in rows if r["regime"] == regime]
        gaps = [r["gap"] for r in sub if r["gap"] is not None]
        tops = [r["top1"] for r in sub if r["top1"] is not None]
        table.append({
            "regime": regime,
            "n_seeds": len(sub),
            "ap": float(np.mean([r["ap"] for r in sub])),
            "ap_nms": float(np.mean([r["ap_nms"] for r in sub])),
            "nms_delta": float(np.mean([r["nms_delta"] for r in sub])),
            "gap": float(np.median(gaps)) if gaps else None,
            "top1": float(np.median(tops)) if tops else None,
            "redundancy": float(np.mean([r["redundancy"] for r in sub])),
        })
    return table


def _write_rows(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else v) for k, v in r.items()})


def _crowd_job(job):
    from .toydet.crowd import run_crowd

    seed, cfg = job
    rep = run_crowd(seed, cfg)
    del rep._model
    return rep


def cmd_crowd(rc: RunConfig, args) -> int:
    from .toydet.crowd import CrowdConfig

    sec = rc.section
    cfg = _build(CrowdConfig, sec.get("crowd"), "crowd.crowd")
    if rc.regime:
        cfg = CrowdConfig(cfg.experiment, rc.regime, cfg.nms_thresholds, cfg.oracle_threshold)
    seeds = [rc.seed + k for k in range(int(sec.get("n_seeds", 1)))]
    reports = _map(_crowd_job, [(s, cfg) for s in seeds], rc.jobs)
    out = Path(rc.out)
    rows = []
    for rep in reports:
        rep.write_csv(_mkdir(out) / f"crowd_seed{rep.seed}.csv")
        rows.extend({"seed": rep.seed, **r.to_dict()} for r in rep.rows)
    _write_json(out / "crowd.json", {"reports": [_without_timing(r.to_dict()) for r in reports]})
    _write_rows(out / "crowd_rows.csv", rows)
    print(f"{'source':<11} {'nms':>5} {'AP50':>7} {'mMR':>7} {'recall':>7}")
    keys = dict.fromkeys((r["source"], r["nms_iou"]) for r in rows)
    for source, thr in keys:
        sub = [r for r in rows if r["source"] == source and r["nms_iou"] == thr]
        print(f"{source:<11} {'none' if thr is None else thr:>5} "
              f"{100 * np.mean([r['ap50'] for r in sub]):7.2f} {100 * np.mean([r['mmr'] for r in sub]):7.2f} "
              f"{np.mean([r['recall'] for r in sub]):7.3f}")
    return EXIT_OK


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def _paired_inputs(args) -> tuple[list[str], list[list[Detection]], list[list[GroundTruth]]]:
    if not args.dets or not args.gts:
        raise SchemaError("--dets and --gts are required")
    dets = read_jsonl(args.dets, parse_image_dets)
    gts = dict(read_jsonl(args.gts, parse_image_gts))
    ids = [i for i, _ in dets]
    missing = [i for i in ids if i not in gts]
    if missing:
        raise SchemaError(f"{args.gts}: no ground truth for image(s) {missing[:5]}")
    return ids, [d for _, d in dets], [gts[i] for i in ids]


def cmd_eval(rc: RunConfig, args) -> int:
    sec = rc.section
    _, dets, gts = _paired_inputs(args)
    if sec.get("nms_iou") is not None:
        dets = [nms(d, float(sec["nms_iou"])) for d in dets]
    result = metrics.evaluate(dets, gts, max_dets=sec.get("max_dets", 100), tau=sec.get("tau", 0.3))
    out = Path(rc.out)
    _write_json(out / "eval.json", result.to_dict())
    result.write_pr_csv(_mkdir(out) / "pr_curves.csv")
    print(json.dumps({k: result.to_dict()[k] for k in ("ap", "ap50", "recall50", "mmr", "redundancy")}))
    return EXIT_OK


def cmd_nms(rc: RunConfig, args) -> int:
    sec = rc.section
    if not args.dets:
        raise SchemaError("--dets is required")
    images = read_jsonl(args.dets, parse_image_dets)
    thr = float(sec.get("iou_thr", 0.5))
    tau = sec.get("tau")
    out = _mkdir(Path(rc.out)) / "detections_nms.jsonl"
    n_in = n_out = 0
    with open(out, "w") as fh:
        for image, dets in images:
            n_in += len(dets)
            kept = nms(dets, thr, classwise=bool(sec.get("classwise", True)))
            if tau is not None:
                kept = score_filter(kept, float(tau))
            n_out += len(kept)
            fh.write(json.dumps({"image": image, "detections": [d.to_dict() for d in kept]}) + "\n")
    print(json.dumps({"images": len(images), "input": n_in, "kept": n_out}))
    return EXIT_OK


HANDLERS = {"assign": cmd_assign, "perceptron": cmd_perceptron, "train": cmd_train,
            "crowd": cmd_crowd, "eval": cmd_eval, "nms": cmd_nms}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="e2edet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config with schema_version and a section per command")
        s.add_argument("--seed", type=int, help="root seed (default 0)")
        s.add_argument("--out", help="output directory (default ./out)")
        s.add_argument("--regime", help="restrict train/crowd to one regime")
        s.add_argument("--jobs", type=int, help="worker processes for independent runs")
        if name == "assign":
            s.add_argument("--candidates", help="JSONL, one candidate per line")
            s.add_argument("--gts", help="JSONL, one ground-truth object per line")
        if name in ("eval", "nms"):
            s.add_argument("--dets", help="JSONL, one image per line: {image, detections}")
        if name == "eval":
            s.add_argument("--gts", help="JSONL, one image per line: {image, objects}")
    return p


def resolve(args) -> RunConfig:
    data = load_config(args.config, args.command)
    rc = RunConfig(
        command=args.command,
        seed=int(data.get("seed", 0)),
        out=str(data.get("out", "out")),
        jobs=int(data.get("jobs", 1)),
        regime=data.get("regime"),
        section=dict(data.get(args.command, {})),
    )
    for name in ("seed", "out", "jobs", "regime"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(rc, name, v)
    if rc.jobs < 1:
        raise SchemaError("--jobs must be at least 1")
    return rc


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = resolve(args)
        _write_json(Path(rc.out) / "config.json", rc.to_dict())
        return HANDLERS[args.command](rc, args)
    except SchemaError as exc:
        print(f"e2edet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        print(f"e2edet {args.command}: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
