import csv
import json

import pytest

from e2edet.cli import EXIT_CONFIG, EXIT_OK, FIXTURE_CANDIDATES, FIXTURE_GTS, main, regime_table

SMALL_EXPERIMENT = {
    "scene": {"image_size": 16, "min_size": 0.2, "max_size": 0.45},
    "model": {"grid": 16, "patch_radius": 2, "hidden": 8},
    "steps": 10, "n_train": 4, "n_test": 3,
}


def write_config(path, **sections):
    path.write_text(json.dumps({"schema_version": 1, **sections}))
    return str(path)


def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return str(path)


class TestAssign:
    def test_fixture_matches_diagonally(self, tmp_path):
        assert main(["assign", "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "assignment.json").read_text())
        assert out["assignment"]["positives"] == [[0], [1]]
        assert out["warnings"] == []

    def test_zero_positives_warns_but_succeeds(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", assign={
            "weights": {"lambda_cls": 0.0, "lambda_l1": 1.0, "lambda_iou": 0.0},
            "assignment": {"strategy": "threshold", "theta": {"kind": "constant", "value": 0.0}}})
        assert main(["assign", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "assignment.json").read_text())
        assert all(p == [] for p in out["assignment"]["positives"])
        assert out["warnings"]

    def test_jsonl_inputs(self, tmp_path):
        c = write_jsonl(tmp_path / "c.jsonl", FIXTURE_CANDIDATES[::-1])
        g = write_jsonl(tmp_path / "g.jsonl", FIXTURE_GTS)
        assert main(["assign", "--candidates", c, "--gts", g, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "assignment.json").read_text())
        assert out["assignment"]["positives"] == [[1], [0]]

    def test_malformed_input_exits_2(self, tmp_path, capsys):
        c = tmp_path / "c.jsonl"
        c.write_text(json.dumps(FIXTURE_CANDIDATES[0]) + "\n{oops\n")
        g = write_jsonl(tmp_path / "g.jsonl", FIXTURE_GTS)
        assert main(["assign", "--candidates", str(c), "--gts", g, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "c.jsonl:2" in capsys.readouterr().err

    def test_category_out_of_range_exits_2(self, tmp_path):
        c = write_jsonl(tmp_path / "c.jsonl", FIXTURE_CANDIDATES)
        g = write_jsonl(tmp_path / "g.jsonl", [{"box": [0.1, 0.1, 0.3, 0.3], "category": 4}])
        assert main(["assign", "--candidates", c, "--gts", g, "--out", str(tmp_path)]) == EXIT_CONFIG


class TestConfig:
    @pytest.mark.parametrize("payload", ['{"schema_version": 2}', "{}", "[1, 2]", "{bad"])
    def test_bad_config_exits_2(self, tmp_path, payload):
        (tmp_path / "c.json").write_text(payload)
        assert main(["assign", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_unknown_field_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", perceptron={"n_runs": 1, "bogus": 3})
        assert main(["perceptron", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_resolved_config_reproduces(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", perceptron={"n_runs": 3, "d_max": 4, "n_max": 8})
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["perceptron", "--config", cfg, "--seed", "7", "--out", str(a)]) == EXIT_OK
        assert main(["perceptron", "--config", str(a / "config.json"), "--out", str(b)]) == EXIT_OK
        assert (a / "perceptron.json").read_bytes() == (b / "perceptron.json").read_bytes()


class TestPerceptron:
    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", perceptron={"n_runs": 4, "d_max": 6, "n_max": 16})
        for name in ("a", "b"):
            assert main(["perceptron", "--config", cfg, "--out", str(tmp_path / name)]) == EXIT_OK
        for f in ("perceptron_summary.csv", "traces/seed_0.csv", "traces/seed_3.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_step_budget_reports_not_converged(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", perceptron={"n_runs": 5, "max_steps": 1, "d_min": 8, "n_min": 40})
        assert main(["perceptron", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        with open(tmp_path / "perceptron_summary.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert any(r["verdict"] == "not_converged" for r in rows)
        assert all(int(r["steps"]) <= 1 for r in rows)


class TestEvalAndNms:
    DETS = [{"image": "a", "detections": [
        {"box": [0.1, 0.1, 0.4, 0.4], "category": 0, "score": 0.9},
        {"box": [0.11, 0.1, 0.41, 0.4], "category": 0, "score": 0.8},
        {"box": [0.6, 0.6, 0.9, 0.9], "category": 0, "score": 0.7},
    ]}]
    GTS = [{"image": "a", "objects": [
        {"box": [0.1, 0.1, 0.4, 0.4], "category": 0},
        {"box": [0.6, 0.6, 0.9, 0.9], "category": 0},
    ]}]

    def test_eval(self, tmp_path):
        d = write_jsonl(tmp_path / "d.jsonl", self.DETS)
        g = write_jsonl(tmp_path / "g.jsonl", self.GTS)
        assert main(["eval", "--dets", d, "--gts", g, "--out", str(tmp_path)]) == EXIT_OK
        out = json.loads((tmp_path / "eval.json").read_text())
        assert out["recall50"] == 1.0
        assert (tmp_path / "pr_curves.csv").exists()

    def test_eval_missing_image_exits_2(self, tmp_path):
        d = write_jsonl(tmp_path / "d.jsonl", self.DETS)
        g = write_jsonl(tmp_path / "g.jsonl", [{"image": "b", "objects": []}])
        assert main(["eval", "--dets", d, "--gts", g, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_nms(self, tmp_path):
        d = write_jsonl(tmp_path / "d.jsonl", self.DETS)
        assert main(["nms", "--dets", d, "--out", str(tmp_path)]) == EXIT_OK
        kept = json.loads((tmp_path / "detections_nms.jsonl").read_text())["detections"]
        assert [k["score"] for k in kept] == [0.9, 0.7]


class TestTrainAndCrowd:
    def test_train_smoke_and_rerun(self, tmp_path):
        cfg = write_config(tmp_path / "c.json", train={"experiment": SMALL_EXPERIMENT, "regimes": ["o2m", "o2o_loc_cls_pred"]})
        for name in ("a", "b"):
            assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == EXIT_OK
        rep = "reports/o2m_seed0.json"
        assert (tmp_path / "a" / rep).read_bytes() == (tmp_path / "b" / rep).read_bytes()
        assert (tmp_path / "a" / "checkpoints" / "o2m_seed0.bin").exists()
        with open(tmp_path / "a" / "regime_table.csv") as fh:
            assert [r["regime"] for r in csv.DictReader(fh)] == ["o2m", "o2o_loc_cls_pred"]

    def test_unknown_regime_exits_2(self, tmp_path):
        assert main(["train", "--regime", "nope", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_crowd_smoke(self, tmp_path):
        exp = dict(SMALL_EXPERIMENT, scene=dict(SMALL_EXPERIMENT["scene"], num_classes=1, crowded=True,
                                                 min_objects=3, max_objects=4))
        cfg = write_config(tmp_path / "c.json", crowd={"crowd": {"experiment": exp, "nms_thresholds": [0.5]}})
        assert main(["crowd", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
        with open(tmp_path / "crowd_seed0.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert {(r["source"], r["nms_iou"]) for r in rows} == {
            ("annotation", "none"), ("annotation", "0.5"), ("model", "none"), ("model", "0.5")}


def test_regime_table_ignores_missing_gaps():
    rows = [{"regime": "x", "ap": 1.0, "ap_nms": 2.0, "nms_delta": 1.0, "gap": None, "top1": None, "redundancy": 1.0},
            {"regime": "x", "ap": 3.0, "ap_nms": 2.0, "nms_delta": -1.0, "gap": 0.4, "top1": 0.9, "redundancy": 1.0}]
    (row,) = regime_table(rows)
    assert row["ap"] == 2.0 and row["nms_delta"] == 0.0 and row["gap"] == 0.4
