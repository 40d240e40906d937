import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from e2edet import metrics
from e2edet.geometry import BBox, GroundTruth
from e2edet.metrics import COCO_IOU_THRESHOLDS, evaluate, evaluate_ap, evaluate_mmr, recall_at, redundancy
from e2edet.postprocess import Detection

from conftest import random_boxes
from oracles import exhaustive_ap


def D(box, score, cat=0):
    return Detection(BBox.from_seq(box), cat, score)


def G(box, cat=0):
    return GroundTruth(BBox.from_seq(box), cat)


GT_A = [G([0.1, 0.1, 0.3, 0.3]), G([0.6, 0.6, 0.9, 0.9])]


class TestAP:
    def test_perfect_detector(self):
        dets = [[D(g.box.as_list(), 1.0) for g in GT_A]]
        assert evaluate_ap(dets, [GT_A]).ap == 1.0

    def test_no_detections(self):
        assert evaluate_ap([[]], [GT_A]).ap == 0.0

    def test_hand_enumerated_case(self):
        # ranked: TP, FP, TP -> precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1
        dets = [[D([0.1, 0.1, 0.3, 0.3], 0.9), D([0.4, 0.0, 0.5, 0.1], 0.8), D([0.6, 0.6, 0.9, 0.9], 0.7)]]
        r = evaluate_ap(dets, [GT_A], (0.5,))
        expect = (51 * 1.0 + 50 * (2 / 3)) / 101
        assert r.ap == pytest.approx(expect, abs=1e-15)

    def test_needs_ground_truth(self):
        with pytest.raises(ValueError):
            evaluate_ap([[]], [[]])

    def test_array_inputs_match_objects(self, rng):
        boxes = random_boxes(rng, 6)
        scores = rng.uniform(0, 1, 6)
        labels = rng.integers(0, 2, 6)
        dets = [D(b, s, int(c)) for b, s, c in zip(boxes, scores, labels)]
        gts = [G(b, c) for b, c in zip(random_boxes(rng, 3), [0, 1, 1])]
        gt_arr = (np.array([g.box.as_list() for g in gts]), np.array([0, 1, 1]))
        assert evaluate_ap([dets], [gts]).ap == evaluate_ap([(boxes, scores, labels)], [gt_arr]).ap

    def test_exhaustive_oracle_small_instances(self, rng):
        for _ in range(300):
            n_gt = int(rng.integers(1, 4))
            n_det = int(rng.integers(0, 5))
            gboxes = random_boxes(rng, n_gt, min_size=0.1)
            gcats = rng.integers(0, 2, n_gt)
            # detections are jittered copies of gts or random boxes, so IoUs straddle the thresholds
            dboxes = []
            for _ in range(n_det):
                if rng.uniform() < 0.7:
                    b = gboxes[rng.integers(n_gt)] + rng.normal(0, 0.03, 4)
                    b = np.clip(np.sort(b.reshape(2, 2), axis=0).ravel(), 0, 1)
                    b = np.array([min(b[0], b[2]), min(b[1], b[3]), max(b[0], b[2]), max(b[1], b[3])])
                else:
                    b = random_boxes(rng, 1)[0]
                dboxes.append(b)
            scores = np.round(rng.uniform(0, 1, n_det), 1)  # coarse scores create ties
            dcats = rng.integers(0, 2, n_det)
            dets = [(tuple(b), float(s), int(c)) for b, s, c in zip(dboxes, scores, dcats)]
            gts = [(tuple(b), int(c)) for b, c in zip(gboxes, gcats)]
            ours = evaluate_ap([[D(b, s, c) for b, s, c in dets]], [[G(b, c) for b, c in gts]]).ap
            assert ours == exhaustive_ap(dets, gts, COCO_IOU_THRESHOLDS)

    @given(st.integers(0, 2**32 - 1))
    def test_invariant_under_monotone_score_transform(self, seed):
        rng = np.random.default_rng(seed)
        boxes = random_boxes(rng, 12, min_size=0.1)
        scores = rng.uniform(0.01, 1, 12)
        labels = np.zeros(12, dtype=int)
        gts = [(random_boxes(rng, 3, min_size=0.1), np.zeros(3, dtype=int))]
        a = evaluate_ap([(boxes, scores, labels)], gts).ap
        b = evaluate_ap([(boxes, np.sqrt(scores) * 0.5, labels)], gts).ap
        assert a == b


class TestMissRate:
    def test_perfect(self):
        assert evaluate_mmr([[D(g.box.as_list(), 1.0) for g in GT_A]], [GT_A]) == 0.0

    def test_no_detections(self):
        assert evaluate_mmr([[]], [GT_A]) == 1.0

    def test_two_image_tabulation(self):
        # ranked: TP .9, FP .85, FP .8, TP .5, FP .4 over 2 images and 3 gts
        img_a = [G([0.1, 0.1, 0.3, 0.3]), G([0.6, 0.1, 0.9, 0.4])]
        img_b = [G([0.2, 0.5, 0.5, 0.9])]
        dets_a = [D([0.1, 0.1, 0.3, 0.3], 0.9), D([0.0, 0.7, 0.1, 0.8], 0.8)]
        dets_b = [D([0.8, 0.8, 0.9, 0.9], 0.85), D([0.2, 0.5, 0.5, 0.9], 0.5), D([0.7, 0.0, 0.8, 0.1], 0.4)]
        fppi, mr = metrics.miss_rate_curve([dets_a, dets_b], [img_a, img_b])
        np.testing.assert_allclose(fppi, [0, 0, 0.5, 1.0, 1.0, 1.5])
        np.testing.assert_allclose(mr, [1, 2 / 3, 2 / 3, 2 / 3, 1 / 3, 1 / 3])
        expect = math.exp((8 * math.log(2 / 3) + math.log(1 / 3)) / 9)
        assert evaluate_mmr([dets_a, dets_b], [img_a, img_b]) == pytest.approx(expect, rel=1e-12)

    def test_zero_iff_all_matched_within_range(self):
        dets = [[D(GT_A[0].box.as_list(), 0.9), D([0.4, 0.0, 0.5, 0.1], 0.8)]]
        fppi, mr = metrics.miss_rate_curve(dets, [GT_A])
        assert mr.min() > 0 and evaluate_mmr(dets, [GT_A]) > 0
        dets[0].append(D(GT_A[1].box.as_list(), 0.7))
        assert evaluate_mmr(dets, [GT_A]) == 0.0


class TestRecall:
    def test_superset(self):
        dets = [[D(g.box.as_list(), 0.5) for g in GT_A] + [D([0, 0, 0.05, 0.05], 0.9)]]
        assert recall_at(dets, [GT_A]) == 1.0

    def test_empty(self):
        assert recall_at([[]], [GT_A]) == 0.0

    @given(st.integers(0, 2**32 - 1))
    def test_nonincreasing_in_threshold(self, seed):
        rng = np.random.default_rng(seed)
        dets = [(random_boxes(rng, 8, min_size=0.1), rng.uniform(0, 1, 8), np.zeros(8, dtype=int))]
        gts = [(random_boxes(rng, 4, min_size=0.1), np.zeros(4, dtype=int))]
        vals = [recall_at(dets, gts, t) for t in (0.9, 0.7, 0.5, 0.3, 0.1)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_max_dets_cap(self):
        dets = [[D(GT_A[0].box.as_list(), 0.9), D(GT_A[1].box.as_list(), 0.1)]]
        assert recall_at(dets, [GT_A], max_dets=1) == 0.5


class TestRedundancy:
    def test_one_per_gt(self):
        assert redundancy([[D(g.box.as_list(), 0.9) for g in GT_A]], [GT_A]) == 1.0

    @pytest.mark.parametrize("k", [2, 3, 5])
    def test_k_duplicates(self, k):
        dets = [[D(g.box.as_list(), 0.9) for g in GT_A for _ in range(k)]]
        assert redundancy(dets, [GT_A]) == k

    def test_tau_excludes_low_scores(self):
        dets = [[D(GT_A[0].box.as_list(), 0.9), D(GT_A[0].box.as_list(), 0.2)]]
        assert redundancy(dets, [GT_A], tau=0.3) == 0.5


class TestEvaluate:
    def test_bundle(self, tmp_path):
        dets = [[D(g.box.as_list(), 1.0) for g in GT_A]]
        r = evaluate(dets, [GT_A], tau=0.3)
        assert (r.ap, r.ap50, r.recall50, r.mmr, r.redundancy) == (1.0, 1.0, 1.0, 0.0, 1.0)
        r.write_pr_csv(tmp_path / "pr.csv")
        lines = (tmp_path / "pr.csv").read_text().splitlines()
        assert lines[0] == "iou_threshold,recall,precision"
        assert len(lines) == 1 + 10 * 101
