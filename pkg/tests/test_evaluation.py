import math

import numpy as np
import pytest

from incdet import evaluation
from incdet.detector import Detection
from incdet.evaluation import (EvalResult, average_precision, evaluate, format_gap, format_table, gap_metrics, iou,
                               iou_matrix)
from incdet.synth import AnnotatedImage
from oracles import brute_ap


class TestIou:
    def test_identity(self):
        assert iou((0, 0, 1, 2), (0, 0, 1, 2)) == 1.0

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_one_seventh(self):
        assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)

    def test_zero_area(self):
        before = evaluation.diagnostics["degenerate_iou"]
        assert iou((0, 0, 0, 1), (0, 0, 1, 1)) == 0.0
        assert evaluation.diagnostics["degenerate_iou"] == before + 1

    def test_matrix_matches_scalar(self, rng):
        a = np.sort(rng.random((5, 2, 2)), axis=1).reshape(5, 4)[:, [0, 2, 1, 3]]
        b = np.sort(rng.random((3, 2, 2)), axis=1).reshape(3, 4)[:, [0, 2, 1, 3]]
        m = iou_matrix(a, b)
        for i in range(5):
            for j in range(3):
                assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-15)


BOX = (0.5, 0.5, 0.2, 0.2)


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([(0, 0.9, BOX)], [(0, BOX)], 0.5) == 1.0

    def test_total_miss(self):
        assert average_precision([], [(0, BOX)], 0.5) == 0.0

    def test_tp_then_fp(self):
        dets = [(0, 0.9, BOX), (0, 0.8, (0.1, 0.1, 0.1, 0.1))]
        out = average_precision(dets, [(0, BOX)], 0.5)
        assert out == pytest.approx(brute_ap(dets, [(0, BOX)], 0.5)) and out == 1.0

    def test_fp_then_tp(self):
        dets = [(0, 0.9, (0.1, 0.1, 0.1, 0.1)), (0, 0.8, BOX)]
        assert average_precision(dets, [(0, BOX)], 0.5) == pytest.approx(0.5)

    def test_absent_class(self):
        assert average_precision([], [], 0.5) == 1.0
        assert math.isnan(average_precision([(0, 0.5, BOX)], [], 0.5))

    def test_duplicate_detection_is_fp(self):
        dets = [(0, 0.9, BOX), (0, 0.8, BOX)]
        gts = [(0, BOX), (0, (0.1, 0.1, 0.1, 0.1))]
        assert average_precision(dets, gts, 0.5) == pytest.approx(brute_ap(dets, gts, 0.5))

    def test_random_against_brute_force(self, rng):
        for _ in range(30):
            gts = [(int(rng.integers(3)), tuple(rng.uniform(0.2, 0.8, 2)) + tuple(rng.uniform(0.1, 0.3, 2)))
                   for _ in range(rng.integers(1, 6))]
            dets = [(g[0], float(rng.random()), tuple(np.array(g[1]) + rng.normal(0, 0.03, 4) * [1, 1, 0.3, 0.3]))
                    for g in gts if rng.random() < 0.8]
            dets += [(int(rng.integers(3)), float(rng.random()), (0.5, 0.5, 0.1, 0.1))
                     for _ in range(rng.integers(0, 4))]
            for t in (0.5, 0.75):
                assert average_precision(dets, gts, t) == pytest.approx(brute_ap(dets, gts, t), abs=1e-12)

    def test_monotone_rescoring_invariant(self, rng):
        gts = [(i, BOX) for i in range(4)]
        dets = [(i, float(rng.random()), BOX if i % 2 else (0.2, 0.2, 0.1, 0.1)) for i in range(4)]
        squashed = [(i, s ** 3 * 0.5, b) for i, s, b in dets]
        assert average_precision(dets, gts, 0.5) == average_precision(squashed, gts, 0.5)

    def test_lowest_score_fp_never_helps(self, rng):
        gts = [(i, BOX) for i in range(5)]
        dets = [(i, float(rng.uniform(0.2, 1)), BOX) for i in range(3)]
        base = average_precision(dets, gts, 0.5)
        assert average_precision(dets + [(0, 0.1, (0.1, 0.1, 0.05, 0.05))], gts, 0.5) <= base


def _image(image_id, anns):
    return AnnotatedImage(np.zeros((3, 32, 32)), anns, image_id)


class TestEvaluate:
    def test_map_is_mean_of_class_aps(self):
        data = [_image(0, [(BOX, 1), ((0.2, 0.2, 0.1, 0.1), 2)])]
        preds = [[Detection(BOX, 1, 0.9), Detection((0.7, 0.7, 0.1, 0.1), 2, 0.8)]]
        r = evaluate(preds, data, [1, 2, 3])
        assert r.classes == [1, 2]
        assert r.map == pytest.approx(np.mean([r.class_map(1), r.class_map(2)]))
        assert r.class_map(1) == 1.0 and r.class_map(2) == 0.0

    def test_groups(self):
        data = [_image(0, [(BOX, 1), ((0.2, 0.2, 0.1, 0.1), 2)])]
        r = evaluate([[Detection(BOX, 1, 0.9)]], data, [1, 2], groups={"old": [1], "new": [2]})
        assert r.group_map("old") == 1.0 and r.group_map("new") == 0.0
        assert r.to_dict()["groups"]["old"]["mAP"] == 1.0

    def test_empty_group_is_nan(self):
        r = EvalResult({1: [1.0] * 10}, {1: 1}, {"none": []})
        assert math.isnan(r.group_map("none"))

    def test_ap50_and_ap75(self):
        data = [_image(0, [(BOX, 1)])]
        # IoU 0.64 with the GT: counts at 0.5 but not 0.75
        r = evaluate([[Detection((0.5, 0.5, 0.16, 0.16), 1, 0.9)]], data, [1])
        assert r.ap50 == 1.0 and r.ap75 == 0.0


class TestGap:
    def test_equal(self):
        assert gap_metrics(40.0, 40.0) == (0.0, 0.0)

    def test_seventy_plus_ten(self):
        assert format_gap(*gap_metrics(52.4, 54.5)) == ("2.1", "3.9%")

    def test_values(self):
        a, r = gap_metrics(53.0, 54.5)
        assert a == pytest.approx(1.5) and r == pytest.approx(1.5 / 54.5)

    @pytest.mark.parametrize("joint", [0.0, -1.0])
    def test_nonpositive_joint(self, joint):
        with pytest.raises(ValueError):
            gap_metrics(1.0, joint)


def test_format_table():
    out = format_table([{"Model": "x", "all": 0.5234, "gap": float("nan")}], ["Model", "all", "gap"])
    lines = out.splitlines()
    assert lines[0].split(" | ")[1].strip() == "all" and "52.3" in lines[2] and lines[2].rstrip().endswith("-")
