"""Matching, AP oracle equivalence, mAP/mF1, and confusion matrices."""

import numpy as np
import pytest

from oracles import ap_exhaustive_oracle

from microdet.losses import Box
from microdet.metrics import (
    Detection,
    GroundTruth,
    MatchCounts,
    average_precision,
    confusion_matrix,
    evaluate,
    map_and_mf1,
    match,
    pr_curve_rows,
    precision_recall,
)
from microdet.tensor import DomainError


def det(cls, conf, cx, cy, w=0.1, h=0.1, img="0"):
    return Detection(cls, conf, Box(cx, cy, w, h), img)


def gt(cls, cx, cy, w=0.1, h=0.1, img="0"):
    return GroundTruth(cls, Box(cx, cy, w, h), img)


def random_instance(rng, n_images=3, n_classes=3, max_gts=6, max_dets=12):
    """A random scene where detections jitter around true boxes plus noise."""
    gts, dets = [], []
    for img in range(n_images):
        for _ in range(rng.integers(0, max_gts)):
            cls = int(rng.integers(n_classes))
            cx, cy = rng.uniform(0.2, 0.8, size=2)
            w, h = rng.uniform(0.08, 0.25, size=2)
            gts.append(GroundTruth(cls, Box(cx, cy, w, h), str(img)))
            if rng.random() < 0.8:  # a detection near this gt
                jitter = rng.normal(0, 0.02, size=4)
                dets.append(Detection(
                    int(rng.integers(n_classes)) if rng.random() < 0.2 else cls,
                    float(rng.uniform(0.1, 1.0)),
                    Box(cx + jitter[0], cy + jitter[1],
                        max(0.02, w + jitter[2]), max(0.02, h + jitter[3])),
                    str(img)))
        for _ in range(rng.integers(0, max_dets - max_gts)):
            cls = int(rng.integers(n_classes))
            cx, cy = rng.uniform(0.2, 0.8, size=2)
            w, h = rng.uniform(0.05, 0.2, size=2)
            dets.append(Detection(cls, float(rng.uniform(0.1, 1.0)),
                                  Box(cx, cy, w, h), str(img)))
    return dets, gts


class TestMatch:
    def test_perfect_predictions(self):
        gts = [gt(0, 0.3, 0.3), gt(0, 0.7, 0.7)]
        dets = [det(0, 1.0, 0.3, 0.3), det(0, 1.0, 0.7, 0.7)]
        counts, flags = match(dets, gts, 0.5)
        assert (counts.n_tp, counts.n_fp, counts.n_fn) == (2, 0, 0)
        assert flags == [True, True]

    def test_no_detections(self):
        counts, flags = match([], [gt(0, 0.5, 0.5)] * 3, 0.5)
        assert (counts.n_tp, counts.n_fp, counts.n_fn) == (0, 0, 3)
        assert flags == []

    def test_double_detection_single_match(self):
        """Two hits on one gt: the higher-confidence one is the TP."""
        gts = [gt(0, 0.5, 0.5)]
        dets = [det(0, 0.9, 0.5, 0.5), det(0, 0.8, 0.5, 0.5)]
        counts, flags = match(dets, gts, 0.5)
        assert flags == [True, False]
        assert (counts.n_tp, counts.n_fp, counts.n_fn) == (1, 1, 0)

    def test_cross_image_isolation(self):
        gts = [gt(0, 0.5, 0.5, img="a")]
        dets = [det(0, 0.9, 0.5, 0.5, img="b")]
        counts, _ = match(dets, gts, 0.5)
        assert (counts.n_tp, counts.n_fp, counts.n_fn) == (0, 1, 1)


class TestPrecisionRecall:
    def test_direct_formula(self):
        assert precision_recall(MatchCounts(8, 2, 2)) == (0.8, 0.8)

    def test_no_detection_conventions(self):
        assert precision_recall(MatchCounts(0, 0, 5)) == (0.0, 0.0)

    def test_all_correct(self):
        assert precision_recall(MatchCounts(3, 0, 0)) == (1.0, 1.0)

    def test_vacuous_recall(self):
        assert precision_recall(MatchCounts(0, 2, 0)) == (0.0, 1.0)


class TestAveragePrecision:
    def test_single_tp(self):
        assert average_precision([det(0, 0.9, 0.5, 0.5)], [gt(0, 0.5, 0.5)], 0, 0.5) == 1.0

    def test_fp_before_tp_halves_ap(self):
        dets = [det(0, 0.9, 0.1, 0.1), det(0, 0.8, 0.5, 0.5)]
        ap = average_precision(dets, [gt(0, 0.5, 0.5)], 0, 0.5)
        assert ap == pytest.approx(0.5)

    def test_fp_after_tp_keeps_full_ap(self):
        dets = [det(0, 0.9, 0.5, 0.5), det(0, 0.8, 0.1, 0.1)]
        ap = average_precision(dets, [gt(0, 0.5, 0.5)], 0, 0.5)
        assert ap == pytest.approx(1.0)

    def test_monotone_confidence_transform_invariance(self):
        rng = np.random.default_rng(0)
        dets, gts = random_instance(rng)
        base = average_precision(dets, gts, 0, 0.5)
        squashed = [Detection(d.class_id, d.confidence**3 / 2, d.box, d.image_id)
                    for d in dets]
        assert average_precision(squashed, gts, 0, 0.5) == pytest.approx(base, abs=1e-12)

    def test_matches_exhaustive_oracle_on_random_instances(self):
        """100 random instances: engine AP == per-threshold rematch oracle to 1e-9."""
        rng = np.random.default_rng(1)
        for trial in range(100):
            dets, gts = random_instance(rng)
            cls = int(rng.integers(3))
            iou_t = float(rng.choice([0.5, 0.6, 0.75]))
            fast = average_precision(dets, gts, cls, iou_t)
            slow = ap_exhaustive_oracle(
                [(d.confidence, d.box.corners(), d.image_id)
                 for d in dets if d.class_id == cls],
                [(g.box.corners(), g.image_id) for g in gts if g.class_id == cls],
                iou_t,
            )
            assert abs(fast - slow) <= 1e-9, trial

    def test_adding_detection_never_raises_fn(self):
        rng = np.random.default_rng(2)
        dets, gts = random_instance(rng)
        class_dets = sorted((d for d in dets if d.class_id == 0),
                            key=lambda d: -d.confidence)
        class_gts = [g for g in gts if g.class_id == 0]
        counts_before, _ = match(class_dets, class_gts, 0.5)
        extra = class_dets + [det(0, 0.01, 0.9, 0.9)]
        counts_after, _ = match(extra, class_gts, 0.5)
        assert counts_after.n_fn <= counts_before.n_fn


class TestMapMf1:
    def test_two_class_average(self):
        gts = [gt(0, 0.3, 0.3), gt(1, 0.7, 0.7), gt(1, 0.2, 0.8)]
        dets = [det(0, 0.9, 0.3, 0.3),           # class 0 perfect
                det(1, 0.9, 0.7, 0.7), det(1, 0.8, 0.5, 0.1)]  # class 1: tp then fp
        map50, map50_95, mf1, conf, ap, stats, supported = map_and_mf1(dets, gts, 2)
        assert ap[(0, 0.5)] == 1.0
        assert ap[(1, 0.5)] == pytest.approx(0.5)
        assert map50 == pytest.approx(0.75)

    def test_perfect_everything(self):
        gts = [gt(0, 0.3, 0.3), gt(1, 0.7, 0.7)]
        dets = [det(0, 1.0, 0.3, 0.3), det(1, 1.0, 0.7, 0.7)]
        map50, map50_95, mf1, conf, ap, stats, _ = map_and_mf1(dets, gts, 2)
        assert map50 == 1.0
        assert map50_95 == 1.0
        assert mf1 == 1.0
        for c in (0, 1):
            assert stats[c]["precision"] == 1.0
            assert stats[c]["recall"] == 1.0

    def test_gtless_class_excluded_from_mean(self):
        gts = [gt(0, 0.3, 0.3)]
        dets = [det(0, 1.0, 0.3, 0.3), det(1, 0.9, 0.7, 0.7)]
        map50, _, mf1, _, ap, _, supported = map_and_mf1(dets, gts, 2)
        assert supported == [0]
        assert map50 == 1.0
        assert ap[(1, 0.5)] == 0.0


class TestConfusion:
    def test_perfect_identity_block(self):
        gts = [gt(0, 0.3, 0.3), gt(1, 0.7, 0.7)]
        dets = [det(0, 1.0, 0.3, 0.3), det(1, 1.0, 0.7, 0.7)]
        raw, norm = confusion_matrix(dets, gts, 0.25, 0.5, 2)
        np.testing.assert_array_equal(raw, [[1, 0, 0], [0, 1, 0], [0, 0, 0]])
        np.testing.assert_allclose(norm[0], [1, 0, 0])

    def test_missed_gt_goes_to_background_column(self):
        raw, _ = confusion_matrix([], [gt(1, 0.5, 0.5)], 0.25, 0.5, 2)
        np.testing.assert_array_equal(raw, [[0, 0, 0], [0, 0, 1], [0, 0, 0]])

    def test_spurious_detection_background_row(self):
        raw, _ = confusion_matrix([det(0, 0.9, 0.5, 0.5)], [], 0.25, 0.5, 2)
        assert raw[2, 0] == 1

    def test_cross_class_confusion_recorded(self):
        """Class-agnostic matching books a wrong-class hit at (true, pred)."""
        raw, _ = confusion_matrix([det(1, 0.9, 0.5, 0.5)], [gt(0, 0.5, 0.5)], 0.25, 0.5, 2)
        assert raw[0, 1] == 1

    def test_total_count_conservation(self):
        rng = np.random.default_rng(3)
        dets, gts = random_instance(rng)
        kept = [d for d in dets if d.confidence >= 0.25]
        raw, _ = confusion_matrix(dets, gts, 0.25, 0.5, 3)
        matched = raw[:3, :3].sum()
        assert raw.sum() == matched + (len(gts) - matched) + (len(kept) - matched)

    def test_rows_with_support_sum_to_one(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            dets, gts = random_instance(rng)
            raw, norm = confusion_matrix(dets, gts, 0.25, 0.5, 3)
            for i in range(4):
                if raw[i].sum() > 0:
                    assert abs(norm[i].sum() - 1.0) <= 1e-9
                else:
                    assert norm[i].sum() == 0.0


class TestEvaluate:
    def test_report_fields_and_text(self):
        gts = [gt(0, 0.3, 0.3), gt(1, 0.7, 0.7)]
        dets = [det(0, 1.0, 0.3, 0.3), det(1, 1.0, 0.7, 0.7)]
        rep = evaluate(dets, gts, ["car", "person"])
        assert rep.map50 == 1.0
        assert rep.mf1 == 1.0
        text = rep.to_text()
        assert "map50: 1.000000" in text
        assert "car" in text and "person" in text

    def test_class_id_validation(self):
        with pytest.raises(DomainError):
            evaluate([det(5, 1.0, 0.5, 0.5)], [], ["a"])

    def test_empty_class_names(self):
        with pytest.raises(DomainError):
            evaluate([], [], [])

    def test_pr_curve_rows(self):
        gts = [gt(0, 0.5, 0.5)]
        dets = [det(0, 0.9, 0.5, 0.5), det(0, 0.8, 0.1, 0.1)]
        rows = pr_curve_rows(dets, gts, 0)
        assert rows[0] == (0.9, 1.0, 1.0)
        assert rows[1] == (0.8, 1.0, 0.5)
