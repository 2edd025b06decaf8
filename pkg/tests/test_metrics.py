"""
Unwindowing, F1, segments, tIoU and mAP, with an exhaustive matching oracle
for average precision.
"""
import itertools

import numpy as np
import pytest

from services.errors import ConfigError, DataError, ShapeError
from services.metrics import (
    UNCOVERED,
    MetricsReport,
    PerSamplePredictions,
    Segment,
    aggregate_seeds,
    average_precision,
    build_report,
    confusion_matrix,
    evaluate_subject,
    macro_f1,
    map_report,
    match_detections,
    normalize_rows,
    per_class_f1,
    rank_predictions,
    rle_segments,
    segments_from_labels,
    subject_map,
    tiou,
    unwindow,
    unwindow_labels,
    validate_thresholds,
)


def _predictions(labels, probs=None, n_classes=3):
    labels = np.asarray(labels)
    if probs is None:
        probs = np.eye(n_classes)[labels]
    return PerSamplePredictions(labels=labels, probs=np.asarray(probs, dtype=float), covered=labels >= 0)


# =====================================================
# UNWINDOWING
# =====================================================

class TestUnwindow:
    def test_tiling_windows_repeat_labels(self):
        ranges = np.array([[0, 4], [4, 8], [8, 12]])
        pred = unwindow_labels(ranges, [2, 0, 1], 12, 3)
        np.testing.assert_array_equal(pred.labels, [2] * 4 + [0] * 4 + [1] * 4)
        assert pred.covered.all()
        # windowing the per-sample labels again gives back the window labels
        np.testing.assert_array_equal([pred.labels[s] for s, _ in ranges], [2, 0, 1])

    def test_last_window_wins(self):
        pred = unwindow_labels(np.array([[0, 50], [25, 75]]), [0, 1], 75, 2)
        np.testing.assert_array_equal(pred.labels[:25], 0)
        np.testing.assert_array_equal(pred.labels[25:75], 1)

    def test_uncovered_tail(self):
        pred = unwindow_labels(np.array([[0, 50], [25, 75]]), [0, 1], 85, 2)
        assert (~pred.covered).sum() == 10
        assert not pred.covered[75:].any()
        np.testing.assert_array_equal(pred.labels[75:], UNCOVERED)
        np.testing.assert_array_equal(pred.probs[75:], 0.0)

    def test_majority_resolution(self):
        ranges = np.array([[0, 6], [2, 8], [4, 10]])
        probs = np.array([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7]])
        pred = unwindow(ranges, probs, 10, overlap="majority")
        # samples 4-5 are covered by all three windows: two votes for class 0
        np.testing.assert_array_equal(pred.labels[4:6], 0)
        np.testing.assert_allclose(pred.probs[4], [2.0 / 3, 1.0 / 3])
        np.testing.assert_array_equal(pred.labels[8:], 1)

    def test_range_outside_recording(self):
        with pytest.raises(DataError):
            unwindow_labels(np.array([[0, 5], [3, 12]]), [0, 1], 10, 2)

    def test_one_row_per_window(self):
        with pytest.raises(ShapeError):
            unwindow(np.array([[0, 5]]), np.ones((2, 2)), 10)

    def test_unknown_overlap_rule(self):
        with pytest.raises(ConfigError):
            unwindow(np.array([[0, 5]]), np.ones((1, 2)), 10, overlap="first")


# =====================================================
# F1 AND CONFUSION
# =====================================================

class TestF1:
    def test_perfect(self):
        labels = np.array([0, 1, 2, 2, 1])
        assert macro_f1(labels, labels, 3) == 1.0

    def test_hand_computed(self):
        f1 = per_class_f1(np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]), 2)
        np.testing.assert_allclose(f1, [0.5, 0.5])
        assert macro_f1(np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]), 2) == pytest.approx(0.5)

    def test_never_predicted_class_counts_as_zero(self):
        score = macro_f1(np.array([0, 1, 1]), np.array([0, 1, 2]), 3)
        assert score == pytest.approx((1.0 + 2.0 / 3 + 0.0) / 3)

    def test_absent_class_is_skipped(self):
        f1 = per_class_f1(np.array([0, 1]), np.array([0, 1]), 3)
        assert np.isnan(f1[2])
        assert macro_f1(np.array([0, 1]), np.array([0, 1]), 3) == 1.0

    def test_class_subset(self):
        pred, truth = np.array([0, 0, 1]), np.array([0, 1, 1])
        assert macro_f1(pred, truth, 2, classes=[1]) == pytest.approx(2.0 / 3)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            macro_f1(np.array([0, 1]), np.array([0]), 2)

    def test_confusion_rows_are_truth(self):
        cm = confusion_matrix(np.array([1, 1, 0]), np.array([0, 1, 1]), 2)
        np.testing.assert_array_equal(cm, [[0, 1], [1, 1]])
        np.testing.assert_allclose(normalize_rows(cm), [[0.0, 1.0], [0.5, 0.5]])

    def test_normalize_empty_row(self):
        np.testing.assert_array_equal(normalize_rows(np.array([[0, 0], [1, 3]])), [[0.0, 0.0], [0.25, 0.75]])


# =====================================================
# SEGMENTS AND TIOU
# =====================================================

class TestSegments:
    def test_runs(self):
        segments = rle_segments(_predictions([0, 0, 1, 1, 1]))
        assert [(s.start, s.end, s.label) for s in segments] == [(0, 2, 0), (2, 5, 1)]

    def test_all_null(self):
        assert rle_segments(_predictions([0, 0, 0]), null_class=0) == []

    def test_confidence_is_mean_probability(self):
        probs = np.array([[0.1, 0.9], [0.3, 0.7]])
        (segment,) = rle_segments(_predictions([1, 1], probs, n_classes=2))
        assert segment.confidence == pytest.approx(0.8)

    def test_uncovered_samples_break_runs(self):
        segments = rle_segments(_predictions([1, 1, -1, 1], np.zeros((4, 3))))
        assert [(s.start, s.end) for s in segments] == [(0, 2), (3, 4)]

    def test_ground_truth_mask(self):
        segments = segments_from_labels(np.array([2, 2, 2, 0, 1]), null_class=0, mask=np.array([1, 1, 0, 1, 1], bool))
        assert [(s.start, s.end, s.label) for s in segments] == [(0, 2, 2), (4, 5, 1)]

    def test_empty_segment_rejected(self):
        with pytest.raises(DataError):
            Segment(5, 5, 1)

    def test_tiou(self):
        assert tiou(Segment(3, 9, 1), Segment(3, 9, 1)) == 1.0
        assert tiou(Segment(0, 5, 1), Segment(5, 9, 1)) == 0.0
        assert tiou(Segment(10, 20, 1), Segment(15, 25, 1)) == pytest.approx(1.0 / 3)

    def test_rank_is_stable(self):
        segments = [Segment(0, 1, 1, 0.5), Segment(2, 3, 1, 0.9), Segment(4, 5, 1, 0.5)]
        assert [s.start for s in rank_predictions(segments)] == [2, 0, 4]


# =====================================================
# AVERAGE PRECISION
# =====================================================

def _oracle_ap(preds, gts, threshold):
    """
    Enumerate every one-to-one assignment of ranked predictions to ground truth
    and keep the one whose per-rank (tIoU, -gt index) sequence is largest.
    """
    ranked = sorted(preds, key=lambda s: -s.confidence)
    options = [[None] + [g for g, gt in enumerate(gts) if tiou(p, gt) >= threshold] for p in ranked]
    best_key, best = None, None
    for choice in itertools.product(*options):
        used = [g for g in choice if g is not None]
        if len(used) != len(set(used)):
            continue
        key = [(-1.0, 0) if g is None else (tiou(p, gts[g]), -g) for p, g in zip(ranked, choice)]
        if best_key is None or key > best_key:
            best_key, best = key, choice
    tp = [g is not None for g in best]
    precision = []
    hits = 0
    for k, hit in enumerate(tp):
        hits += hit
        precision.append(hits / (k + 1))
    total = 0.0
    for k, hit in enumerate(tp):
        if hit:
            total += max(precision[k:]) / len(gts)
    return total


def _random_segments(rng, count, label=1, with_confidence=False):
    segments = []
    for _ in range(count):
        start = int(rng.integers(0, 12))
        length = int(rng.integers(1, 7))
        confidence = float(rng.choice([0.2, 0.5, 0.5, 0.8, 0.9])) if with_confidence else 1.0
        segments.append(Segment(start, start + length, label, confidence))
    return segments


class TestAveragePrecision:
    def test_exact_match(self):
        gt = [Segment(10, 20, 1)]
        assert average_precision([Segment(10, 20, 1, 0.7)], gt, 1, 0.5) == 1.0

    def test_no_ground_truth_is_undefined(self):
        assert average_precision([Segment(0, 4, 2)], [Segment(0, 4, 1)], 2, 0.5) is None

    def test_no_predictions(self):
        assert average_precision([], [Segment(0, 4, 1)], 1, 0.5) == 0.0

    def test_other_classes_ignored(self):
        preds = [Segment(0, 4, 2, 0.99), Segment(0, 4, 1, 0.5)]
        assert average_precision(preds, [Segment(0, 4, 1)], 1, 0.5) == 1.0

    def test_false_positive_ranked_first(self):
        preds = [Segment(50, 60, 1, 0.9), Segment(0, 10, 1, 0.8)]
        assert average_precision(preds, [Segment(0, 10, 1)], 1, 0.5) == pytest.approx(0.5)

    def test_duplicate_detection_is_false_positive(self):
        tp = match_detections([Segment(0, 10, 1, 0.9), Segment(0, 10, 1, 0.8)], [Segment(0, 10, 1)], 0.5)
        np.testing.assert_array_equal(tp, [1.0, 0.0])

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(300):
            gts = _random_segments(rng, int(rng.integers(1, 5)))
            preds = _random_segments(rng, int(rng.integers(0, 7)), with_confidence=True)
            threshold = float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9]))
            assert average_precision(preds, gts, 1, threshold) == pytest.approx(
                _oracle_ap(preds, gts, threshold), abs=1e-12
            )

    def test_matches_exhaustive_oracle_at_largest_size(self):
        rng = np.random.default_rng(99)
        for _ in range(40):
            gts = _random_segments(rng, 4)
            preds = _random_segments(rng, 6, with_confidence=True)
            for threshold in (0.1, 0.5):
                assert average_precision(preds, gts, 1, threshold) == pytest.approx(
                    _oracle_ap(preds, gts, threshold), abs=1e-12
                )

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            gts = _random_segments(rng, 3)
            preds = _random_segments(rng, 4, with_confidence=True)
            aps = [average_precision(preds, gts, 1, t) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
            assert all(b <= a + 1e-12 for a, b in zip(aps, aps[1:]))


# =====================================================
# MAP REPORTS
# =====================================================

class TestMapReport:
    def test_perfect_predictions(self):
        gt = [Segment(0, 10, 1), Segment(10, 30, 2), Segment(40, 45, 1)]
        preds = [Segment(s.start, s.end, s.label, 0.9) for s in gt]
        report = map_report({"a": (preds, gt), "b": (preds, gt)}, n_classes=3, null_class=0)
        assert report.mean_map == 1.0
        for subject in report.subjects:
            assert set(subject.map_per_threshold) == {"0.30", "0.40", "0.50", "0.60", "0.70"}
            assert all(v == 1.0 for v in subject.map_per_threshold.values())

    def test_eighty_percent_overlap(self):
        gt = [Segment(0, 100, 1), Segment(200, 300, 2)]
        preds = [Segment(0, 80, 1, 0.9), Segment(220, 300, 2, 0.9)]
        report = map_report({"a": (preds, gt)}, n_classes=3, thresholds=[0.5, 0.8, 0.85, 0.9], null_class=0)
        assert report.subjects[0].map_per_threshold == {"0.50": 1.0, "0.80": 1.0, "0.85": 0.0, "0.90": 0.0}
        assert report.mean_map == pytest.approx(0.5)

    def test_averaging_order(self):
        gt = [Segment(0, 10, 1), Segment(20, 30, 2)]
        # subject a: class 1 found, class 2 missed -> 0.5 at every threshold
        partial = [Segment(0, 10, 1, 0.9)]
        # subject b: class 2 only found at loose thresholds
        loose = [Segment(0, 10, 1, 0.9), Segment(20, 26, 2, 0.9)]
        report = map_report({"a": (partial, gt), "b": (loose, gt)}, n_classes=3, thresholds=[0.5, 0.7], null_class=0)
        a, b = report.subjects
        assert a.map == pytest.approx(0.5)
        assert b.map_per_threshold == {"0.50": 1.0, "0.70": 0.5}
        assert b.map == pytest.approx(0.75)
        assert report.mean_map == pytest.approx((0.5 + 0.75) / 2)

    def test_class_without_ground_truth_skipped(self):
        gt = [Segment(0, 10, 1)]
        preds = [Segment(0, 10, 1, 0.9), Segment(20, 30, 2, 0.9)]
        mean_ap, _ = subject_map(preds, gt, classes=[1, 2], thresholds=[0.5])
        assert mean_ap == 1.0

    @pytest.mark.parametrize("thresholds", [[], [0.0, 0.5], [0.5, 0.3], [0.5, 1.2]])
    def test_invalid_thresholds(self, thresholds):
        with pytest.raises(ConfigError):
            validate_thresholds(thresholds)


class TestSubjectEvaluation:
    def test_null_in_f1_not_in_map(self):
        truth = np.array([0] * 10 + [1] * 10 + [2] * 10)
        pred = _predictions(truth)
        metrics = evaluate_subject("s", pred, truth, 3, thresholds=[0.5], null_class=0)
        assert metrics.macro_f1 == 1.0
        assert metrics.map == 1.0
        assert metrics.n_covered == 30
        # null predicted everywhere: F1 includes the null class, mAP ignores it
        wrong = _predictions(np.zeros(30, dtype=int))
        metrics = evaluate_subject("s", wrong, truth, 3, thresholds=[0.5], null_class=0)
        assert metrics.per_class_f1[0] == pytest.approx(0.5)
        assert metrics.macro_f1 == pytest.approx(0.5 / 3)
        assert metrics.map == 0.0

    def test_uncovered_samples_excluded(self):
        truth = np.array([1] * 10 + [2] * 5)
        labels = np.array([1] * 10 + [-1] * 5)
        probs = np.vstack([np.eye(3)[[1] * 10], np.zeros((5, 3))])
        metrics = evaluate_subject("s", _predictions(labels, probs), truth, 3, thresholds=[0.5])
        assert metrics.n_covered == 10
        assert metrics.macro_f1 == 1.0
        assert metrics.map == 1.0

    def test_report_sums_confusions(self):
        truth = np.array([0, 1, 1])
        s1 = evaluate_subject("a", _predictions([0, 1, 1]), truth, 3, thresholds=[0.5])
        s2 = evaluate_subject("b", _predictions([0, 0, 1]), truth, 3, thresholds=[0.5])
        report = build_report([s1, s2], 3, thresholds=[0.5])
        np.testing.assert_array_equal(report.confusion, [[2, 0, 0], [1, 3, 0], [0, 0, 0]])
        assert report.mean_macro_f1 == pytest.approx((s1.macro_f1 + s2.macro_f1) / 2)
        assert report.schema_version == "1.0"

    def test_seeds_averaged_last(self):
        def report(f1, m):
            return MetricsReport(n_classes=2, thresholds=[0.5], subjects=[], mean_macro_f1=f1, mean_map=m)

        agg = aggregate_seeds({2: report(0.6, 0.2), 1: report(0.8, 0.4)})
        assert agg.seeds == [1, 2]
        assert agg.macro_f1_per_seed == [0.8, 0.6]
        assert agg.macro_f1 == pytest.approx(0.7)
        assert agg.macro_f1_std == pytest.approx(0.1)
        assert agg.map == pytest.approx(0.3)
