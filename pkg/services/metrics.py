"""
Evaluation Metrics
Unwindowing to per-sample predictions, confusion matrices and macro-F1,
run-length segments, temporal IoU and threshold-averaged mAP reports.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from config.settings import METRICS_SCHEMA_VERSION, TIOU_THRESHOLDS
from services.errors import ConfigError, DataError, ShapeError

logger = logging.getLogger(__name__)

UNCOVERED = -1


@dataclass
class PerSamplePredictions:
    """Per-sample labels and class probabilities; uncovered samples carry label -1 and zero probabilities"""
    labels: np.ndarray  # [N]
    probs: np.ndarray  # [N, n_classes]
    covered: np.ndarray  # [N] bool

    @property
    def n_samples(self) -> int:
        return len(self.labels)


def unwindow(
    ranges: np.ndarray,
    window_probs: np.ndarray,
    n_samples: int,
    overlap: Literal["last", "majority"] = "last",
) -> PerSamplePredictions:
    """
    Map window predictions back onto the sample timeline.

    With overlap="last" every sample takes the prediction of the last window
    covering it. With overlap="majority" it takes the class predicted by most
    covering windows (ties to the lower class index) and the mean probability.
    """
    ranges = np.asarray(ranges, dtype=np.int64).reshape(-1, 2)
    window_probs = np.asarray(window_probs, dtype=np.float64)
    if window_probs.ndim != 2 or window_probs.shape[0] != ranges.shape[0]:
        raise ShapeError("unwindow", ranges.shape, window_probs.shape, detail="one probability row per window")
    if overlap not in ("last", "majority"):
        raise ConfigError(f"unknown overlap resolution {overlap!r}")
    n_classes = window_probs.shape[1]
    for start, end in ranges:
        if start < 0 or end > n_samples or start >= end:
            raise DataError(f"window range [{start}, {end}) outside recording [0, {n_samples})")

    covered = np.zeros(n_samples, dtype=bool)
    if overlap == "last":
        probs = np.zeros((n_samples, n_classes))
        for (start, end), p in zip(ranges, window_probs):
            probs[start:end] = p
            covered[start:end] = True
        labels = np.where(covered, probs.argmax(axis=1), UNCOVERED)
    else:
        votes = np.zeros((n_samples, n_classes), dtype=np.int64)
        prob_sum = np.zeros((n_samples, n_classes))
        hits = np.zeros(n_samples, dtype=np.int64)
        winners = window_probs.argmax(axis=1)
        for (start, end), p, c in zip(ranges, window_probs, winners):
            votes[start:end, c] += 1
            prob_sum[start:end] += p
            hits[start:end] += 1
        covered = hits > 0
        probs = np.where(covered[:, None], prob_sum / np.maximum(hits, 1)[:, None], 0.0)
        labels = np.where(covered, votes.argmax(axis=1), UNCOVERED)
    return PerSamplePredictions(labels=labels.astype(np.int64), probs=probs, covered=covered)


def unwindow_labels(ranges: np.ndarray, window_labels: np.ndarray, n_samples: int, n_classes: int) -> PerSamplePredictions:
    """Unwindow hard labels by treating them as one-hot probabilities"""
    one_hot = np.eye(n_classes)[np.asarray(window_labels, dtype=np.int64)]
    return unwindow(ranges, one_hot, n_samples)


# =====================================================
# F1 AND CONFUSION
# =====================================================

def _check_pair(pred: np.ndarray, truth: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ShapeError("metrics", pred.shape, truth.shape, detail="prediction and truth lengths differ")
    return pred, truth


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are ground-truth classes, columns predicted classes"""
    pred, truth = _check_pair(pred, truth)
    if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= n_classes):
        raise DataError(f"class index outside [0, {n_classes})")
    return np.bincount(truth * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def f1_from_confusion(confusion: np.ndarray) -> np.ndarray:
    """Per-class F1; NaN for classes absent from both prediction and truth"""
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    f1 = np.full(confusion.shape[0], np.nan)
    for c in range(confusion.shape[0]):
        if predicted[c] == 0 and actual[c] == 0:
            continue
        precision = tp[c] / predicted[c] if predicted[c] else 0.0
        recall = tp[c] / actual[c] if actual[c] else 0.0
        f1[c] = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return f1


def per_class_f1(pred: np.ndarray, truth: np.ndarray, n_classes: int) -> np.ndarray:
    return f1_from_confusion(confusion_matrix(pred, truth, n_classes))


def macro_f1(
    pred: np.ndarray, truth: np.ndarray, n_classes: int, classes: Optional[Sequence[int]] = None
) -> float:
    """Unweighted mean F1 over `classes` (default all) that occur in prediction or truth"""
    f1 = per_class_f1(pred, truth, n_classes)
    if classes is not None:
        f1 = f1[list(classes)]
    f1 = f1[~np.isnan(f1)]
    return float(f1.mean()) if f1.size else 0.0


def normalize_rows(confusion: np.ndarray) -> np.ndarray:
    totals = confusion.sum(axis=1, keepdims=True).astype(np.float64)
    return np.divide(confusion, totals, out=np.zeros(confusion.shape), where=totals > 0)


# =====================================================
# SEGMENTS
# =====================================================

@dataclass(frozen=True)
class Segment:
    """Half-open sample interval [start, end) predicted or annotated as one class"""
    start: int
    end: int
    label: int
    confidence: float = 1.0

    def __post_init__(self):
        if self.start >= self.end:
            raise DataError(f"segment start {self.start} must precede end {self.end}")

    @property
    def length(self) -> int:
        return self.end - self.start


def _runs(labels: np.ndarray) -> List[Tuple[int, int, int]]:
    labels = np.asarray(labels)
    if labels.size == 0:
        return []
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [labels.size]])
    return [(int(s), int(e), int(labels[s])) for s, e in zip(starts, ends)]


def rle_segments(pred: PerSamplePredictions, null_class: Optional[int] = None) -> List[Segment]:
    """Maximal constant-class runs; uncovered and null runs are dropped"""
    segments = []
    for start, end, label in _runs(pred.labels):
        if label == UNCOVERED or label == null_class:
            continue
        confidence = float(pred.probs[start:end, label].mean())
        segments.append(Segment(start, end, label, confidence))
    return segments


def segments_from_labels(
    labels: np.ndarray, null_class: Optional[int] = None, mask: Optional[np.ndarray] = None
) -> List[Segment]:
    """Ground-truth segments; samples outside `mask` are treated as unannotated"""
    labels = np.asarray(labels, dtype=np.int64)
    if mask is not None:
        labels = np.where(mask, labels, UNCOVERED)
    return [
        Segment(start, end, label)
        for start, end, label in _runs(labels)
        if label != UNCOVERED and label != null_class
    ]


def tiou(a: Segment, b: Segment) -> float:
    intersection = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = a.length + b.length - intersection
    return intersection / union if union > 0 else 0.0


# =====================================================
# AVERAGE PRECISION
# =====================================================

def ap_from_pr(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-points interpolated area under the precision envelope"""
    mprec = np.hstack([[0.0], precision, [0.0]])
    mrec = np.hstack([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1]) + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def match_detections(
    predictions: Sequence[Segment], ground_truth: Sequence[Segment], threshold: float
) -> np.ndarray:
    """
    Greedy one-to-one matching in descending confidence order (ties keep input
    order). Each prediction takes the unmatched ground truth with the highest
    tIoU at or above threshold. Returns the true-positive flag per ranked prediction.
    """
    matched = [False] * len(ground_truth)
    tp = np.zeros(len(predictions))
    for rank, p in enumerate(predictions):
        best, best_iou = -1, threshold
        for g, gt in enumerate(ground_truth):
            if matched[g]:
                continue
            overlap = tiou(p, gt)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = g, overlap
        if best >= 0:
            matched[best] = True
            tp[rank] = 1.0
    return tp


def rank_predictions(segments: Sequence[Segment]) -> List[Segment]:
    order = np.argsort([-s.confidence for s in segments], kind="stable")
    return [segments[i] for i in order]


def average_precision(
    pred_segments: Sequence[Segment], gt_segments: Sequence[Segment], label: int, threshold: float
) -> Optional[float]:
    """AP of one class at one tIoU threshold; None when the class has no ground truth"""
    gt = [s for s in gt_segments if s.label == label]
    if not gt:
        logger.debug(f"Class {label} has no ground-truth segments; AP undefined")
        return None
    ranked = rank_predictions([s for s in pred_segments if s.label == label])
    if not ranked:
        return 0.0
    tp = match_detections(ranked, gt, threshold)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    precision = tp_cum / (tp_cum + fp_cum)
    recall = tp_cum / len(gt)
    return ap_from_pr(precision, recall)


def validate_thresholds(thresholds: Sequence[float]) -> List[float]:
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ConfigError("at least one tIoU threshold is required")
    if any(not 0.0 < t <= 1.0 for t in thresholds):
        raise ConfigError(f"tIoU thresholds must lie in (0, 1], got {thresholds}")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigError(f"tIoU thresholds must be strictly increasing, got {thresholds}")
    return thresholds


def subject_map(
    pred_segments: Sequence[Segment],
    gt_segments: Sequence[Segment],
    classes: Sequence[int],
    thresholds: Sequence[float],
) -> Tuple[Optional[float], Dict[str, Optional[float]]]:
    """Class-averaged AP per threshold and its threshold average (None when no class has ground truth)"""
    per_threshold: Dict[str, Optional[float]] = {}
    for threshold in thresholds:
        aps = [average_precision(pred_segments, gt_segments, c, threshold) for c in classes]
        aps = [ap for ap in aps if ap is not None]
        per_threshold[f"{threshold:.2f}"] = float(np.mean(aps)) if aps else None
    defined = [v for v in per_threshold.values() if v is not None]
    return (float(np.mean(defined)) if defined else None), per_threshold


# =====================================================
# REPORTS
# =====================================================

class SubjectMetrics(BaseModel):
    subject_id: str
    seed: Optional[int] = None
    macro_f1: Optional[float] = None
    per_class_f1: List[Optional[float]] = []
    map: Optional[float] = None
    map_per_threshold: Dict[str, Optional[float]] = {}
    confusion: List[List[int]] = []
    n_covered: int = 0


class MetricsReport(BaseModel):
    schema_version: str = METRICS_SCHEMA_VERSION
    n_classes: int
    thresholds: List[float]
    null_class: Optional[int] = None
    subjects: List[SubjectMetrics]
    mean_macro_f1: Optional[float] = None
    mean_map: Optional[float] = None
    per_class_f1: List[Optional[float]] = []
    confusion: List[List[int]] = []


class SeedAggregate(BaseModel):
    """Subject means per seed, then averaged over seeds"""
    seeds: List[int]
    macro_f1_per_seed: List[Optional[float]]
    map_per_seed: List[Optional[float]]
    macro_f1: Optional[float] = None
    macro_f1_std: Optional[float] = None
    map: Optional[float] = None
    map_std: Optional[float] = None


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def _std(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return float(np.std(defined)) if defined else None


def _nan_to_none(values: np.ndarray) -> List[Optional[float]]:
    return [None if np.isnan(v) else float(v) for v in values]


def map_classes(n_classes: int, null_class: Optional[int], include_null: bool = False) -> List[int]:
    return [c for c in range(n_classes) if include_null or c != null_class]


def evaluate_subject(
    subject_id: str,
    pred: PerSamplePredictions,
    truth: np.ndarray,
    n_classes: int,
    thresholds: Sequence[float] = TIOU_THRESHOLDS,
    null_class: Optional[int] = None,
    null_in_f1: bool = True,
    null_in_map: bool = False,
    seed: Optional[int] = None,
) -> SubjectMetrics:
    """F1, confusion and mAP of one held-out subject on covered samples"""
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != pred.labels.shape:
        raise ShapeError("evaluate_subject", pred.labels.shape, truth.shape)
    covered = pred.covered
    confusion = confusion_matrix(pred.labels[covered], truth[covered], n_classes)
    f1 = f1_from_confusion(confusion)
    f1_classes = map_classes(n_classes, null_class, include_null=null_in_f1)
    selected = f1[f1_classes]
    selected = selected[~np.isnan(selected)]

    segment_null = None if null_in_map else null_class
    pred_segments = rle_segments(pred, segment_null)
    gt_segments = segments_from_labels(truth, segment_null, mask=covered)
    mean_ap, per_threshold = subject_map(
        pred_segments, gt_segments, map_classes(n_classes, null_class, null_in_map), thresholds
    )
    return SubjectMetrics(
        subject_id=subject_id,
        seed=seed,
        macro_f1=float(selected.mean()) if selected.size else 0.0,
        per_class_f1=_nan_to_none(f1),
        map=mean_ap,
        map_per_threshold=per_threshold,
        confusion=confusion.tolist(),
        n_covered=int(covered.sum()),
    )


def build_report(
    subjects: Sequence[SubjectMetrics],
    n_classes: int,
    thresholds: Sequence[float] = TIOU_THRESHOLDS,
    null_class: Optional[int] = None,
) -> MetricsReport:
    """Average subject scores; confusion matrices are summed over subjects"""
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    for s in subjects:
        if s.confusion:
            confusion += np.asarray(s.confusion, dtype=np.int64)
    return MetricsReport(
        n_classes=n_classes,
        thresholds=list(thresholds),
        null_class=null_class,
        subjects=list(subjects),
        mean_macro_f1=_mean([s.macro_f1 for s in subjects]),
        mean_map=_mean([s.map for s in subjects]),
        per_class_f1=_nan_to_none(f1_from_confusion(confusion)),
        confusion=confusion.tolist(),
    )


def map_report(
    per_subject_segments: Mapping[str, Tuple[Sequence[Segment], Sequence[Segment]]],
    n_classes: int,
    thresholds: Sequence[float] = TIOU_THRESHOLDS,
    null_class: Optional[int] = None,
) -> MetricsReport:
    """
    mAP from (predicted, ground-truth) segment lists per subject: AP averaged
    over classes per threshold, over thresholds per subject, then over subjects.
    """
    thresholds = validate_thresholds(thresholds)
    classes = map_classes(n_classes, null_class)
    subjects = []
    for subject_id, (pred_segments, gt_segments) in per_subject_segments.items():
        mean_ap, per_threshold = subject_map(pred_segments, gt_segments, classes, thresholds)
        subjects.append(SubjectMetrics(subject_id=subject_id, map=mean_ap, map_per_threshold=per_threshold))
    return build_report(subjects, n_classes, thresholds, null_class)


def aggregate_seeds(reports: Mapping[int, MetricsReport]) -> SeedAggregate:
    """Seeds are averaged last, after subject averaging inside each report"""
    seeds = sorted(reports)
    f1 = [reports[s].mean_macro_f1 for s in seeds]
    maps = [reports[s].mean_map for s in seeds]
    return SeedAggregate(
        seeds=seeds,
        macro_f1_per_seed=f1,
        map_per_seed=maps,
        macro_f1=_mean(f1),
        macro_f1_std=_std(f1),
        map=_mean(maps),
        map_std=_std(maps),
    )
