"""Pixel confusion counts, per-class scores and threshold curves.

Dataset scores pool confusion counts over all samples before dividing. A
score whose denominator is zero is undefined and reported as ``None``
(rendered ``n/a`` in CSV output).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import CLASS_NAMES, N_CLASSES

METRIC_NAMES = ("iou", "dice", "precision", "recall", "specificity")


@dataclass
class ConfusionMatrix:
    """One-vs-rest pixel counts per class (index 0 = BG, 1 = TC, 2 = AR)."""

    tp: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES, np.int64))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES, np.int64))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES, np.int64))
    tn: np.ndarray = field(default_factory=lambda: np.zeros(N_CLASSES, np.int64))

    @property
    def total(self) -> np.ndarray:
        return self.tp + self.fp + self.fn + self.tn

    def __eq__(self, other) -> bool:
        if not isinstance(other, ConfusionMatrix):
            return NotImplemented
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("tp", "fp", "fn", "tn"))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return merge(self, other)


def confusion_matrix(pred, truth, class_count: int = N_CLASSES) -> ConfusionMatrix:
    pred = np.asarray(pred).astype(np.int64, copy=False)
    truth = np.asarray(truth).astype(np.int64, copy=False)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    for arr, label in ((pred, "prediction"), (truth, "truth")):
        if arr.size and (arr.min() < 0 or arr.max() >= class_count):
            raise ValueError(f"{label} labels must lie in [0, {class_count})")
    joint = np.bincount((truth * class_count + pred).ravel(),
                        minlength=class_count * class_count).reshape(class_count, class_count)
    tp = np.diag(joint).copy()
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    tn = joint.sum() - tp - fp - fn
    return ConfusionMatrix(tp, fp, fn, tn)


def merge(a: ConfusionMatrix, b: ConfusionMatrix) -> ConfusionMatrix:
    return ConfusionMatrix(a.tp + b.tp, a.fp + b.fp, a.fn + b.fn, a.tn + b.tn)


def merge_all(cms: Iterable[ConfusionMatrix]) -> ConfusionMatrix:
    out = ConfusionMatrix()
    for cm in cms:
        out = merge(out, cm)
    return out


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else int(num) / int(den)


@dataclass
class MetricsReport:
    """``scores[class_index][metric]`` -> float or None."""

    scores: list[dict[str, Optional[float]]]

    def get(self, class_index: int, metric: str) -> Optional[float]:
        return self.scores[class_index][metric]

    def rows(self, split: str = ""):
        for c, per in enumerate(self.scores):
            for m in METRIC_NAMES:
                yield split, CLASS_NAMES[c], m, per[m]


def metrics_from_cm(cm: ConfusionMatrix) -> MetricsReport:
    scores = []
    for c in range(len(cm.tp)):
        tp, fp, fn, tn = (int(cm.tp[c]), int(cm.fp[c]), int(cm.fn[c]), int(cm.tn[c]))
        scores.append({
            "iou": _ratio(tp, tp + fp + fn),
            "dice": _ratio(2 * tp, 2 * tp + fp + fn),
            "precision": _ratio(tp, tp + fp),
            "recall": _ratio(tp, tp + fn),
            "specificity": _ratio(tn, tn + fp),
        })
    return MetricsReport(scores)


def format_value(v: Optional[float]) -> str:
    return "n/a" if v is None else repr(float(v))


def report_csv(reports: dict[str, MetricsReport]) -> str:
    """Columns: split, class, metric, value."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "class", "metric", "value"])
    for split, rep in reports.items():
        for row in rep.rows(split):
            w.writerow(row[:3] + (format_value(row[3]),))
    return buf.getvalue()


# ----------------------------------------------------------------------------
# threshold curves
# ----------------------------------------------------------------------------

@dataclass
class CurveSeries:
    """``points`` are ``(threshold, x, y)``; PR uses (recall, precision), ROC uses
    (1 - specificity, sensitivity). ``operating_point`` is the hard-argmax point."""

    class_id: int
    kind: str
    points: list[tuple[float, float, float]]
    operating_point: Optional[tuple[float, float]] = None


def default_thresholds(count: int = 101) -> np.ndarray:
    if count < 2:
        raise ValueError("need at least two thresholds")
    return np.linspace(1.0, 0.0, count)


def threshold_counts(probs: Sequence[np.ndarray], truths: Sequence[np.ndarray], class_id: int,
                     thresholds) -> np.ndarray:
    """(T, 4) int64 array of (TP, FP, FN, TN) per threshold, pooled over samples."""
    thr = np.asarray(thresholds, dtype=np.float64)
    counts = np.zeros((len(thr), 4), np.int64)
    for p, t in zip(probs, truths):
        score = np.asarray(p)[..., class_id, :, :].ravel()
        pos = (np.asarray(t) == class_id).ravel()
        # number of scores >= each threshold, split by truth
        s_pos = np.sort(score[pos])
        s_neg = np.sort(score[~pos])
        tp = len(s_pos) - np.searchsorted(s_pos, thr, side="left")
        fp = len(s_neg) - np.searchsorted(s_neg, thr, side="left")
        counts[:, 0] += tp
        counts[:, 1] += fp
        counts[:, 2] += len(s_pos) - tp
        counts[:, 3] += len(s_neg) - fp
    return counts


def pr_roc_curves(probs: Sequence[np.ndarray], truths: Sequence[np.ndarray], class_id: int,
                  thresholds=None) -> tuple[CurveSeries, CurveSeries]:
    """One-vs-rest PR and ROC series; a pixel is positive iff its class
    probability is >= the threshold."""
    probs, truths = list(probs), list(truths)
    if not probs or len(probs) != len(truths):
        raise ValueError("need a non-empty list of probability fields with matching truths")
    thr = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if thr.ndim != 1 or len(thr) == 0 or (thr < 0).any() or (thr > 1).any():
        raise ValueError("thresholds must be a non-empty list in [0, 1]")
    if (np.diff(thr) >= 0).any():
        raise ValueError("thresholds must be strictly decreasing")
    counts = threshold_counts(probs, truths, class_id, thr)
    pr, roc = [], []
    for t, (tp, fp, fn, tn) in zip(thr, counts):
        rec = _ratio(tp, tp + fn)
        prec = _ratio(tp, tp + fp)
        fpr = _ratio(fp, tn + fp)
        if rec is not None and prec is not None:
            pr.append((float(t), rec, prec))
        if rec is not None and fpr is not None:
            roc.append((float(t), fpr, rec))
    cm = merge_all(confusion_matrix(np.argmax(np.asarray(p), axis=-3), np.asarray(tr))
                   for p, tr in zip(probs, truths))
    rep = metrics_from_cm(cm).scores[class_id]
    pr_op = (rep["recall"], rep["precision"]) if None not in (rep["recall"], rep["precision"]) else None
    fpr_op = _ratio(int(cm.fp[class_id]), int(cm.fp[class_id] + cm.tn[class_id]))
    roc_op = (fpr_op, rep["recall"]) if None not in (rep["recall"], fpr_op) else None
    return (CurveSeries(class_id, "pr", pr, pr_op), CurveSeries(class_id, "roc", roc, roc_op))


def curves_csv(series: Iterable[CurveSeries]) -> str:
    """Columns: class, threshold, x, y, kind. Operating points use kind
    ``pr_point``/``roc_point`` and threshold ``argmax``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "threshold", "x", "y", "kind"])
    for s in series:
        name = CLASS_NAMES[s.class_id]
        for t, x, y in s.points:
            w.writerow([name, repr(t), repr(x), repr(y), s.kind])
        if s.operating_point is not None:
            w.writerow([name, "argmax", repr(s.operating_point[0]), repr(s.operating_point[1]),
                        f"{s.kind}_point"])
    return buf.getvalue()
