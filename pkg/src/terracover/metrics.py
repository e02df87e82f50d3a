"""Multi-label and segmentation metrics.

Multi-label metrics operate on a :class:`MultiLabelBatch` of truth and
predicted label sets over a fixed universe of ``num_labels`` classes. Empty
denominators in precision, recall and F1 evaluate to 0. Pixel metrics ignore
nodata (255) pixels in the truth or prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import MetricError
from .raster import NODATA

F1_MODES = ("sample_averaged", "micro", "macro")


@dataclass
class MultiLabelBatch:
    truths: list[frozenset]
    preds: list[frozenset]
    num_labels: int

    def __init__(self, truths: Iterable[Iterable[int]], preds: Iterable[Iterable[int]],
                 num_labels: int):
        self.truths = [frozenset(t) for t in truths]
        self.preds = [frozenset(p) for p in preds]
        self.num_labels = int(num_labels)
        if len(self.truths) != len(self.preds):
            raise MetricError("truth and prediction lists differ in length")
        if self.num_labels < 1:
            raise MetricError("label universe must contain at least one class")
        for s in self.truths + self.preds:
            if any(not 0 <= i < self.num_labels for i in s):
                raise MetricError(f"label index outside 0..{self.num_labels - 1}")

    def __len__(self):
        return len(self.truths)

    def indicators(self) -> tuple[np.ndarray, np.ndarray]:
        """Boolean ``(N, num_labels)`` truth and prediction matrices."""
        y = np.zeros((len(self), self.num_labels), bool)
        z = np.zeros_like(y)
        for i, (t, p) in enumerate(zip(self.truths, self.preds)):
            y[i, list(t)] = True
            z[i, list(p)] = True
        return y, z


def _nonempty(batch: MultiLabelBatch):
    if len(batch) == 0:
        raise MetricError("empty batch")


def _ratio(num, den):
    """Elementwise num/den with 0/0 -> 0."""
    num = np.asarray(num, float)
    den = np.asarray(den, float)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den != 0)


def cardinality(batch: MultiLabelBatch) -> float:
    _nonempty(batch)
    return sum(len(t) for t in batch.truths) / len(batch)


def density(batch: MultiLabelBatch) -> float:
    """Cardinality divided by the size of the label universe."""
    return cardinality(batch) / batch.num_labels


def exact_match_ratio(batch: MultiLabelBatch) -> tuple[float, float, float]:
    """Fractions ``(exact, partial, incorrect)``.

    ``partial`` is computed as ``1 - (exact + incorrect)`` so that
    ``(exact + incorrect) + partial == 1`` holds exactly in floating point.
    """
    _nonempty(batch)
    n = len(batch)
    exact = sum(t == p for t, p in zip(batch.truths, batch.preds)) / n
    wrong = sum(t != p and not (t & p) for t, p in zip(batch.truths, batch.preds)) / n
    return exact, 1.0 - (exact + wrong), wrong


def confusion_counts(batch: MultiLabelBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class TP, FP, FN image counts."""
    _nonempty(batch)
    y, z = batch.indicators()
    tp = (y & z).sum(0)
    fp = (~y & z).sum(0)
    fn = (y & ~z).sum(0)
    return tp, fp, fn


def _prf(tp, fp, fn):
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return p, r, _ratio(2 * p * r, p + r)


def per_class_prf(batch: MultiLabelBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class precision, recall and F1 arrays of length ``num_labels``."""
    return _prf(*confusion_counts(batch))


def overall_f1(batch: MultiLabelBatch, mode: str = "sample_averaged") -> float:
    if mode not in F1_MODES:
        raise MetricError(f"unknown F1 mode {mode!r}; expected one of {F1_MODES}")
    _nonempty(batch)
    if mode == "sample_averaged":
        y, z = batch.indicators()
        tp = (y & z).sum(1)
        _, _, f1 = _prf(tp, (~y & z).sum(1), (y & ~z).sum(1))
        return float(f1.mean())
    tp, fp, fn = confusion_counts(batch)
    if mode == "micro":
        return float(_prf(tp.sum(), fp.sum(), fn.sum())[2])
    return float(per_class_prf(batch)[2].mean())


def class_support(batch: MultiLabelBatch) -> np.ndarray:
    """Number of images whose truth contains each class."""
    y, _ = batch.indicators()
    return y.sum(0)


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    exact: float
    partial: float
    incorrect: float
    f1_modes: dict[str, float]

    @property
    def overall_f1(self) -> float:
        return self.f1_modes["sample_averaged"]


def class_report(batch: MultiLabelBatch) -> ClassReport:
    p, r, f1 = per_class_prf(batch)
    exact, partial, wrong = exact_match_ratio(batch)
    return ClassReport(p, r, f1, class_support(batch), exact, partial, wrong,
                       {m: overall_f1(batch, m) for m in F1_MODES})


# --- pixel metrics ---------------------------------------------------------

def _valid_pairs(truth, pred):
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise MetricError(f"shape mismatch: truth {truth.shape} vs prediction {pred.shape}")
    valid = (truth != NODATA) & (pred != NODATA)
    return truth[valid].astype(np.int64), pred[valid].astype(np.int64)


def pixel_accuracy(truth, pred) -> float:
    """Correct labelled pixels over all labelled pixels."""
    t, p = _valid_pairs(truth, pred)
    if t.size == 0:
        raise MetricError("no labelled pixels to score")
    return float(np.count_nonzero(t == p)) / t.size


class ConfusionMatrix:
    """K x K pixel counts; rows are true classes, columns predictions."""

    def __init__(self, counts):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise MetricError("confusion matrix must be square")
        if (counts < 0).any():
            raise MetricError("confusion counts must be nonnegative")
        self.counts = counts

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(1, keepdims=True)
        return _ratio(self.counts, rows)

    def accuracy(self) -> float:
        total = self.counts.sum()
        if total == 0:
            raise MetricError("no labelled pixels to score")
        return float(np.trace(self.counts)) / float(total)

    def jaccard(self) -> np.ndarray:
        """Per-class IoU; NaN where the class is absent from truth and prediction."""
        tp = np.diag(self.counts).astype(float)
        den = self.counts.sum(0) + self.counts.sum(1) - tp
        out = np.full(self.num_classes, np.nan)
        np.divide(tp, den, out=out, where=den > 0)
        return out

    def support(self) -> np.ndarray:
        return self.counts.sum(1)


def confusion(truth, pred, num_classes: int) -> ConfusionMatrix:
    t, p = _valid_pairs(truth, pred)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes):
        raise MetricError(f"mask values exceed num_classes={num_classes}")
    counts = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def jaccard_per_class(truth, pred, num_classes: int) -> np.ndarray:
    """Per-class pixel IoU; classes absent from both grids are NaN."""
    t, p = _valid_pairs(truth, pred)
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        in_t, in_p = t == c, p == c
        union = np.count_nonzero(in_t | in_p)
        if union:
            out[c] = np.count_nonzero(in_t & in_p) / union
    return out


def mean_iou(iou: np.ndarray) -> float:
    """Mean over classes present in truth or prediction."""
    present = ~np.isnan(iou)
    if not present.any():
        raise MetricError("no classes present")
    return float(iou[present].mean())


@dataclass
class SegmentationReport:
    confusion: ConfusionMatrix
    accuracy: float
    iou: np.ndarray

    @property
    def mean_iou(self) -> float:
        return mean_iou(self.iou)

    @property
    def pixel_support(self) -> np.ndarray:
        return self.confusion.support()


def segmentation_report(cm: ConfusionMatrix) -> SegmentationReport:
    return SegmentationReport(cm, cm.accuracy(), cm.jaccard())


# --- correlation -----------------------------------------------------------

def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Pearson product-moment correlation coefficient."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise MetricError("pearson needs two equal-length 1-D sequences")
    if x.size < 2:
        raise MetricError("pearson needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise MetricError("correlation undefined for a constant sequence")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def support_score_correlation(support, scores) -> float:
    """Correlation between per-class support and per-class score.

    Classes with no support or an undefined (NaN) score are left out.
    """
    support = np.asarray(support, float)
    scores = np.asarray(scores, float)
    keep = (support > 0) & ~np.isnan(scores)
    return pearson(support[keep], scores[keep])
