"""Confusion-matrix segmentation metrics and P-R / ROC curve machinery.

All five metrics are reported in percent. The per-count ratios are computed
with exact rational arithmetic and rounded only on the final conversion to
float, so identities such as the two equivalent forms of the overlap score
hold to machine precision. Degenerate denominators never raise; they follow
a fixed convention and set an explanatory flag:

* empty ground truth and empty prediction: every metric is 100 ("vacuous");
* empty prediction against a non-empty ground truth: overlap, recall and
  the F-measure are 0 and precision is 0 ("empty_prediction");
* empty ground truth against a non-empty prediction: recall and the
  F-measure are 0 ("empty_ground_truth");
* an all-foreground ground truth leaves no negatives: specificity is 100
  ("no_negatives").
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

METRIC_NAMES = ("jaccard", "precision", "recall", "specificity", "dice")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _require_binary(arr: np.ndarray, name: str) -> None:
    if not np.all((arr == 0) | (arr == 1)):
        raise MetricsError(f"{name} must be binary (0/1)")


def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionCounts:
    """Exact per-pixel confusion counts for binary masks of equal shape."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise MetricsError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    _require_binary(pred, "prediction mask")
    _require_binary(gt, "ground-truth mask")
    p = pred.astype(bool)
    g = gt.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        tn=int(np.sum(~p & ~g)),
        fn=int(np.sum(~p & g)))


@dataclass(frozen=True)
class MetricValues:
    jaccard: float
    precision: float
    recall: float
    specificity: float
    dice: float
    flags: Tuple[str, ...] = ()

    def as_tuple(self) -> Tuple[float, float, float, float, float]:
        return (self.jaccard, self.precision, self.recall, self.specificity, self.dice)


def compute_metrics(counts: ConfusionCounts) -> MetricValues:
    """The five percent-scale metrics from one image's confusion counts."""
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    flags: List[str] = []

    if tp + fp + fn == 0:
        flags.append("vacuous")
        spec = Fraction(100) if tn + fp == 0 else Fraction(100 * tn, tn + fp)
        if tn + fp == 0:
            flags.append("no_negatives")
        return MetricValues(100.0, 100.0, 100.0, float(spec), 100.0, tuple(flags))

    jaccard = Fraction(100 * tp, fp + tp + fn)

    if tp + fp == 0:
        precision = Fraction(0)
        flags.append("empty_prediction")
    else:
        precision = Fraction(100 * tp, tp + fp)

    if tp + fn == 0:
        recall = Fraction(0)
        flags.append("empty_ground_truth")
    else:
        recall = Fraction(100 * tp, tp + fn)

    if tn + fp == 0:
        specificity = Fraction(100)
        flags.append("no_negatives")
    else:
        specificity = Fraction(100 * tn, tn + fp)

    if precision + recall == 0:
        dice = Fraction(0)
    else:
        dice = 2 * precision * recall / (precision + recall)

    return MetricValues(float(jaccard), float(precision), float(recall),
                        float(specificity), float(dice), tuple(flags))


@dataclass
class ImageRow:
    id: str
    counts: ConfusionCounts
    values: MetricValues
    category: str = "All"


@dataclass
class Aggregate:
    category: str
    count: int
    mean: Dict[str, float]
    std: Dict[str, float]


@dataclass
class MetricsReport:
    rows: List[ImageRow]
    aggregates: List[Aggregate]
    threshold: float

    def aggregate(self, category: str = "All") -> Aggregate:
        for agg in self.aggregates:
            if agg.category == category:
                return agg
        raise KeyError(category)

    def to_text(self) -> str:
        """Comma-separated report: one row per image, then aggregate rows."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["id", "category", "tp", "fp", "tn", "fn",
                         *METRIC_NAMES, "flags"])
        for row in self.rows:
            writer.writerow([row.id, row.category, row.counts.tp, row.counts.fp,
                             row.counts.tn, row.counts.fn,
                             *(f"{v:.4f}" for v in row.values.as_tuple()),
                             ";".join(row.values.flags)])
        for agg in self.aggregates:
            writer.writerow([f"mean[{agg.category}]", agg.category, "", "", "", "",
                             *(f"{agg.mean[m]:.4f}" for m in METRIC_NAMES), ""])
            writer.writerow([f"std[{agg.category}]", agg.category, "", "", "", "",
                             *(f"{agg.std[m]:.4f}" for m in METRIC_NAMES), ""])
        return buf.getvalue()


def _aggregate(category: str, rows: Sequence[ImageRow]) -> Aggregate:
    mean = {}
    std = {}
    for name in METRIC_NAMES:
        vals = np.array([getattr(r.values, name) for r in rows], dtype=np.float64)
        mean[name] = float(vals.mean())
        std[name] = float(vals.std())    # population std over images
    return Aggregate(category=category, count=len(rows), mean=mean, std=std)


def evaluate_dataset(predictions: Mapping[str, np.ndarray],
                     ground_truths: Mapping[str, np.ndarray],
                     threshold: float = 0.5,
                     categories: Optional[Mapping[str, str]] = None,
                     threads: int = 1) -> MetricsReport:
    """Threshold probability masks, score each image, and aggregate.

    Aggregation is the mean and population standard deviation of the
    per-image metric values (not metrics of pooled counts), reported for the
    whole set and per category tag when tags are provided.
    """
    if set(predictions) != set(ground_truths):
        missing = set(predictions) ^ set(ground_truths)
        raise MetricsError(f"prediction/ground-truth ids differ: {sorted(missing)[:5]}")

    ids = sorted(predictions)

    def score(image_id: str) -> ImageRow:
        pred = (np.asarray(predictions[image_id]) >= threshold).astype(np.uint8)
        counts = confusion(pred, np.asarray(ground_truths[image_id]))
        category = categories.get(image_id, "All") if categories else "All"
        return ImageRow(id=image_id, counts=counts,
                        values=compute_metrics(counts), category=category)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(score, ids))
    else:
        rows = [score(i) for i in ids]

    aggregates = [_aggregate("All", rows)]
    if categories:
        for cat in sorted({r.category for r in rows}):
            cat_rows = [r for r in rows if r.category == cat]
            aggregates.append(_aggregate(cat, cat_rows))
    return MetricsReport(rows=rows, aggregates=aggregates, threshold=threshold)


# ---------------------------------------------------------------------------
# threshold-sweep curves
# ---------------------------------------------------------------------------

@dataclass
class CurveData:
    thresholds: List[float]          # descending
    precision: List[float]
    recall: List[float]
    tpr: List[float]
    fpr: List[float]
    auc: float

    def to_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["threshold", "precision", "recall", "tpr", "fpr"])
        for row in zip(self.thresholds, self.precision, self.recall,
                       self.tpr, self.fpr):
            writer.writerow([f"{v:.6f}" for v in row])
        return buf.getvalue()


def curves(probability_masks: Mapping[str, np.ndarray],
           ground_truths: Mapping[str, np.ndarray],
           n_thresholds: Optional[int] = None) -> CurveData:
    """Pooled-pixel precision-recall and ROC points over a descending
    threshold sweep (positive means probability >= threshold).

    With ``n_thresholds`` the sweep is a uniform grid from 1 to 0; without it
    every distinct probability value becomes a cutpoint (plus both
    endpoints). The area under the ROC is the trapezoidal integral of the
    stored points. Precision at an empty prediction is 1 by convention.
    """
    if set(probability_masks) != set(ground_truths):
        raise MetricsError("prediction/ground-truth ids differ")
    probs = np.concatenate([np.asarray(probability_masks[i]).reshape(-1)
                            for i in sorted(probability_masks)])
    gt = np.concatenate([np.asarray(ground_truths[i]).reshape(-1)
                         for i in sorted(ground_truths)])
    _require_binary(gt, "ground-truth mask")
    if probs.min() < 0 or probs.max() > 1:
        raise MetricsError("probabilities must lie in [0, 1]")

    positives = int(gt.sum())
    negatives = gt.size - positives
    if positives == 0:
        raise MetricsError("ground truth contains no positive pixels; "
                           "precision-recall sweep is undefined")

    if n_thresholds is None:
        levels = sorted(set(np.unique(probs).tolist()) | {0.0, 1.0}, reverse=True)
    else:
        if n_thresholds < 2:
            raise MetricsError("need at least 2 thresholds")
        levels = np.linspace(1.0, 0.0, n_thresholds).tolist()

    # One sort of the pooled pixels serves every cutpoint.
    order = np.argsort(-probs, kind="stable")
    sorted_probs = probs[order]
    sorted_gt = gt[order]
    cum_tp = np.cumsum(sorted_gt)
    cum_fp = np.cumsum(1 - sorted_gt)

    precision, recall, tpr, fpr = [], [], [], []
    for level in levels:
        taken = int(np.searchsorted(-sorted_probs, -level, side="right"))
        tp = int(cum_tp[taken - 1]) if taken else 0
        fp = int(cum_fp[taken - 1]) if taken else 0
        precision.append(tp / (tp + fp) if tp + fp else 1.0)
        recall.append(tp / positives)
        tpr.append(tp / positives)
        fpr.append(fp / negatives if negatives else 0.0)

    auc = float(np.trapezoid(tpr, fpr))
    return CurveData(thresholds=[float(t) for t in levels], precision=precision,
                     recall=recall, tpr=tpr, fpr=fpr, auc=auc)
