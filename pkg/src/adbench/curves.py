"""Ranking-based curve machinery.

One exact threshold sweep (`rank_curve`) backs AU-ROC, average precision,
and the best-threshold metrics; `pro_auc` integrates per-region overlap
against false-positive rate; `quantize_scores` is the opt-in streaming
path that trades a sort over every pixel for a fixed-size histogram.

Tie scores collapse into a single threshold entry so that AU-ROC equals
the pairwise probability P(pos > neg) + 0.5 * P(pos == neg) exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import DataModelError
from .maskops import Region


class DegenerateLabelsError(DataModelError):
    """Raised when a ranking metric is asked for with only one class."""


def _trapezoid(y: np.ndarray, x: np.ndarray) -> float:
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) * 0.5))


@dataclass(frozen=True)
class RankedCurve:
    """Cumulative counts at each unique score, descending.

    Prediction is positive iff score >= threshold, so entry i gives the
    confusion counts at threshold ``thresholds[i]``:
    tp = cum_tp[i], fp = cum_fp[i], fn = total_pos - tp, tn = rest.
    """

    thresholds: np.ndarray
    cum_tp: np.ndarray
    cum_fp: np.ndarray
    total_pos: int
    total_neg: int


def rank_curve(scores, labels) -> RankedCurve:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.size != labels.size:
        raise DataModelError(f"scores ({scores.size}) and labels ({labels.size}) disagree")
    total_pos = int(np.count_nonzero(labels))
    total_neg = labels.size - total_pos
    if total_pos == 0 or total_neg == 0:
        raise DegenerateLabelsError(
            f"need both classes, got {total_pos} positives / {total_neg} negatives"
        )
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    group_end = np.empty(s.size, dtype=bool)
    group_end[-1] = True
    np.not_equal(s[1:], s[:-1], out=group_end[:-1])
    cum_tp = np.cumsum(y)[group_end]
    cum_fp = np.cumsum(~y)[group_end]
    return RankedCurve(
        thresholds=s[group_end],
        cum_tp=cum_tp,
        cum_fp=cum_fp,
        total_pos=total_pos,
        total_neg=total_neg,
    )


def auroc(curve: RankedCurve) -> float:
    """Trapezoidal area of TPR vs FPR, endpoints (0,0) and (1,1) included."""
    tpr = np.concatenate(([0.0], curve.cum_tp / curve.total_pos))
    fpr = np.concatenate(([0.0], curve.cum_fp / curve.total_neg))
    return _trapezoid(tpr, fpr)


def average_precision(curve: RankedCurve) -> float:
    """Step-sum estimator sum_n (R_n - R_{n-1}) * P_n, no interpolation."""
    tp = curve.cum_tp
    precision = tp / (tp + curve.cum_fp)
    recall = tp / curve.total_pos
    dr = np.diff(np.concatenate(([0.0], recall)))
    return float(np.sum(dr * precision))


def best_threshold_metric(curve: RankedCurve, metric: str = "f1") -> tuple[float, float]:
    """Maximize F1 or IoU over the exact threshold sweep.

    Ties break toward the larger threshold.  Returns (value, threshold).
    """
    tp = curve.cum_tp.astype(np.float64)
    fp = curve.cum_fp.astype(np.float64)
    fn = curve.total_pos - tp
    if metric == "f1":
        values = 2.0 * tp / (2.0 * tp + fp + fn)
    elif metric == "iou":
        values = tp / (tp + fp + fn)
    else:
        raise DataModelError(f"unknown best-threshold metric {metric!r}")
    best = int(np.argmax(values))  # thresholds descend, so first max = largest threshold
    return float(values[best]), float(curve.thresholds[best])


def pro_auc(
    per_image: Sequence[tuple[np.ndarray, Sequence[Region], np.ndarray]],
    fpr_cap: float = 0.3,
    fpr_mode: str = "pooled",
) -> float:
    """Area under the per-region-overlap curve up to an FPR cap.

    ``per_image`` holds (score array (H, W), ground-truth regions,
    normal-pixel scores) per test image; regions may be empty for normal
    images.  Every region weighs equally regardless of size.  The sweep
    visits every unique pooled score; FPR pools non-anomalous pixels
    across all images (``fpr_mode="mean_per_image"`` instead averages the
    per-image rates).  The FPR axis is rescaled by the cap and clipped
    at 1 before trapezoidal integration, so a constant predictor scores
    0.5 at any cap and a perfect one scores 1.0.
    """
    if not 0.0 < fpr_cap <= 1.0:
        raise DataModelError(f"fpr cap must be in (0, 1], got {fpr_cap}")
    if fpr_mode not in ("pooled", "mean_per_image"):
        raise DataModelError(f"unknown fpr mode {fpr_mode!r}")
    region_scores = []
    neg_parts = []
    for scores, regions, normal_scores in per_image:
        scores = np.asarray(scores, dtype=np.float64)
        for region in regions:
            region_scores.append(np.sort(scores[region.rows, region.cols]))
        normal_scores = np.asarray(normal_scores, dtype=np.float64).ravel()
        if normal_scores.size:
            neg_parts.append(np.sort(normal_scores))
    if not region_scores:
        raise DataModelError("pro_auc needs at least one ground-truth region")
    if not neg_parts:
        raise DataModelError("pro_auc needs at least one non-anomalous pixel")

    thresholds = np.unique(np.concatenate(neg_parts + region_scores))[::-1]
    pro = np.zeros(thresholds.size)
    for sr in region_scores:
        covered = sr.size - np.searchsorted(sr, thresholds, side="left")
        pro += covered / sr.size
    pro /= len(region_scores)

    if fpr_mode == "pooled":
        neg = np.sort(np.concatenate(neg_parts))
        fpr = (neg.size - np.searchsorted(neg, thresholds, side="left")) / neg.size
    else:
        fpr = np.zeros(thresholds.size)
        for part in neg_parts:
            fpr += (part.size - np.searchsorted(part, thresholds, side="left")) / part.size
        fpr /= len(neg_parts)

    x = np.concatenate(([0.0], np.minimum(fpr / fpr_cap, 1.0)))
    y = np.concatenate(([0.0], pro))
    return _trapezoid(y, x)


# ---------------------------------------------------------------------------
# Streaming quantized path
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreHistogram:
    """Per-class counts over uniform bins spanning [0, 1].

    Bin i covers [i/B, (i+1)/B) except the last, which also includes 1.0.
    Partial histograms merge by adding counts, so accumulation can run in
    parallel and reduce in any order.
    """

    bin_count: int
    pos_counts: np.ndarray
    neg_counts: np.ndarray

    def merge(self, other: "ScoreHistogram") -> "ScoreHistogram":
        if other.bin_count != self.bin_count:
            raise DataModelError("cannot merge histograms with different bin counts")
        return ScoreHistogram(
            bin_count=self.bin_count,
            pos_counts=self.pos_counts + other.pos_counts,
            neg_counts=self.neg_counts + other.neg_counts,
        )


def quantize_scores(scores, labels, bin_count: int) -> ScoreHistogram:
    """Accumulate pre-normalized scores into a fixed-size histogram."""
    if bin_count < 2:
        raise DataModelError(f"bin count must be >= 2, got {bin_count}")
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.size != labels.size:
        raise DataModelError("scores and labels disagree in length")
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise DataModelError("quantize_scores requires scores in [0, 1]")
    idx = np.minimum((scores * bin_count).astype(np.int64), bin_count - 1)
    pos = np.bincount(idx[labels], minlength=bin_count)
    neg = np.bincount(idx[~labels], minlength=bin_count)
    return ScoreHistogram(bin_count=bin_count, pos_counts=pos, neg_counts=neg)


def histogram_curve(hist: ScoreHistogram) -> RankedCurve:
    """View a histogram as a ranked curve (one tie group per occupied bin).

    Thresholds are the bin lower edges, descending, so curve metrics
    computed from the result approximate the exact values with error
    vanishing as the bin count grows.
    """
    total_pos = int(hist.pos_counts.sum())
    total_neg = int(hist.neg_counts.sum())
    if total_pos == 0 or total_neg == 0:
        raise DegenerateLabelsError("histogram lacks one of the classes")
    occupied = (hist.pos_counts + hist.neg_counts) > 0
    bins = np.flatnonzero(occupied)[::-1]
    return RankedCurve(
        thresholds=bins / hist.bin_count,
        cum_tp=np.cumsum(hist.pos_counts[bins]),
        cum_fp=np.cumsum(hist.neg_counts[bins]),
        total_pos=total_pos,
        total_neg=total_neg,
    )
