"""Category- and dataset-level metric assembly.

Produces the full per-category record: the image-level triple
(AU-ROC / AP / F1-max), region-level AU-PRO, the pixel-level triple,
the four threshold-band metrics (mF1, mAcc, mIoU over a fixed band,
plus IoU-max), and the three aggregate means.  All values are percents
in [0, 100].  Rounding happens only at presentation time (one decimal,
half-up), never inside the computation.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields, replace
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import curves, maskops
from .datamodel import (
    CategoryEvalSet,
    DataModelError,
    ScoreMap,
    derive_image_score,
)

# Presentation order mirrors the benchmark table layout: image triple,
# region level, pixel triple, band quadruple, aggregates.
FIELD_ORDER = (
    "image_auroc",
    "image_ap",
    "image_f1max",
    "aupro",
    "pixel_auroc",
    "pixel_ap",
    "pixel_f1max",
    "mf1_band",
    "macc_band",
    "miou_band",
    "ioumax",
    "mad_i",
    "mad_p",
    "mad_band",
)

FIELD_LABELS = {
    "image_auroc": "mAU-ROC (image)",
    "image_ap": "mAP (image)",
    "image_f1max": "mF1-max (image)",
    "aupro": "mAU-PRO",
    "pixel_auroc": "mAU-ROC (pixel)",
    "pixel_ap": "mAP (pixel)",
    "pixel_f1max": "mF1-max (pixel)",
    "mf1_band": "mF1 .2-.8",
    "macc_band": "mAcc .2-.8",
    "miou_band": "mIoU .2-.8",
    "ioumax": "mIoU-max",
    "mad_i": "mAD-I",
    "mad_p": "mAD-P",
    "mad_band": "mAD .2-.8",
}


@dataclass(frozen=True)
class ThresholdBandConfig:
    """Threshold sweep for the band metrics; defaults cover 0.2..0.8 step 0.1."""

    start: float = 0.2
    end: float = 0.8
    step: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise DataModelError(f"band must satisfy 0 <= start <= end <= 1, got {self}")
        if self.step <= 0.0:
            raise DataModelError(f"band step must be positive, got {self.step}")
        span = self.end - self.start
        steps = span / self.step
        if abs(steps - round(steps)) > 1e-9:
            raise DataModelError(f"band span {span} is not a multiple of step {self.step}")

    def thresholds(self) -> np.ndarray:
        n = int(round((self.end - self.start) / self.step)) + 1
        # exact decimal grid; avoids 0.2 + 3*0.1 = 0.5000000000000001 artifacts
        return np.array([round(self.start + i * self.step, 10) for i in range(n)])


@dataclass(frozen=True)
class MetricRecord:
    """The eleven per-category metrics plus the three aggregate means."""

    image_auroc: float
    image_ap: float
    image_f1max: float
    aupro: float
    pixel_auroc: float
    pixel_ap: float
    pixel_f1max: float
    mf1_band: float
    macc_band: float
    miou_band: float
    ioumax: float
    mad_i: float
    mad_p: float
    mad_band: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (-1e-9 <= v <= 100.0 + 1e-9):
                raise DataModelError(f"{f.name}={v} outside [0, 100]")

    def as_dict(self, rounded: bool = False) -> dict[str, float]:
        if rounded:
            return {name: round_half_up(getattr(self, name)) for name in FIELD_ORDER}
        return {name: getattr(self, name) for name in FIELD_ORDER}


@dataclass(frozen=True)
class EvalConfig:
    band: ThresholdBandConfig = ThresholdBandConfig()
    fpr_cap: float = 0.3
    norm_scope: str = "category"  # or "dataset"
    image_score_mode: str = "max"  # or "topk"
    image_score_k: int = 1
    hist_bins: int = 0  # 0 = exact pixel metrics; >0 = histogram approximation
    connectivity: int = 8
    pro_fpr_mode: str = "pooled"  # or "mean_per_image"
    map_reduce: str = "mean"  # multi-stage anomaly maps: "mean" or "sum"


def round_half_up(value: float, decimals: int = 1) -> float:
    """Decimal half-up rounding used for all reported numbers."""
    q = Decimal(1).scaleb(-decimals)
    return float(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_UP))


def normalize_category_scores(
    eval_set: CategoryEvalSet, bounds: tuple[float, float] | None = None
) -> CategoryEvalSet:
    """Min-max normalize all score maps of a category onto [0, 1].

    The min/max pool over every pixel of every test image in the category
    (or use explicit ``bounds``, e.g. dataset-wide ones).  A constant
    input maps to all-zeros with a warning.
    """
    if bounds is None:
        lo = min(float(it.scores.scores.min()) for it in eval_set.items)
        hi = max(float(it.scores.scores.max()) for it in eval_set.items)
    else:
        lo, hi = bounds
    if hi <= lo:
        warnings.warn(
            f"category {eval_set.category!r}: constant scores; normalizing to all-zeros",
            stacklevel=2,
        )
        scale = 0.0
    else:
        scale = 1.0 / (hi - lo)
    items = tuple(
        replace(it, scores=ScoreMap((it.scores.scores - lo) * scale)) for it in eval_set.items
    )
    return CategoryEvalSet(category=eval_set.category, items=items)


def score_bounds(eval_set: CategoryEvalSet) -> tuple[float, float]:
    lo = min(float(it.scores.scores.min()) for it in eval_set.items)
    hi = max(float(it.scores.scores.max()) for it in eval_set.items)
    return lo, hi


def _image_scores(eval_set: CategoryEvalSet, config: EvalConfig) -> np.ndarray:
    out = np.empty(len(eval_set.items))
    for i, it in enumerate(eval_set.items):
        if it.image_score is not None:
            out[i] = it.image_score
        else:
            out[i] = derive_image_score(
                it.scores, mode=config.image_score_mode, k=config.image_score_k
            )
    return out


def _pooled_pixels(eval_set: CategoryEvalSet) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate every pixel of the category; normal images are all-false."""
    score_parts = []
    label_parts = []
    for it in eval_set.items:
        score_parts.append(it.scores.scores.ravel())
        if it.mask is not None:
            label_parts.append(it.mask.labels.ravel())
        else:
            label_parts.append(np.zeros(it.scores.scores.size, dtype=bool))
    return np.concatenate(score_parts), np.concatenate(label_parts)


def eval_image_level(eval_set: CategoryEvalSet, config: EvalConfig = EvalConfig()):
    """Image-level (AU-ROC, AP, F1-max) as percents."""
    scores = _image_scores(eval_set, config)
    labels = np.array([it.is_anomalous for it in eval_set.items])
    curve = curves.rank_curve(scores, labels)
    f1, _ = curves.best_threshold_metric(curve, "f1")
    return (
        100.0 * curves.auroc(curve),
        100.0 * curves.average_precision(curve),
        100.0 * f1,
    )


def eval_pixel_level(eval_set: CategoryEvalSet, config: EvalConfig = EvalConfig()):
    """Pixel-level (AU-ROC, AP, F1-max) over the pooled category, plus IoU-max.

    Returns (auroc, ap, f1max, ioumax) as percents.  With
    ``config.hist_bins > 0`` the curve comes from the streaming histogram
    instead of an exact sort.
    """
    scores, labels = _pooled_pixels(eval_set)
    if not labels.any():
        raise DataModelError(f"category {eval_set.category!r} has no anomalous pixels")
    if config.hist_bins:
        hist = curves.quantize_scores(scores, labels, config.hist_bins)
        curve = curves.histogram_curve(hist)
    else:
        curve = curves.rank_curve(scores, labels)
    f1, _ = curves.best_threshold_metric(curve, "f1")
    iou, _ = curves.best_threshold_metric(curve, "iou")
    return (
        100.0 * curves.auroc(curve),
        100.0 * curves.average_precision(curve),
        100.0 * f1,
        100.0 * iou,
    )


def eval_threshold_band(eval_set: CategoryEvalSet, band: ThresholdBandConfig):
    """Mean F1 / anomaly-class accuracy / IoU over the threshold band.

    At each threshold t the pooled pixels binarize at score >= t, then
    F1 = 2tp/(2tp+fp+fn), Acc = tp/(tp+fn) (recall of the anomaly class),
    IoU = tp/(tp+fp+fn).  A zero denominator contributes 0.  Returns the
    three means as percents.
    """
    scores, labels = _pooled_pixels(eval_set)
    n_pos = int(np.count_nonzero(labels))
    f1s, accs, ious = [], [], []
    for t in band.thresholds():
        pred = scores >= t
        tp = int(np.count_nonzero(pred & labels))
        fp = int(np.count_nonzero(pred)) - tp
        fn = n_pos - tp
        f1s.append(2.0 * tp / (2.0 * tp + fp + fn) if tp + fp + fn else 0.0)
        accs.append(tp / (tp + fn) if tp + fn else 0.0)
        ious.append(tp / (tp + fp + fn) if tp + fp + fn else 0.0)
    return (
        100.0 * float(np.mean(f1s)),
        100.0 * float(np.mean(accs)),
        100.0 * float(np.mean(ious)),
    )


def eval_aupro(eval_set: CategoryEvalSet, config: EvalConfig = EvalConfig()) -> float:
    """Per-region-overlap area for the category, as a percent."""
    per_image = []
    for it in eval_set.items:
        arr = it.scores.scores
        if it.mask is not None and it.mask.any():
            regions = maskops.connected_components(it.mask, config.connectivity)
            normal_scores = arr[~it.mask.labels]
        else:
            regions = []
            normal_scores = arr.ravel()
        per_image.append((arr, regions, normal_scores))
    return 100.0 * curves.pro_auc(per_image, config.fpr_cap, fpr_mode=config.pro_fpr_mode)


def assemble_record(
    image_triple: tuple[float, float, float],
    aupro: float,
    pixel_triple: tuple[float, float, float],
    band_triple: tuple[float, float, float],
    ioumax: float,
) -> MetricRecord:
    """Fill the three aggregate means from the eleven metrics (percents in, out)."""
    mad_i = float(np.mean(image_triple))
    mad_p = float(np.mean(pixel_triple))
    mad_band = float(np.mean(band_triple))
    return MetricRecord(
        image_auroc=image_triple[0],
        image_ap=image_triple[1],
        image_f1max=image_triple[2],
        aupro=aupro,
        pixel_auroc=pixel_triple[0],
        pixel_ap=pixel_triple[1],
        pixel_f1max=pixel_triple[2],
        mf1_band=band_triple[0],
        macc_band=band_triple[1],
        miou_band=band_triple[2],
        ioumax=ioumax,
        mad_i=mad_i,
        mad_p=mad_p,
        mad_band=mad_band,
    )


def aggregate_dataset(records: list[MetricRecord]) -> MetricRecord:
    """Unweighted arithmetic mean per field across category records."""
    if not records:
        raise DataModelError("cannot aggregate an empty record list")
    return MetricRecord(
        **{
            name: float(np.mean([getattr(r, name) for r in records]))
            for name in FIELD_ORDER
        }
    )


def evaluate_category(
    eval_set: CategoryEvalSet,
    config: EvalConfig = EvalConfig(),
    norm_bounds: tuple[float, float] | None = None,
) -> MetricRecord:
    """Run the whole metric suite for one category.

    Scores are min-max normalized first (category scope by default;
    pass dataset-wide ``norm_bounds`` for dataset scope).
    """
    normalized = normalize_category_scores(eval_set, bounds=norm_bounds)
    image_triple = eval_image_level(normalized, config)
    px_auroc, px_ap, px_f1, ioumax = eval_pixel_level(normalized, config)
    band_triple = eval_threshold_band(normalized, config.band)
    aupro = eval_aupro(normalized, config)
    return assemble_record(
        image_triple, aupro, (px_auroc, px_ap, px_f1), band_triple, ioumax
    )


def evaluate_descriptor(
    descriptor, config: EvalConfig, norm_bounds: tuple[float, float] | None = None
) -> MetricRecord:
    """Load one manifest category from disk and evaluate it.

    Module-level so a process pool can map it over categories; each call
    is independent and the caller reduces in manifest order, which keeps
    reports byte-identical for any worker count.
    """
    from .datamodel import load_category_eval_set

    return evaluate_category(load_category_eval_set(descriptor), config, norm_bounds)


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise DataModelError("pearson needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(np.dot(dx, dx))
    vy = float(np.dot(dy, dy))
    if vx == 0.0 or vy == 0.0:
        raise DataModelError("pearson is undefined for zero-variance input")
    return float(np.dot(dx, dy) / np.sqrt(vx * vy))


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------


def records_to_json_dict(
    per_category: dict[str, MetricRecord], mean_record: MetricRecord
) -> dict:
    return {
        "categories": {name: rec.as_dict() for name, rec in per_category.items()},
        "mean": mean_record.as_dict(),
        "rounded": {
            "categories": {name: rec.as_dict(rounded=True) for name, rec in per_category.items()},
            "mean": mean_record.as_dict(rounded=True),
        },
    }


def records_to_markdown(
    per_category: dict[str, MetricRecord], mean_record: MetricRecord
) -> str:
    """Render a markdown table, one metric per row, one category per column."""
    names = list(per_category)
    header = ["Metric"] + names + ["mean"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for field_name in FIELD_ORDER:
        row = [FIELD_LABELS[field_name]]
        for name in names:
            row.append(f"{round_half_up(getattr(per_category[name], field_name)):.1f}")
        row.append(f"{round_half_up(getattr(mean_record, field_name)):.1f}")
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
