"""Wall-time comparison of the metric families on one synthetic pixel pool.

Mirrors the practical cost gap between the sort-based pixel triple and
the fixed-threshold band metrics: the former sorts every pooled pixel,
the latter needs a handful of vectorized comparisons.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import curves
from .maskops import Region


@dataclass(frozen=True)
class TimingReport:
    pixel_count: int
    triple_seconds: float
    band_seconds: float
    aupro_seconds: float
    hist_seconds: float
    band_speedup_vs_triple: float
    hist_speedup_vs_triple: float

    def to_json_dict(self) -> dict:
        return {
            "pixel_count": self.pixel_count,
            "seconds": {
                "pixel_triple_exact": self.triple_seconds,
                "band_metrics": self.band_seconds,
                "aupro": self.aupro_seconds,
                "pixel_triple_histogram": self.hist_seconds,
            },
            "ratios": {
                "band_vs_triple": self.band_speedup_vs_triple,
                "hist_vs_triple": self.hist_speedup_vs_triple,
            },
        }


def _make_fixture(n_pixels: int, seed: int):
    """Square images with one planted square region each, random scores."""
    side = 2048 if n_pixels >= 2048 * 2048 else max(8, int(np.sqrt(n_pixels)))
    per_image = side * side
    n_images = max(1, int(round(n_pixels / per_image)))
    rng = np.random.default_rng(seed)
    images = []
    for _ in range(n_images):
        scores = rng.random(per_image).reshape(side, side)
        blob = max(2, side // 20)
        r0 = int(rng.integers(0, side - blob))
        c0 = int(rng.integers(0, side - blob))
        mask = np.zeros((side, side), dtype=bool)
        mask[r0 : r0 + blob, c0 : c0 + blob] = True
        images.append((scores, mask))
    return images


def measure(n_pixels: int = 50_000_000, seed: int = 0, hist_bins: int = 100_000,
            band_thresholds=(0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)) -> TimingReport:
    images = _make_fixture(n_pixels, seed)
    pooled_scores = np.concatenate([s.ravel() for s, _ in images])
    pooled_labels = np.concatenate([m.ravel() for _, m in images])
    actual = pooled_scores.size

    t0 = time.perf_counter()
    curve = curves.rank_curve(pooled_scores, pooled_labels)
    curves.auroc(curve)
    curves.average_precision(curve)
    curves.best_threshold_metric(curve, "f1")
    t1 = time.perf_counter()
    del curve

    n_pos = int(np.count_nonzero(pooled_labels))
    for t in band_thresholds:
        pred = pooled_scores >= t
        tp = int(np.count_nonzero(pred & pooled_labels))
        fp = int(np.count_nonzero(pred)) - tp
        fn = n_pos - tp
        _ = (2.0 * tp / (2.0 * tp + fp + fn), tp / (tp + fn), tp / (tp + fp + fn))
    t2 = time.perf_counter()

    per_image = []
    for scores, mask in images:
        rr, cc = np.nonzero(mask)
        r = Region(
            region_id=0,
            rows=rr,
            cols=cc,
            bbox=(int(rr.min()), int(cc.min()), int(rr.max()), int(cc.max())),
        )
        per_image.append((scores, [r], scores[~mask]))
    t3 = time.perf_counter()
    curves.pro_auc(per_image, 0.3)
    t4 = time.perf_counter()

    hist = curves.quantize_scores(pooled_scores, pooled_labels, hist_bins)
    hcurve = curves.histogram_curve(hist)
    curves.auroc(hcurve)
    curves.average_precision(hcurve)
    curves.best_threshold_metric(hcurve, "f1")
    t5 = time.perf_counter()

    triple = t1 - t0
    band = t2 - t1
    aupro = t4 - t3
    hist_t = t5 - t4
    return TimingReport(
        pixel_count=actual,
        triple_seconds=triple,
        band_seconds=band,
        aupro_seconds=aupro,
        hist_seconds=hist_t,
        band_speedup_vs_triple=triple / band if band > 0 else float("inf"),
        hist_speedup_vs_triple=triple / hist_t if hist_t > 0 else float("inf"),
    )
