"""Binary-mask primitives: thresholding, confusion counts, connected
components, and per-region statistics.

These are the pixel-level building blocks behind the threshold-band
metrics, the per-region-overlap curve, and the dataset statistics report.
All functions are pure and safe to run in parallel across images.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .datamodel import BinaryMask, DataModelError, ScoreMap

_STRUCT_4 = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_STRUCT_8 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Region:
    """One connected component of true pixels.

    ``rows``/``cols`` hold pixel coordinates in row-major scan order;
    ``bbox`` is (row0, col0, row1, col1) inclusive.
    """

    region_id: int
    rows: np.ndarray
    cols: np.ndarray
    bbox: tuple[int, int, int, int]

    @property
    def area(self) -> int:
        return int(self.rows.size)


def binarize(score_map: ScoreMap, threshold: float) -> BinaryMask:
    """Pixel is anomalous iff its score >= threshold (closed lower bound)."""
    return BinaryMask(score_map.scores >= threshold)


def confusion_counts(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    if pred.labels.shape != gt.labels.shape:
        raise DataModelError(
            f"confusion_counts dimension mismatch: {pred.labels.shape} vs {gt.labels.shape}"
        )
    p = pred.labels
    g = gt.labels
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def connected_components(mask: BinaryMask, connectivity: int = 8) -> list[Region]:
    """Extract connected regions of true pixels.

    Region ids follow first-encounter order in a row-major scan, so the
    result is deterministic regardless of the labeling backend.
    Default connectivity is 8, matching the usual ground-truth-region
    convention for per-region-overlap scoring.
    """
    if connectivity not in (4, 8):
        raise DataModelError(f"connectivity must be 4 or 8, got {connectivity}")
    struct = _STRUCT_4 if connectivity == 4 else _STRUCT_8
    labeled, n = ndimage.label(mask.labels, structure=struct)
    if n == 0:
        return []
    flat = labeled.ravel()
    nz = np.flatnonzero(flat)
    # first-encounter order: scatter-min of each label's first pixel position
    first_pos = np.full(n + 1, flat.size, dtype=np.int64)
    np.minimum.at(first_pos, flat[nz], nz)
    order = np.argsort(first_pos[1:], kind="stable")
    regions = []
    slices = ndimage.find_objects(labeled)
    for new_id, old_idx in enumerate(order):
        sl = slices[old_idx]
        sub = labeled[sl] == old_idx + 1
        rr, cc = np.nonzero(sub)
        rows = (rr + sl[0].start).astype(np.int64)
        cols = (cc + sl[1].start).astype(np.int64)
        bbox = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
        regions.append(Region(region_id=new_id, rows=rows, cols=cols, bbox=bbox))
    return regions


@dataclass(frozen=True)
class RegionStatsRecord:
    """Per-image region statistics feeding the dataset statistics report."""

    region_count: int
    area_proportions: tuple[float, ...]  # per region, area / (H*W)
    aspect_ratios: tuple[float, ...]  # per region, bbox height / width
    total_area_proportion: float  # all true pixels / (H*W)

    def to_json_dict(self) -> dict:
        return {
            "region_count": self.region_count,
            "area_proportions": list(self.area_proportions),
            "aspect_ratios": list(self.aspect_ratios),
            "total_area_proportion": self.total_area_proportion,
        }


def region_statistics(regions: list[Region], image_dims: tuple[int, int]) -> RegionStatsRecord:
    h, w = image_dims
    if h < 1 or w < 1:
        raise DataModelError(f"zero-area image {h}x{w}")
    n_pixels = h * w
    props = tuple(r.area / n_pixels for r in regions)
    ratios = tuple(
        (r.bbox[2] - r.bbox[0] + 1) / (r.bbox[3] - r.bbox[1] + 1) for r in regions
    )
    total = sum(r.area for r in regions) / n_pixels
    return RegionStatsRecord(
        region_count=len(regions),
        area_proportions=props,
        aspect_ratios=ratios,
        total_area_proportion=total,
    )
