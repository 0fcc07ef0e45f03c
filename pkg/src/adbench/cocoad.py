"""Build anomaly-detection splits from COCO-format instance annotations.

The 80 object categories, taken in canonical id order, are partitioned
into four blocks of 20.  For split k the block's categories are the
anomaly classes: training keeps only train-set images free of them, and
every val-set image becomes a test item, anomalous iff it contains at
least one anomaly-class instance.  Masks are the union of those
instances' segmentations (polygons and RLE, crowds included by default)
and are emitted as PGM with 255 = anomalous.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import maskops
from .datamodel import BinaryMask, DataModelError, write_pgm

# Expected per-split (train, test-normal, test-anomaly) counts for the
# real COCO 2017 annotations; used for the deviation report.
EXPECTED_SPLIT_COUNTS = {
    0: (30438, 1291, 3661),
    1: (65133, 2785, 2167),
    2: (79083, 3328, 1624),
    3: (77580, 3253, 1699),
}


class CocoFormatError(DataModelError):
    """Annotation file violates the expected COCO schema subset."""


@dataclass(frozen=True)
class CocoCategory:
    id: int
    name: str
    ordinal: int  # position in the id-ascending 80-category sequence


@dataclass(frozen=True)
class CocoImage:
    id: int
    width: int
    height: int
    file_name: str


@dataclass(frozen=True)
class CocoAnnotation:
    id: int
    image_id: int
    category_id: int
    segmentation: object  # list of polygons, or RLE dict
    iscrowd: bool
    area: float


@dataclass(frozen=True)
class ParsedCoco:
    categories: tuple[CocoCategory, ...]
    images: tuple[CocoImage, ...]
    annotations: tuple[CocoAnnotation, ...]

    def annotations_by_image(self) -> dict[int, list[CocoAnnotation]]:
        out: dict[int, list[CocoAnnotation]] = {img.id: [] for img in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out


@dataclass(frozen=True)
class SplitAssignment:
    split_index: int
    anomaly_category_ids: frozenset[int]
    normal_category_ids: frozenset[int]


def parse_coco(source) -> ParsedCoco:
    """Parse the images/annotations/categories subset of a COCO JSON file.

    Referential integrity is enforced: every annotation must point at a
    known image id and category id, and ids must be unique per table.
    """
    source = Path(source)
    try:
        doc = json.loads(source.read_text())
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{source}: invalid JSON ({e})") from e
    for key in ("images", "annotations", "categories"):
        if key not in doc or not isinstance(doc[key], list):
            raise CocoFormatError(f"{source}: missing top-level array {key!r}")

    cats_raw = sorted(doc["categories"], key=lambda c: int(c["id"]))
    categories = []
    seen = set()
    for ordinal, c in enumerate(cats_raw):
        cid = int(c["id"])
        if cid in seen:
            raise CocoFormatError(f"{source}: duplicate category id {cid}")
        seen.add(cid)
        categories.append(CocoCategory(id=cid, name=str(c.get("name", cid)), ordinal=ordinal))

    images = []
    image_ids = set()
    for im in doc["images"]:
        iid = int(im["id"])
        if iid in image_ids:
            raise CocoFormatError(f"{source}: duplicate image id {iid}")
        image_ids.add(iid)
        images.append(
            CocoImage(
                id=iid,
                width=int(im["width"]),
                height=int(im["height"]),
                file_name=str(im.get("file_name", f"{iid}.jpg")),
            )
        )

    cat_ids = seen
    annotations = []
    ann_ids = set()
    for a in doc["annotations"]:
        aid = int(a["id"])
        if aid in ann_ids:
            raise CocoFormatError(f"{source}: duplicate annotation id {aid}")
        ann_ids.add(aid)
        img_id = int(a["image_id"])
        cat_id = int(a["category_id"])
        if img_id not in image_ids:
            raise CocoFormatError(f"{source}: annotation {aid} references unknown image {img_id}")
        if cat_id not in cat_ids:
            raise CocoFormatError(f"{source}: annotation {aid} references unknown category {cat_id}")
        annotations.append(
            CocoAnnotation(
                id=aid,
                image_id=img_id,
                category_id=cat_id,
                segmentation=a.get("segmentation"),
                iscrowd=bool(a.get("iscrowd", 0)),
                area=float(a.get("area", 0.0)),
            )
        )
    return ParsedCoco(
        categories=tuple(categories), images=tuple(images), annotations=tuple(annotations)
    )


# ---------------------------------------------------------------------------
# RLE: column-major runs starting with a zero run, plus the byte-wise
# variable-length signed-delta string compression used on the wire.
# ---------------------------------------------------------------------------


def decode_rle(counts, size: tuple[int, int]) -> BinaryMask:
    """Decode run-length counts (list) or a compressed string into a mask."""
    h, w = int(size[0]), int(size[1])
    if h < 1 or w < 1:
        raise CocoFormatError(f"bad RLE size {(h, w)}")
    if isinstance(counts, (str, bytes)):
        counts = rle_string_to_counts(counts)
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise CocoFormatError("negative run length")
    if sum(counts) != h * w:
        raise CocoFormatError(f"run lengths sum to {sum(counts)}, expected {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True  # runs alternate starting with zeros
    flat = np.repeat(values, counts)
    return BinaryMask(flat.reshape((h, w), order="F"))


def encode_rle(mask: BinaryMask) -> list[int]:
    """Inverse of :func:`decode_rle`: column-major counts, zero run first."""
    flat = mask.labels.reshape(-1, order="F")
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return [int(c) for c in counts]


def rle_counts_to_string(counts: Sequence[int]) -> str:
    """Compress counts with the 5-bit variable-length signed-delta scheme.

    From the third element on, each count is stored as a delta against the
    count two places back; values are emitted 5 bits at a time, bit 0x20
    flags continuation, and chars are offset by 48 into printable ASCII.
    """
    out = []
    counts = [int(c) for c in counts]
    for i, c in enumerate(counts):
        x = c - counts[i - 2] if i > 2 else c
        more = True
        while more:
            chunk = x & 0x1F
            x >>= 5
            more = (x != -1) if (chunk & 0x10) else (x != 0)
            if more:
                chunk |= 0x20
            out.append(chr(chunk + 48))
    return "".join(out)


def rle_string_to_counts(s) -> list[int]:
    """Inverse of :func:`rle_counts_to_string`."""
    if isinstance(s, bytes):
        s = s.decode("ascii")
    counts: list[int] = []
    pos = 0
    n = len(s)
    while pos < n:
        x = 0
        k = 0
        more = True
        while more:
            if pos >= n:
                raise CocoFormatError("compressed RLE string truncated mid-value")
            c = ord(s[pos]) - 48
            if not 0 <= c < 64:
                raise CocoFormatError(f"bad character {s[pos]!r} in compressed RLE")
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            pos += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


# ---------------------------------------------------------------------------
# Polygon rasterization
# ---------------------------------------------------------------------------


def rasterize_polygon(
    polygon: Sequence[float], size: tuple[int, int], tolerance: float = 2.0
) -> BinaryMask:
    """Even-odd scanline fill sampled at pixel centers.

    ``polygon`` is the flat [x0, y0, x1, y1, ...] coordinate list used by
    COCO annotations (>= 3 vertices).  A pixel (r, c) is filled iff its
    center (c + 0.5, r + 0.5) lies inside the polygon under the even-odd
    rule.  Vertices more than ``tolerance`` pixels outside the image
    raise an error.
    """
    h, w = int(size[0]), int(size[1])
    coords = np.asarray(polygon, dtype=np.float64).ravel()
    if coords.size % 2 != 0:
        raise CocoFormatError("polygon coordinate list must have even length")
    xs = coords[0::2]
    ys = coords[1::2]
    if xs.size < 3:
        raise CocoFormatError(f"polygon needs >= 3 vertices, got {xs.size}")
    if (
        xs.min() < -tolerance
        or ys.min() < -tolerance
        or xs.max() > w + tolerance
        or ys.max() > h + tolerance
    ):
        raise CocoFormatError("polygon vertex outside the image tolerance band")

    mask = np.zeros((h, w), dtype=bool)
    x1 = xs
    y1 = ys
    x2 = np.roll(xs, -1)
    y2 = np.roll(ys, -1)
    r_lo = max(0, int(np.floor(ys.min() - 0.5)))
    r_hi = min(h - 1, int(np.ceil(ys.max())))
    for r in range(r_lo, r_hi + 1):
        yc = r + 0.5
        # half-open vertical rule avoids double counting at shared vertices
        hits = ((y1 <= yc) & (yc < y2)) | ((y2 <= yc) & (yc < y1))
        if not hits.any():
            continue
        t = (yc - y1[hits]) / (y2[hits] - y1[hits])
        crossings = np.sort(x1[hits] + t * (x2[hits] - x1[hits]))
        for a, b in zip(crossings[0::2], crossings[1::2]):
            c_min = max(0, int(np.ceil(a - 0.5)))
            c_max = min(w - 1, int(np.ceil(b - 0.5)) - 1)
            if c_min <= c_max:
                mask[r, c_min : c_max + 1] = True
    return BinaryMask(mask)


def annotation_mask(ann: CocoAnnotation, image: CocoImage) -> BinaryMask:
    """Realize one annotation's segmentation as a mask (polygons unioned)."""
    seg = ann.segmentation
    size = (image.height, image.width)
    if isinstance(seg, dict):
        if "counts" not in seg or "size" not in seg:
            raise CocoFormatError(f"annotation {ann.id}: malformed RLE segmentation")
        return decode_rle(seg["counts"], tuple(seg["size"]))
    if isinstance(seg, list) and seg:
        out = np.zeros(size, dtype=bool)
        for poly in seg:
            out |= rasterize_polygon(poly, size).labels
        return BinaryMask(out)
    raise CocoFormatError(f"annotation {ann.id}: unresolvable segmentation")


# ---------------------------------------------------------------------------
# Split construction
# ---------------------------------------------------------------------------


def assign_splits(categories: Sequence[CocoCategory]) -> list[SplitAssignment]:
    """Partition the 80 ordered categories into 4 disjoint anomaly blocks.

    Split k's anomaly classes are ordinals [20k, 20k+19]; everything else
    (plus background) is normal.
    """
    if len(categories) != 80:
        raise CocoFormatError(f"expected exactly 80 categories, got {len(categories)}")
    by_ordinal = sorted(categories, key=lambda c: c.ordinal)
    if [c.ordinal for c in by_ordinal] != list(range(80)):
        raise CocoFormatError("category ordinals must cover 0..79 exactly once")
    out = []
    for k in range(4):
        anomaly = frozenset(c.id for c in by_ordinal[20 * k : 20 * (k + 1)])
        normal = frozenset(c.id for c in by_ordinal) - anomaly
        out.append(
            SplitAssignment(split_index=k, anomaly_category_ids=anomaly, normal_category_ids=normal)
        )
    return out


@dataclass(frozen=True)
class SplitBuildResult:
    split_index: int
    manifest_path: Path
    train_count: int
    test_normal_count: int
    test_anomaly_count: int
    skipped_unannotated: int  # always counted (0 here: unannotated val images are normal)


def build_split(
    train_set: ParsedCoco,
    val_set: ParsedCoco,
    assignment: SplitAssignment,
    output,
    include_crowds: bool = True,
    category_name: Optional[str] = None,
    per_class: bool = False,
) -> SplitBuildResult:
    """Emit one split: PGM masks, a train index, and the test manifest.

    Training images are train-set images with zero anomaly-class
    annotations.  Every val-set image becomes a test record, anomalous
    iff it has at least one anomaly-class annotation (crowd regions
    count unless ``include_crowds=False``); its mask is the union of all
    such instance masks.  Val images without any annotations are normal
    (background-only).

    The split is one evaluation category by default.  With
    ``per_class=True`` the manifest instead carries one category per
    anomaly class: an image appears under every class it contains, with
    a class-restricted mask, and all normal images are shared by every
    class category (classes with no anomalous image are dropped).
    """
    k = assignment.split_index
    root = Path(output) / f"split{k}"
    (root / "train" / "good").mkdir(parents=True, exist_ok=True)
    (root / "test" / "good").mkdir(parents=True, exist_ok=True)
    (root / "test" / "anomaly").mkdir(parents=True, exist_ok=True)
    anomaly_ids = assignment.anomaly_category_ids
    cat_name = category_name or f"split{k}"

    def is_anomaly_ann(ann: CocoAnnotation) -> bool:
        if ann.category_id not in anomaly_ids:
            return False
        return include_crowds or not ann.iscrowd

    train_by_image = train_set.annotations_by_image()
    train_images = [
        img.file_name
        for img in train_set.images
        if not any(ann.category_id in anomaly_ids for ann in train_by_image[img.id])
    ]
    (root / "train" / "good" / "index.json").write_text(
        json.dumps({"images": train_images}, indent=1)
    )

    def mask_union(img, anns):
        union = np.zeros((img.height, img.width), dtype=bool)
        for ann in anns:
            union |= annotation_mask(ann, img).labels
        return BinaryMask(union)

    def normal_record(img):
        return {
            "id": str(img.id),
            "label": "normal",
            "image": img.file_name,
            "score_map": f"predictions/{img.id}.adtb",
        }

    val_by_image = val_set.annotations_by_image()
    records = []
    per_class_records: dict[int, list] = {cid: [] for cid in sorted(anomaly_ids)}
    normal_records = []
    n_normal = n_anomaly = 0
    for img in val_set.images:
        anomaly_anns = [ann for ann in val_by_image[img.id] if is_anomaly_ann(ann)]
        if not anomaly_anns:
            rec = normal_record(img)
            records.append(rec)
            normal_records.append(rec)
            n_normal += 1
            continue
        mask_rel = f"test/anomaly/{img.id}_mask.pgm"
        write_pgm(mask_union(img, anomaly_anns), root / mask_rel)
        records.append(
            {
                "id": str(img.id),
                "label": "anomalous",
                "image": img.file_name,
                "score_map": f"predictions/{img.id}.adtb",
                "mask": mask_rel,
            }
        )
        n_anomaly += 1
        if per_class:
            for cid in sorted({ann.category_id for ann in anomaly_anns}):
                class_rel = f"test/anomaly/{img.id}_c{cid}_mask.pgm"
                write_pgm(
                    mask_union(img, [a for a in anomaly_anns if a.category_id == cid]),
                    root / class_rel,
                )
                per_class_records[cid].append(
                    {
                        "id": f"{img.id}_c{cid}",
                        "label": "anomalous",
                        "image": img.file_name,
                        "score_map": f"predictions/{img.id}.adtb",
                        "mask": class_rel,
                    }
                )

    if per_class:
        names = {c.id: c.name for c in val_set.categories}
        categories = [
            {"name": names.get(cid, str(cid)), "records": recs + normal_records}
            for cid, recs in per_class_records.items()
            if recs
        ]
    else:
        categories = [{"name": cat_name, "records": records}]

    manifest = {
        "name": f"coco-ad-split{k}",
        "anomaly_category_ids": sorted(anomaly_ids),
        "categories": categories,
        "counts": {
            "train": len(train_images),
            "test_normal": n_normal,
            "test_anomaly": n_anomaly,
            "skipped_unannotated": 0,
        },
    }
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return SplitBuildResult(
        split_index=k,
        manifest_path=manifest_path,
        train_count=len(train_images),
        test_normal_count=n_normal,
        test_anomaly_count=n_anomaly,
        skipped_unannotated=0,
    )


def deviation_report(results: Sequence[SplitBuildResult]) -> dict:
    """Compare built split counts against the expected real-data counts."""
    report = {"matches": True, "splits": {}}
    for res in results:
        expected = EXPECTED_SPLIT_COUNTS.get(res.split_index)
        got = (res.train_count, res.test_normal_count, res.test_anomaly_count)
        entry = {"built": {"train": got[0], "test_normal": got[1], "test_anomaly": got[2]}}
        if expected is not None:
            entry["expected"] = {
                "train": expected[0],
                "test_normal": expected[1],
                "test_anomaly": expected[2],
            }
            entry["match"] = got == expected
            report["matches"] = report["matches"] and entry["match"]
        report["splits"][res.split_index] = entry
    return report


# ---------------------------------------------------------------------------
# Dataset statistics
# ---------------------------------------------------------------------------

# Fixed histogram edges for the statistics report (proportions in [0, 1],
# aspect ratios clipped into the last bin).
AREA_PROPORTION_EDGES = (0.0, 0.02, 0.05, 0.10, 0.20, 0.50, 1.0)
REGION_COUNT_EDGES = (1, 2, 3, 5, 10, 20, 10**9)
ASPECT_RATIO_EDGES = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0, float("inf"))


def _histogram(values, edges) -> list[int]:
    """Right-closed bins (lo, hi], so 'within 2%' includes exactly 2%."""
    values = np.asarray(values, dtype=np.float64)
    edges = np.asarray(edges, dtype=np.float64)
    idx = np.minimum(np.searchsorted(edges[1:], values, side="left"), edges.size - 2)
    counts = np.bincount(idx, minlength=edges.size - 1) if values.size else np.zeros(edges.size - 1, int)
    return [int(c) for c in counts]


@dataclass(frozen=True)
class StatsReport:
    """Four distributions over the anomalous test images of a built split."""

    image_count: int
    single_region_area_hist: list[int]
    image_area_hist: list[int]
    regions_per_image_hist: list[int]
    aspect_ratio_hist: list[int]
    fraction_images_within_10pct: float
    fraction_regions_within_2pct: float

    def to_json_dict(self) -> dict:
        return {
            "image_count": self.image_count,
            "single_region_area": {
                "edges": list(AREA_PROPORTION_EDGES),
                "counts": self.single_region_area_hist,
            },
            "image_anomalous_area": {
                "edges": list(AREA_PROPORTION_EDGES),
                "counts": self.image_area_hist,
            },
            "regions_per_image": {
                "edges": list(REGION_COUNT_EDGES),
                "counts": self.regions_per_image_hist,
            },
            "region_aspect_ratio": {
                "edges": list(ASPECT_RATIO_EDGES),
                "counts": self.aspect_ratio_hist,
            },
            "fraction_images_within_10pct": self.fraction_images_within_10pct,
            "fraction_regions_within_2pct": self.fraction_regions_within_2pct,
        }


def statistics_from_masks(masks: Iterable[BinaryMask], connectivity: int = 8) -> StatsReport:
    """Aggregate per-region statistics over anomalous-image masks."""
    region_areas = []
    image_areas = []
    region_counts = []
    ratios = []
    n_images = 0
    for mask in masks:
        n_images += 1
        regions = maskops.connected_components(mask, connectivity)
        rec = maskops.region_statistics(regions, (mask.height, mask.width))
        region_areas.extend(rec.area_proportions)
        ratios.extend(rec.aspect_ratios)
        region_counts.append(rec.region_count)
        image_areas.append(rec.total_area_proportion)
    if n_images == 0:
        raise DataModelError("statistics need at least one anomalous mask")
    image_areas_arr = np.asarray(image_areas)
    region_areas_arr = np.asarray(region_areas) if region_areas else np.empty(0)
    return StatsReport(
        image_count=n_images,
        single_region_area_hist=_histogram(region_areas_arr, AREA_PROPORTION_EDGES),
        image_area_hist=_histogram(image_areas_arr, AREA_PROPORTION_EDGES),
        regions_per_image_hist=_histogram(region_counts, REGION_COUNT_EDGES),
        aspect_ratio_hist=_histogram(
            np.minimum(np.asarray(ratios, dtype=np.float64), ASPECT_RATIO_EDGES[-2] + 1.0)
            if ratios
            else np.empty(0),
            ASPECT_RATIO_EDGES,
        ),
        fraction_images_within_10pct=float(np.mean(image_areas_arr <= 0.10)),
        fraction_regions_within_2pct=(
            float(np.mean(region_areas_arr <= 0.02)) if region_areas_arr.size else 0.0
        ),
    )


def dataset_statistics(manifest_path, connectivity: int = 8) -> StatsReport:
    """Statistics for a built split: reads every anomalous mask it references.

    Works straight off the manifest JSON (score maps need not exist yet,
    so a freshly built split can be profiled before any predictions).
    """
    from .datamodel import read_mask

    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    base = manifest_path.parent / doc.get("gt_root", ".")
    mask_paths = [
        base / rec["mask"]
        for cat in doc.get("categories", [])
        for rec in cat.get("records", [])
        if rec.get("label") == "anomalous" and rec.get("mask")
    ]
    if not mask_paths:
        raise DataModelError(f"{manifest_path}: no anomalous masks referenced")
    return statistics_from_masks((read_mask(p) for p in mask_paths), connectivity)
