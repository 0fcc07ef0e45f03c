"""Core value types, dataset manifests, and bit-exact tensor/mask file IO.

Everything downstream (mask ops, curve metrics, the evaluation driver)
works on the types defined here.  All containers are immutable after
construction and safe to share between workers.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

ADTB_MAGIC = b"ADTB"
ADTB_VERSION = 1

# dtype code <-> numpy dtype (always little-endian on disk)
_DTYPE_CODES = {"f32": 1, "f64": 2, "u8": 3, "u16": 4}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NUMPY_DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1", "u16": "<u2"}


class DataModelError(ValueError):
    """Base class for validation and IO-format failures in this module."""


class BadMagicError(DataModelError):
    """File does not start with the ADTB magic bytes."""


class UnknownDtypeError(DataModelError):
    """ADTB header carries a dtype code outside the known set."""


class TruncatedBlobError(DataModelError):
    """ADTB payload or header is shorter than the dims demand."""


class ManifestError(DataModelError):
    """Manifest JSON violates the schema or a type invariant."""


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel real-valued anomaly scores for one image.

    Scores are unbounded before normalization and lie in [0, 1] after.
    """

    scores: np.ndarray  # (H, W) float64, row-major

    def __post_init__(self):
        arr = np.asarray(self.scores, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataModelError(f"score map must be 2-D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataModelError("score map contains NaN or Inf")
        object.__setattr__(self, "scores", arr)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel boolean anomaly labels (True = anomalous)."""

    labels: np.ndarray  # (H, W) bool

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataModelError(f"mask must be 2-D and non-empty, got shape {arr.shape}")
        object.__setattr__(self, "labels", arr)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def any(self) -> bool:
        return bool(self.labels.any())


@dataclass(frozen=True)
class ImageRecord:
    """One test item: where its score map and (optional) mask live."""

    image_id: str
    category: str
    is_anomalous: bool
    score_map_path: Path
    mask_path: Optional[Path] = None
    image_score: Optional[float] = None


@dataclass(frozen=True)
class CategoryDescriptor:
    """Path-level view of one category inside a manifest."""

    name: str
    records: tuple[ImageRecord, ...]


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    categories: tuple[CategoryDescriptor, ...]
    gt_root: Path
    pred_root: Path


@dataclass(frozen=True)
class EvalItem:
    """A fully loaded test image: scores, optional mask, image label."""

    image_id: str
    is_anomalous: bool
    scores: ScoreMap
    mask: Optional[BinaryMask]
    image_score: Optional[float] = None


@dataclass(frozen=True)
class CategoryEvalSet:
    """All test images of one category; the unit every metric runs over."""

    category: str
    items: tuple[EvalItem, ...]

    def __post_init__(self):
        if not self.items:
            raise DataModelError(f"category {self.category!r} is empty")
        n_anom = sum(it.is_anomalous for it in self.items)
        if n_anom == 0 or n_anom == len(self.items):
            raise DataModelError(
                f"category {self.category!r} needs >=1 normal and >=1 anomalous image "
                f"(got {n_anom}/{len(self.items)} anomalous)"
            )


@dataclass(frozen=True)
class TensorBlob:
    """Typed n-D array payload with a fixed on-disk representation."""

    dtype: str  # one of f32/f64/u8/u16
    dims: tuple[int, ...]
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in _DTYPE_CODES:
            raise DataModelError(f"unsupported blob dtype {self.dtype!r}")
        dims = tuple(int(d) for d in self.dims)
        if not 1 <= len(dims) <= 4 or any(d < 1 for d in dims):
            raise DataModelError(f"blob dims must be 1..4 positive extents, got {dims}")
        arr = np.asarray(self.data, dtype=_NUMPY_DTYPES[self.dtype])
        n = int(np.prod(dims))
        if arr.size != n:
            raise DataModelError(f"element count {arr.size} != product of dims {n}")
        arr = arr.reshape(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", arr)


def write_tensor_blob(blob: TensorBlob, destination) -> None:
    """Write `blob` in the ADTB container format.

    Layout: magic "ADTB", u16 LE version=1, u8 dtype code, u8 ndim,
    ndim x u64 LE dims, then the row-major little-endian payload.
    """
    destination = Path(destination)
    header = struct.pack(
        "<4sHBB", ADTB_MAGIC, ADTB_VERSION, _DTYPE_CODES[blob.dtype], len(blob.dims)
    )
    header += struct.pack(f"<{len(blob.dims)}Q", *blob.dims)
    payload = np.ascontiguousarray(blob.data, dtype=_NUMPY_DTYPES[blob.dtype]).tobytes()
    destination.write_bytes(header + payload)


def read_tensor_blob(source) -> TensorBlob:
    """Inverse of :func:`write_tensor_blob`; round-trips bit-exactly."""
    raw = Path(source).read_bytes()
    if len(raw) < 8:
        raise TruncatedBlobError(f"{source}: file shorter than the fixed header")
    magic, version, code, ndim = struct.unpack_from("<4sHBB", raw, 0)
    if magic != ADTB_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}")
    if version != ADTB_VERSION:
        raise DataModelError(f"{source}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise UnknownDtypeError(f"{source}: unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise DataModelError(f"{source}: ndim {ndim} outside [1, 4]")
    offset = 8
    if len(raw) < offset + 8 * ndim:
        raise TruncatedBlobError(f"{source}: header truncated before dims")
    dims = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    dtype = _CODE_DTYPES[code]
    np_dtype = np.dtype(_NUMPY_DTYPES[dtype])
    n = int(np.prod(dims))
    need = n * np_dtype.itemsize
    if len(raw) - offset < need:
        raise TruncatedBlobError(
            f"{source}: payload has {len(raw) - offset} bytes, dims demand {need}"
        )
    data = np.frombuffer(raw, dtype=np_dtype, count=n, offset=offset).reshape(dims)
    return TensorBlob(dtype=dtype, dims=tuple(int(d) for d in dims), data=data.copy())


# ---------------------------------------------------------------------------
# PGM (binary P5, maxval 255) -- the human-toolable mask format
# ---------------------------------------------------------------------------

_PGM_TOKEN = re.compile(rb"^\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pgm_read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    m = _PGM_TOKEN.match(buf[pos:])
    if not m:
        raise DataModelError("PGM header ended unexpectedly")
    return m.group(1), pos + m.end(1)


def write_pgm(mask_or_bytes, destination) -> None:
    """Write a BinaryMask (255 = anomalous) or a u8 array as binary P5."""
    if isinstance(mask_or_bytes, BinaryMask):
        arr = np.where(mask_or_bytes.labels, 255, 0).astype(np.uint8)
    else:
        arr = np.asarray(mask_or_bytes, dtype=np.uint8)
        if arr.ndim != 2:
            raise DataModelError("PGM payload must be 2-D")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(destination).write_bytes(header + arr.tobytes())


def read_pgm(source) -> np.ndarray:
    raw = Path(source).read_bytes()
    if raw[:2] != b"P5":
        raise DataModelError(f"{source}: not a binary PGM (P5) file")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _pgm_read_token(raw, pos)
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise DataModelError(f"{source}: only maxval 255 supported, got {maxval}")
    if w < 1 or h < 1:
        raise DataModelError(f"{source}: zero-area image {w}x{h}")
    pos += 1  # single whitespace after maxval
    payload = raw[pos : pos + w * h]
    if len(payload) != w * h:
        raise DataModelError(f"{source}: PGM payload truncated")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def read_mask(source) -> BinaryMask:
    """Read a mask from PGM (P5) or from an ADTB u8 blob of dims [H, W].

    Any nonzero pixel maps to True.
    """
    source = Path(source)
    with source.open("rb") as fh:
        head = fh.read(4)
    if head[:2] == b"P5":
        return BinaryMask(read_pgm(source) != 0)
    if head == ADTB_MAGIC:
        blob = read_tensor_blob(source)
        if blob.dtype != "u8" or len(blob.dims) != 2:
            raise DataModelError(f"{source}: mask blob must be u8 with dims [H, W]")
        return BinaryMask(blob.data != 0)
    raise DataModelError(f"{source}: unsupported mask format")


def read_score_map(source) -> ScoreMap:
    """Read a score map from an ADTB f32/f64 blob of dims [H, W]."""
    blob = read_tensor_blob(source)
    if blob.dtype not in ("f32", "f64") or len(blob.dims) != 2:
        raise DataModelError(f"{source}: score map blob must be f32/f64 with dims [H, W]")
    return ScoreMap(blob.data.astype(np.float64))


# ---------------------------------------------------------------------------
# Manifest loading
# ---------------------------------------------------------------------------


def load_manifest(source, check_masks: bool = True) -> DatasetManifest:
    """Load and eagerly validate a dataset manifest.

    The JSON document looks like::

        {"name": ..., "gt_root"?: ..., "pred_root"?: ...,
         "categories": [{"name": ..., "records": [
             {"id": ..., "label": "normal"|"anomalous",
              "score_map": ..., "mask"?: ..., "image_score"?: ...}]}]}

    Record paths are resolved against ``pred_root`` (score maps) and
    ``gt_root`` (masks); both roots default to the manifest's directory.
    Every invariant of every contained type is checked up front, including
    that anomalous masks have at least one true pixel (disable the content
    scan with ``check_masks=False``).
    """
    source = Path(source)
    try:
        doc = json.loads(source.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{source}: invalid JSON ({e})") from e
    if not isinstance(doc, dict) or "name" not in doc or "categories" not in doc:
        raise ManifestError(f"{source}: manifest must carry 'name' and 'categories'")

    base = source.parent
    gt_root = (base / doc["gt_root"]).resolve() if "gt_root" in doc else base.resolve()
    pred_root = (base / doc["pred_root"]).resolve() if "pred_root" in doc else base.resolve()

    seen_names = set()
    categories = []
    for cat in doc["categories"]:
        if not isinstance(cat, dict) or "name" not in cat or "records" not in cat:
            raise ManifestError(f"{source}: category entries need 'name' and 'records'")
        name = str(cat["name"])
        if name in seen_names:
            raise ManifestError(f"{source}: duplicate category {name!r}")
        seen_names.add(name)
        records = []
        n_anom = 0
        for rec in cat["records"]:
            records.append(_parse_record(rec, name, gt_root, pred_root, source, check_masks))
            n_anom += records[-1].is_anomalous
        if not records:
            raise ManifestError(f"{source}: category {name!r} has no records")
        if n_anom == 0:
            raise ManifestError(f"{source}: category {name!r} has no anomalous record")
        if n_anom == len(records):
            raise ManifestError(f"{source}: category {name!r} has no normal record")
        categories.append(CategoryDescriptor(name=name, records=tuple(records)))
    if not categories:
        raise ManifestError(f"{source}: manifest has no categories")
    return DatasetManifest(
        name=str(doc["name"]), categories=tuple(categories), gt_root=gt_root, pred_root=pred_root
    )


def _parse_record(rec, category, gt_root, pred_root, source, check_masks) -> ImageRecord:
    for key in ("id", "label", "score_map"):
        if key not in rec:
            raise ManifestError(f"{source}: record in {category!r} missing {key!r}")
    label = rec["label"]
    if label not in ("normal", "anomalous"):
        raise ManifestError(f"{source}: record {rec['id']!r} has bad label {label!r}")
    is_anom = label == "anomalous"
    score_path = pred_root / rec["score_map"]
    if not score_path.is_file():
        raise ManifestError(
            f"{source}: record {rec['id']!r} references missing score map {score_path}"
        )
    mask_path = None
    if rec.get("mask") is not None:
        mask_path = gt_root / rec["mask"]
        if not mask_path.is_file():
            raise ManifestError(f"{source}: record {rec['id']!r} references missing mask {mask_path}")
    if is_anom and mask_path is None:
        raise ManifestError(f"{source}: anomalous record {rec['id']!r} lacks a mask")
    if check_masks and mask_path is not None:
        has_true = read_mask(mask_path).any()
        if is_anom and not has_true:
            raise ManifestError(f"{source}: anomalous record {rec['id']!r} has an all-false mask")
        if not is_anom and has_true:
            raise ManifestError(f"{source}: normal record {rec['id']!r} has anomalous mask pixels")
    score = rec.get("image_score")
    return ImageRecord(
        image_id=str(rec["id"]),
        category=category,
        is_anomalous=is_anom,
        score_map_path=score_path,
        mask_path=mask_path,
        image_score=None if score is None else float(score),
    )


def load_category_eval_set(descriptor: CategoryDescriptor) -> CategoryEvalSet:
    """Materialize a descriptor's score maps and masks into memory."""
    items = []
    for rec in descriptor.records:
        scores = read_score_map(rec.score_map_path)
        mask = read_mask(rec.mask_path) if rec.mask_path is not None else None
        if mask is not None and mask.labels.shape != scores.scores.shape:
            raise DataModelError(
                f"record {rec.image_id!r}: mask {mask.labels.shape} does not match "
                f"score map {scores.scores.shape}"
            )
        items.append(
            EvalItem(
                image_id=rec.image_id,
                is_anomalous=rec.is_anomalous,
                scores=scores,
                mask=mask,
                image_score=rec.image_score,
            )
        )
    return CategoryEvalSet(category=descriptor.name, items=tuple(items))


def derive_image_score(score_map: ScoreMap, mode: str = "max", k: int = 1) -> float:
    """Collapse a pixel map to a single image score.

    ``mode="max"`` takes the maximum pixel score; ``mode="topk"`` averages
    the k largest pixels.  The max is the dominant convention for
    reconstruction-error maps and is the default everywhere.
    """
    flat = score_map.scores.ravel()
    if mode == "max":
        return float(flat.max())
    if mode == "topk":
        if k < 1:
            raise DataModelError("topk image score needs k >= 1")
        if k > flat.size:
            raise DataModelError(f"k={k} exceeds pixel count {flat.size}")
        top = np.partition(flat, flat.size - k)[flat.size - k :]
        return float(top.mean())
    raise DataModelError(f"unknown image-score mode {mode!r}")
