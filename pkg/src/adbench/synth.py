"""Seeded synthetic evaluation fixtures with analytically known metrics.

`write_fixture` emits a complete on-disk dataset (score maps as ADTB,
masks as PGM, manifest JSON) for a chosen predictor family:

- "perfect": scores equal the ground truth, so every metric is 100.
- "constant": one flat score everywhere; ranking metrics sit at chance
  (AU-ROC 50, AU-PRO 50) and the band metrics at 0.
- "noisy": ground truth blended with seeded noise; no planted values,
  useful for smoke tests and timing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datamodel import BinaryMask, TensorBlob, write_pgm, write_tensor_blob


def _blob(scores: np.ndarray) -> TensorBlob:
    return TensorBlob(dtype="f64", dims=scores.shape, data=scores)


def _random_mask(rng, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    n_blobs = int(rng.integers(1, 4))
    for _ in range(n_blobs):
        side = int(rng.integers(3, max(4, size // 4)))
        r0 = int(rng.integers(0, size - side))
        c0 = int(rng.integers(0, size - side))
        mask[r0 : r0 + side, c0 : c0 + side] = True
    return mask


def _predict(kind: str, mask: np.ndarray, rng) -> np.ndarray:
    if kind == "perfect":
        return mask.astype(np.float64)
    if kind == "constant":
        return np.full(mask.shape, 0.5)
    if kind == "noisy":
        clean = mask.astype(np.float64)
        # overlapping class distributions: anomalous ~ [0.35, 0.95], normal ~ [0.05, 0.65]
        return np.clip(0.3 * clean + 0.6 * rng.random(mask.shape) + 0.05, 0.0, 1.0)
    raise ValueError(f"unknown predictor kind {kind!r}")


def write_fixture(
    out_dir,
    seed: int = 0,
    predictor: str = "noisy",
    categories: int = 2,
    images_per_category: int = 8,
    size: int = 32,
) -> Path:
    """Emit a synthetic dataset; returns the manifest path.

    Half of each category's images are anomalous.  Deterministic: the
    same arguments produce byte-identical files.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    cats = []
    for ci in range(categories):
        name = f"cat{ci}"
        (out_dir / name).mkdir(parents=True, exist_ok=True)
        records = []
        for ii in range(images_per_category):
            anomalous = ii < images_per_category // 2
            image_id = f"{name}_{ii:03d}"
            if anomalous:
                mask = _random_mask(rng, size)
            else:
                mask = np.zeros((size, size), dtype=bool)
            scores = _predict(predictor, mask, rng)
            score_rel = f"{name}/{image_id}.adtb"
            write_tensor_blob(_blob(scores), out_dir / score_rel)
            rec = {
                "id": image_id,
                "label": "anomalous" if anomalous else "normal",
                "score_map": score_rel,
            }
            if anomalous:
                mask_rel = f"{name}/{image_id}_mask.pgm"
                write_pgm(BinaryMask(mask), out_dir / mask_rel)
                rec["mask"] = mask_rel
            records.append(rec)
        cats.append({"name": name, "records": records})
    manifest = {"name": f"synth-{predictor}-seed{seed}", "categories": cats}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1))
    return manifest_path
