import json

import numpy as np
import pytest

from adbench.datamodel import (
    BadMagicError,
    BinaryMask,
    DataModelError,
    ManifestError,
    ScoreMap,
    TensorBlob,
    TruncatedBlobError,
    UnknownDtypeError,
    derive_image_score,
    load_category_eval_set,
    load_manifest,
    read_mask,
    read_tensor_blob,
    write_pgm,
    write_tensor_blob,
)


class TestTensorBlobIO:
    def test_f32_round_trip(self, tmp_path):
        blob = TensorBlob("f32", (2, 2), np.array([1, 2, 3, 4], dtype=np.float32))
        path = tmp_path / "a.adtb"
        write_tensor_blob(blob, path)
        raw = path.read_bytes()
        assert raw[:4] == b"ADTB"
        # 4 magic + 2 version + 1 dtype + 1 ndim + 2*8 dims, then 16 payload bytes
        assert len(raw) == 24 + 16
        back = read_tensor_blob(path)
        assert back.dtype == "f32" and back.dims == (2, 2)
        assert np.array_equal(back.data, blob.data)

    def test_minimal_u8(self, tmp_path):
        path = tmp_path / "b.adtb"
        write_tensor_blob(TensorBlob("u8", (1,), np.array([0], dtype=np.uint8)), path)
        back = read_tensor_blob(path)
        assert back.dims == (1,) and back.data[0] == 0
        assert len(path.read_bytes()) == 16 + 1

    def test_random_blob_round_trips_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        specs = [("f32", np.float32), ("f64", np.float64), ("u8", np.uint8), ("u16", np.uint16)]
        for i in range(100):
            dtype, np_dtype = specs[i % 4]
            ndim = int(rng.integers(1, 5))
            dims = tuple(int(d) for d in rng.integers(1, 6, size=ndim))
            if np_dtype in (np.uint8, np.uint16):
                data = rng.integers(0, np.iinfo(np_dtype).max, size=dims).astype(np_dtype)
            else:
                data = rng.standard_normal(dims).astype(np_dtype)
            blob = TensorBlob(dtype, dims, data)
            path = tmp_path / f"r{i}.adtb"
            write_tensor_blob(blob, path)
            back = read_tensor_blob(path)
            assert back.dims == dims
            assert back.data.tobytes() == blob.data.tobytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.adtb"
        path.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(BadMagicError):
            read_tensor_blob(path)

    def test_unknown_dtype_code(self, tmp_path):
        import struct

        path = tmp_path / "dt.adtb"
        path.write_bytes(struct.pack("<4sHBB", b"ADTB", 1, 99, 1) + struct.pack("<Q", 1) + b"\x00")
        with pytest.raises(UnknownDtypeError):
            read_tensor_blob(path)

    def test_truncated_payload(self, tmp_path):
        blob = TensorBlob("f64", (3, 5, 7), np.random.default_rng(1).standard_normal((3, 5, 7)))
        path = tmp_path / "t.adtb"
        write_tensor_blob(blob, path)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(TruncatedBlobError):
            read_tensor_blob(path)

    def test_dims_mismatch_rejected(self):
        with pytest.raises(DataModelError):
            TensorBlob("f32", (2, 3), np.zeros(5, dtype=np.float32))


class TestMasks:
    def test_pgm_payload_convention(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0]))
        mask = read_mask(path)
        assert np.array_equal(mask.labels, [[False, True], [True, False]])

    def test_adtb_u8_zeros(self, tmp_path):
        path = tmp_path / "m.adtb"
        write_tensor_blob(TensorBlob("u8", (1, 3), np.zeros(3, dtype=np.uint8)), path)
        mask = read_mask(path)
        assert mask.labels.shape == (1, 3) and not mask.labels.any()

    def test_cross_format_equivalence(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(1000):
            h = int(rng.integers(1, 9))
            w = int(rng.integers(1, 9))
            raster = rng.integers(0, 256, size=(h, w)).astype(np.uint8)
            pgm = tmp_path / "x.pgm"
            adtb = tmp_path / "x.adtb"
            write_pgm(raster, pgm)
            write_tensor_blob(TensorBlob("u8", (h, w), raster), adtb)
            assert np.array_equal(read_mask(pgm).labels, read_mask(adtb).labels)

    def test_unsupported_format(self, tmp_path):
        path = tmp_path / "nope.bin"
        path.write_bytes(b"\x89PNG____")
        with pytest.raises(DataModelError):
            read_mask(path)


def _write_fixture_files(root, cat="widget"):
    scores = np.array([[0.1, 0.9], [0.2, 0.3]])
    mask = np.array([[0, 255], [0, 0]], dtype=np.uint8)
    write_tensor_blob(TensorBlob("f64", scores.shape, scores), root / "anom.adtb")
    write_tensor_blob(TensorBlob("f64", scores.shape, scores * 0.1), root / "good.adtb")
    write_pgm(mask, root / "anom_mask.pgm")
    return {
        "name": "mini",
        "categories": [
            {
                "name": cat,
                "records": [
                    {"id": "g0", "label": "normal", "score_map": "good.adtb"},
                    {"id": "a0", "label": "anomalous", "score_map": "anom.adtb", "mask": "anom_mask.pgm"},
                ],
            }
        ],
    }


class TestManifest:
    def test_minimal_manifest_loads(self, tmp_path):
        doc = _write_fixture_files(tmp_path)
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        manifest = load_manifest(tmp_path / "manifest.json")
        assert manifest.name == "mini"
        assert len(manifest.categories) == 1
        eval_set = load_category_eval_set(manifest.categories[0])
        assert len(eval_set.items) == 2

    def test_duplicate_category_rejected(self, tmp_path):
        doc = _write_fixture_files(tmp_path)
        doc["categories"].append(doc["categories"][0])
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="duplicate category"):
            load_manifest(tmp_path / "manifest.json")

    def test_anomalous_without_mask_rejected(self, tmp_path):
        doc = _write_fixture_files(tmp_path)
        del doc["categories"][0]["records"][1]["mask"]
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="lacks a mask"):
            load_manifest(tmp_path / "manifest.json")

    def test_dangling_score_map_names_record(self, tmp_path):
        doc = _write_fixture_files(tmp_path)
        doc["categories"][0]["records"][0]["score_map"] = "missing.adtb"
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="g0"):
            load_manifest(tmp_path / "manifest.json")

    def test_normal_record_with_anomalous_mask_rejected(self, tmp_path):
        doc = _write_fixture_files(tmp_path)
        doc["categories"][0]["records"][0]["mask"] = "anom_mask.pgm"  # has true pixels
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="anomalous mask pixels"):
            load_manifest(tmp_path / "manifest.json")

    def test_category_without_anomalous_rejected(self, tmp_path):
        doc = _write_fixture_files(tmp_path)
        doc["categories"][0]["records"] = doc["categories"][0]["records"][:1]
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError, match="no anomalous"):
            load_manifest(tmp_path / "manifest.json")

    def test_loading_twice_is_deterministic(self, tmp_path):
        doc = _write_fixture_files(tmp_path)
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        a = load_manifest(tmp_path / "manifest.json")
        b = load_manifest(tmp_path / "manifest.json")
        assert a == b


class TestImageScore:
    def test_max(self):
        assert derive_image_score(ScoreMap(np.array([[0.1, 0.9, 0.4]]))) == 0.9

    def test_topk_mean(self):
        assert derive_image_score(ScoreMap(np.array([[0.1, 0.9, 0.4]])), "topk", 2) == pytest.approx(0.65)

    def test_constant_map(self):
        m = ScoreMap(np.full((3, 3), 0.7))
        assert derive_image_score(m, "max") == 0.7
        assert derive_image_score(m, "topk", 4) == pytest.approx(0.7)

    def test_max_is_permutation_invariant(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            vals = rng.random(12)
            a = derive_image_score(ScoreMap(vals.reshape(3, 4)))
            b = derive_image_score(ScoreMap(rng.permutation(vals).reshape(4, 3)))
            assert a == b

    def test_k_too_large(self):
        with pytest.raises(DataModelError):
            derive_image_score(ScoreMap(np.zeros((2, 2))), "topk", 5)


class TestTypeInvariants:
    def test_score_map_rejects_nan(self):
        with pytest.raises(DataModelError):
            ScoreMap(np.array([[np.nan]]))

    def test_mask_dimensions(self):
        with pytest.raises(DataModelError):
            BinaryMask(np.zeros((0, 3), dtype=bool))
