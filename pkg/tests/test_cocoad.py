import json

import numpy as np
import pytest

from adbench.cocoad import (
    CocoCategory,
    CocoFormatError,
    SplitAssignment,
    assign_splits,
    build_split,
    dataset_statistics,
    decode_rle,
    deviation_report,
    encode_rle,
    parse_coco,
    rasterize_polygon,
    rle_counts_to_string,
    rle_string_to_counts,
    statistics_from_masks,
)
from adbench.datamodel import BinaryMask, read_mask

from oracles import rasterize_by_ray_cast


def write_coco(path, categories, images, annotations):
    path.write_text(
        json.dumps({"categories": categories, "images": images, "annotations": annotations})
    )
    return path


class TestParseCoco:
    def test_minimal_fixture_counts(self, tmp_path):
        doc = write_coco(
            tmp_path / "a.json",
            [{"id": 1, "name": "cat"}, {"id": 2, "name": "dog"}],
            [
                {"id": 10, "width": 4, "height": 3, "file_name": "x.jpg"},
                {"id": 11, "width": 4, "height": 3, "file_name": "y.jpg"},
                {"id": 12, "width": 4, "height": 3, "file_name": "z.jpg"},
            ],
            [
                {"id": 100, "image_id": 10, "category_id": 1, "segmentation": [[0, 0, 2, 0, 2, 2]], "area": 2},
                {"id": 101, "image_id": 11, "category_id": 2, "segmentation": [[0, 0, 2, 0, 2, 2]], "area": 2},
            ],
        )
        parsed = parse_coco(doc)
        assert (len(parsed.categories), len(parsed.images), len(parsed.annotations)) == (2, 3, 2)
        assert [c.ordinal for c in parsed.categories] == [0, 1]

    def test_empty_annotations_is_valid(self, tmp_path):
        doc = write_coco(
            tmp_path / "b.json",
            [{"id": 1, "name": "cat"}],
            [{"id": 10, "width": 2, "height": 2, "file_name": "x.jpg"}],
            [],
        )
        parsed = parse_coco(doc)
        assert len(parsed.annotations) == 0

    def test_dangling_image_reference(self, tmp_path):
        doc = write_coco(
            tmp_path / "c.json",
            [{"id": 1, "name": "cat"}],
            [{"id": 10, "width": 2, "height": 2, "file_name": "x.jpg"}],
            [{"id": 100, "image_id": 999, "category_id": 1, "segmentation": [], "area": 0}],
        )
        with pytest.raises(CocoFormatError, match="unknown image"):
            parse_coco(doc)

    def test_duplicate_ids_rejected(self, tmp_path):
        doc = write_coco(
            tmp_path / "d.json",
            [{"id": 1, "name": "cat"}, {"id": 1, "name": "dog"}],
            [],
            [],
        )
        with pytest.raises(CocoFormatError, match="duplicate category"):
            parse_coco(doc)


class TestRle:
    def test_single_zero_run(self):
        mask = decode_rle([6], (2, 3))
        assert not mask.labels.any()

    def test_column_major_expansion(self):
        mask = decode_rle([1, 2, 1, 2], (2, 3))
        assert np.array_equal(mask.labels, [[False, True, True], [True, False, True]])

    def test_sum_mismatch_rejected(self):
        with pytest.raises(CocoFormatError, match="sum"):
            decode_rle([5], (2, 3))

    def test_encode_is_inverse(self):
        rng = np.random.default_rng(30)
        for _ in range(200):
            h = int(rng.integers(1, 12))
            w = int(rng.integers(1, 12))
            mask = BinaryMask(rng.random((h, w)) > rng.uniform(0.2, 0.8))
            counts = encode_rle(mask)
            assert sum(counts) == h * w
            back = decode_rle(counts, (h, w))
            assert np.array_equal(back.labels, mask.labels)

    def test_string_round_trip(self):
        rng = np.random.default_rng(31)
        for _ in range(200):
            h = int(rng.integers(1, 16))
            w = int(rng.integers(1, 16))
            mask = BinaryMask(rng.random((h, w)) > 0.5)
            counts = encode_rle(mask)
            s = rle_counts_to_string(counts)
            assert rle_string_to_counts(s) == counts
            assert np.array_equal(decode_rle(s, (h, w)).labels, mask.labels)

    def test_known_string_values(self):
        assert rle_counts_to_string([6]) == "6"
        assert rle_string_to_counts("6") == [6]
        # fourth count onward is delta-coded against two back
        counts = [2, 3, 1, 1]
        assert rle_string_to_counts(rle_counts_to_string(counts)) == counts

    def test_malformed_string_rejected(self):
        with pytest.raises(CocoFormatError):
            rle_string_to_counts("\x07")  # below the printable offset


class TestPolygon:
    def test_axis_aligned_rectangle(self):
        mask = rasterize_polygon([1, 1, 4, 1, 4, 3, 1, 3], (6, 6))
        expected = np.zeros((6, 6), dtype=bool)
        expected[1:3, 1:4] = True  # pixel centers strictly inside
        assert np.array_equal(mask.labels, expected)

    def test_right_triangle_matches_ray_cast_oracle(self):
        xs = [0.5, 7.5, 0.5]
        ys = [0.5, 7.5, 7.5]
        poly = [c for p in zip(xs, ys) for c in p]
        mask = rasterize_polygon(poly, (8, 8))
        oracle = rasterize_by_ray_cast(xs, ys, 8, 8)
        assert np.array_equal(mask.labels, oracle)

    def test_two_vertices_rejected(self):
        with pytest.raises(CocoFormatError, match="3 vertices"):
            rasterize_polygon([0, 0, 1, 1], (4, 4))

    def test_far_outside_vertices_rejected(self):
        with pytest.raises(CocoFormatError, match="tolerance"):
            rasterize_polygon([0, 0, 50, 0, 50, 50], (4, 4))

    def test_random_polygons_match_oracle(self):
        rng = np.random.default_rng(32)
        for i in range(40):
            n = int(rng.integers(3, 9))
            if i % 2 == 0:  # convex-ish: sorted by angle
                angles = np.sort(rng.uniform(0, 2 * np.pi, n))
                radius = rng.uniform(2, 5)
                xs = 6 + radius * np.cos(angles)
                ys = 6 + radius * np.sin(angles)
            else:  # concave star: jittered radii
                angles = np.sort(rng.uniform(0, 2 * np.pi, n))
                radii = rng.uniform(1, 5, n)
                xs = 6 + radii * np.cos(angles)
                ys = 6 + radii * np.sin(angles)
            poly = [c for p in zip(xs, ys) for c in p]
            mask = rasterize_polygon(poly, (12, 12))
            oracle = rasterize_by_ray_cast(list(xs), list(ys), 12, 12)
            assert np.array_equal(mask.labels, oracle)


class TestAssignSplits:
    def _categories(self):
        # ids ascending with gaps, like the real annotation files
        ids = [i * 2 + 1 for i in range(80)]
        return [CocoCategory(id=i, name=f"c{i}", ordinal=k) for k, i in enumerate(ids)]

    def test_split0_takes_first_twenty(self):
        cats = self._categories()
        splits = assign_splits(cats)
        assert splits[0].anomaly_category_ids == frozenset(c.id for c in cats[:20])

    def test_partition(self):
        splits = assign_splits(self._categories())
        union = set()
        for s in splits:
            assert len(s.anomaly_category_ids) == 20
            assert not (union & s.anomaly_category_ids)
            union |= s.anomaly_category_ids
        assert len(union) == 80

    def test_wrong_count_rejected(self):
        cats = self._categories() + [CocoCategory(id=999, name="x", ordinal=80)]
        with pytest.raises(CocoFormatError, match="80"):
            assign_splits(cats)


def _mini_fixture(tmp_path):
    """Six val images, four categories; anomaly classes are {1, 2}."""
    categories = [{"id": i, "name": f"c{i}"} for i in (1, 2, 3, 4)]
    rect = [[1, 1, 4, 1, 4, 3, 1, 3]]  # 3x2 block of pixel centers
    train = write_coco(
        tmp_path / "train.json",
        categories,
        [
            {"id": 1, "width": 6, "height": 6, "file_name": "t1.jpg"},
            {"id": 2, "width": 6, "height": 6, "file_name": "t2.jpg"},
            {"id": 3, "width": 6, "height": 6, "file_name": "t3.jpg"},
        ],
        [
            {"id": 9001, "image_id": 1, "category_id": 3, "segmentation": rect, "area": 6},
            {"id": 9002, "image_id": 2, "category_id": 1, "segmentation": rect, "area": 6},
        ],
    )
    rle_counts = [6, 2, 4, 2, 22]  # 6x6 column-major: column 1 rows 0-1, column 2 rows 0-1
    val = write_coco(
        tmp_path / "val.json",
        categories,
        [
            {"id": 10, "width": 6, "height": 6, "file_name": "v1.jpg"},
            {"id": 11, "width": 6, "height": 6, "file_name": "v2.jpg"},
            {"id": 12, "width": 6, "height": 6, "file_name": "v3.jpg"},
            {"id": 13, "width": 6, "height": 6, "file_name": "v4.jpg"},
            {"id": 14, "width": 6, "height": 6, "file_name": "v5.jpg"},
            {"id": 15, "width": 6, "height": 6, "file_name": "v6.jpg"},
        ],
        [
            {"id": 1, "image_id": 10, "category_id": 1, "segmentation": rect, "area": 6},
            {"id": 2, "image_id": 11, "category_id": 3, "segmentation": rect, "area": 6},
            {"id": 3, "image_id": 12, "category_id": 2,
             "segmentation": {"size": [6, 6], "counts": rle_counts}, "area": 4},
            {"id": 4, "image_id": 12, "category_id": 4, "segmentation": rect, "area": 6},
            {"id": 5, "image_id": 14, "category_id": 1, "iscrowd": 1,
             "segmentation": {"size": [6, 6], "counts": rle_counts}, "area": 4},
            {"id": 6, "image_id": 15, "category_id": 1, "segmentation": rect, "area": 6},
            {"id": 7, "image_id": 15, "category_id": 2,
             "segmentation": [[0, 4, 3, 4, 3, 6, 0, 6]], "area": 6},
        ],
    )
    return train, val


def _rect_mask():
    m = np.zeros((6, 6), dtype=bool)
    m[1:3, 1:4] = True
    return m


def _rle_mask():
    m = np.zeros((6, 6), dtype=bool)
    m[0:2, 1:3] = True
    return m


class TestBuildSplit:
    def test_mini_fixture_membership_and_masks(self, tmp_path):
        train_json, val_json = _mini_fixture(tmp_path)
        train_set = parse_coco(train_json)
        val_set = parse_coco(val_json)
        assignment = SplitAssignment(
            split_index=0,
            anomaly_category_ids=frozenset({1, 2}),
            normal_category_ids=frozenset({3, 4}),
        )
        res = build_split(train_set, val_set, assignment, tmp_path / "out")
        # hand oracle: t2 carries an anomaly-class annotation, t1/t3 do not
        assert res.train_count == 2
        train_index = json.loads(
            (tmp_path / "out/split0/train/good/index.json").read_text()
        )
        assert sorted(train_index["images"]) == ["t1.jpg", "t3.jpg"]
        # v1 (cat1), v3 (cat2), v5 (crowd cat1), v6 (cat1+cat2) are anomalous
        assert res.test_anomaly_count == 4
        assert res.test_normal_count == 2
        manifest = json.loads(res.manifest_path.read_text())
        by_id = {r["id"]: r for r in manifest["categories"][0]["records"]}
        assert by_id["10"]["label"] == "anomalous"
        assert by_id["11"]["label"] == "normal"
        assert by_id["13"]["label"] == "normal"  # no annotations: background
        root = res.manifest_path.parent
        assert np.array_equal(read_mask(root / by_id["10"]["mask"]).labels, _rect_mask())
        assert np.array_equal(read_mask(root / by_id["12"]["mask"]).labels, _rle_mask())
        assert np.array_equal(read_mask(root / by_id["14"]["mask"]).labels, _rle_mask())
        union = _rect_mask().copy()
        union[4:6, 0:3] = True  # second polygon on v6
        assert np.array_equal(read_mask(root / by_id["15"]["mask"]).labels, union)
        # normal + anomaly counts cover every val image
        assert res.test_normal_count + res.test_anomaly_count == len(val_set.images)

    def test_exclude_crowds_flag(self, tmp_path):
        train_json, val_json = _mini_fixture(tmp_path)
        assignment = SplitAssignment(0, frozenset({1, 2}), frozenset({3, 4}))
        res = build_split(
            parse_coco(train_json), parse_coco(val_json), assignment,
            tmp_path / "out2", include_crowds=False,
        )
        assert res.test_anomaly_count == 3  # the crowd-only image v5 becomes normal
        assert res.test_normal_count == 3

    def test_per_class_categories(self, tmp_path):
        train_json, val_json = _mini_fixture(tmp_path)
        assignment = SplitAssignment(0, frozenset({1, 2}), frozenset({3, 4}))
        res = build_split(
            parse_coco(train_json), parse_coco(val_json), assignment,
            tmp_path / "pc", per_class=True,
        )
        manifest = json.loads(res.manifest_path.read_text())
        cats = {c["name"]: c["records"] for c in manifest["categories"]}
        assert set(cats) == {"c1", "c2"}
        # v6 (id 15) contains both anomaly classes, once per class category
        c1_anom = [r["id"] for r in cats["c1"] if r["label"] == "anomalous"]
        c2_anom = [r["id"] for r in cats["c2"] if r["label"] == "anomalous"]
        assert c1_anom == ["10_c1", "14_c1", "15_c1"]
        assert c2_anom == ["12_c2", "15_c2"]
        # every class category shares the two normal images
        for records in cats.values():
            assert sum(r["label"] == "normal" for r in records) == 2
        # the class-restricted mask of v6 under c2 is just the second polygon
        root = res.manifest_path.parent
        rec = next(r for r in cats["c2"] if r["id"] == "15_c2")
        expected = np.zeros((6, 6), dtype=bool)
        expected[4:6, 0:3] = True
        assert np.array_equal(read_mask(root / rec["mask"]).labels, expected)

    def test_deviation_report_structure(self, tmp_path):
        train_json, val_json = _mini_fixture(tmp_path)
        assignment = SplitAssignment(0, frozenset({1, 2}), frozenset({3, 4}))
        res = build_split(parse_coco(train_json), parse_coco(val_json), assignment, tmp_path / "o3")
        report = deviation_report([res])
        assert report["matches"] is False  # mini fixture != real counts
        assert report["splits"][0]["built"]["train"] == 2


class TestStatistics:
    def test_single_region_bin_placement(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[0, 0:2] = True  # 2% of the image
        report = statistics_from_masks([BinaryMask(mask)])
        assert report.single_region_area_hist[0] == 1  # (0, 0.02] bin
        assert report.fraction_regions_within_2pct == 1.0
        assert report.fraction_images_within_10pct == 1.0

    def test_matches_recompute_oracle(self):
        rng = np.random.default_rng(33)
        masks = []
        for _ in range(50):
            m = rng.random((12, 12)) > 0.8
            if not m.any():
                m[0, 0] = True
            masks.append(BinaryMask(m))
        report = statistics_from_masks(masks)
        total_regions = sum(report.regions_per_image_hist)
        assert total_regions == 50  # every image contributes one count
        assert sum(report.image_area_hist) == 50
        areas = [float(m.labels.mean()) for m in masks]
        assert report.fraction_images_within_10pct == pytest.approx(
            np.mean([a <= 0.10 for a in areas])
        )

    def test_stats_from_built_split(self, tmp_path):
        train_json, val_json = _mini_fixture(tmp_path)
        assignment = SplitAssignment(0, frozenset({1, 2}), frozenset({3, 4}))
        res = build_split(parse_coco(train_json), parse_coco(val_json), assignment, tmp_path / "o4")
        report = dataset_statistics(res.manifest_path)
        assert report.image_count == 4
