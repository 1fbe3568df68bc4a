"""Annotation parsing, polygon rasterization, dataset index and split."""

import json

import numpy as np
import pytest

from stoneseg.annotations import (
    AnnotationParseError,
    AnnotationSchemaError,
    DatasetIndex,
    IndexEntry,
    frame_rel_path,
    mask_rel_path,
    parse_annotations,
    rasterize_polygon,
    rasterize_polygons,
    split_dataset,
)


def inside_even_odd(x, y, verts):
    """Crossing-count oracle with the matching half-open tie rules: edges
    span min_y <= y < max_y vertically, and parity counts crossings at
    xc <= x, which makes a span left-inclusive / right-exclusive."""
    n = len(verts)
    crossings = 0
    for k in range(n):
        x0, y0 = verts[k]
        x1, y1 = verts[(k + 1) % n]
        if y0 == y1:
            continue
        if (y0 <= y < y1) or (y1 <= y < y0):
            xc = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
            if xc <= x:
                crossings += 1
    return crossings % 2 == 1


def rasterize_oracle(verts, width, height):
    vx = np.clip([v[0] for v in verts], 0.0, float(width))
    vy = np.clip([v[1] for v in verts], 0.0, float(height))
    clamped = list(zip(vx, vy))
    m = np.zeros((height, width), dtype=np.uint8)
    for i in range(height):
        for j in range(width):
            if inside_even_odd(j + 0.5, i + 0.5, clamped):
                m[i, j] = 1
    return m


def doc_json(polygons, name="frame_000000.png", w=32, h=32):
    return json.dumps(
        {
            "images": [
                {
                    "name": name,
                    "width": w,
                    "height": h,
                    "annotations": [{"label": "stone", "points": v} for v in polygons],
                }
            ]
        }
    )


class TestParsing:
    def test_minimal_document(self):
        (doc,) = parse_annotations(doc_json([[[1, 1], [5, 1], [3, 4]]]))
        assert doc.image_name == "frame_000000.png"
        assert (doc.image_width, doc.image_height) == (32, 32)
        assert len(doc.polygons) == 1
        assert doc.polygons[0].label == "stone"
        assert doc.polygons[0].vertices == ((1.0, 1.0), (5.0, 1.0), (3.0, 4.0))

    def test_multiple_images(self):
        raw = json.dumps(
            {
                "images": [
                    {"name": "a.png", "width": 8, "height": 8, "annotations": []},
                    {"name": "b.png", "width": 9, "height": 7, "annotations": []},
                ]
            }
        )
        docs = parse_annotations(raw)
        assert [d.image_name for d in docs] == ["a.png", "b.png"]

    def test_bad_json_reports_offset(self):
        with pytest.raises(AnnotationParseError) as e:
            parse_annotations('{"images": }')
        assert "offset" in str(e.value)

    def test_missing_images_field(self):
        with pytest.raises(AnnotationSchemaError) as e:
            parse_annotations(json.dumps({"frames": []}))
        assert "images" in str(e.value)

    def test_missing_image_field(self):
        raw = json.dumps({"images": [{"name": "x.png", "width": 8, "annotations": []}]})
        with pytest.raises(AnnotationSchemaError) as e:
            parse_annotations(raw)
        assert "height" in str(e.value)

    def test_too_few_vertices(self):
        with pytest.raises(AnnotationSchemaError) as e:
            parse_annotations(doc_json([[[0, 0], [4, 4]]]))
        assert "2 vertices" in str(e.value)

    def test_non_numeric_point(self):
        with pytest.raises(AnnotationSchemaError):
            parse_annotations(doc_json([[[0, 0], [4, 0], ["x", 4]]]))

    def test_bad_dimensions(self):
        raw = json.dumps(
            {"images": [{"name": "x.png", "width": 0, "height": 8, "annotations": []}]}
        )
        with pytest.raises(AnnotationSchemaError):
            parse_annotations(raw)


class TestRasterize:
    def test_axis_aligned_square(self):
        verts = ((2.0, 2.0), (6.0, 2.0), (6.0, 6.0), (2.0, 6.0))
        m = rasterize_polygon(verts, 8, 8)
        ref = np.zeros((8, 8), dtype=np.uint8)
        ref[2:6, 2:6] = 1
        assert (m == ref).all()

    def test_matches_oracle_on_random_polygons(self):
        rng = np.random.default_rng(100)
        for trial in range(40):
            n = int(rng.integers(3, 13))
            verts = tuple(
                (float(rng.uniform(0, 20)), float(rng.uniform(0, 20)))
                for _ in range(n)
            )
            got = rasterize_polygon(verts, 20, 20)
            ref = rasterize_oracle(verts, 20, 20)
            assert (got == ref).all(), f"trial {trial}: {verts}"

    def test_integer_grid_polygons(self):
        # vertices on the pixel lattice press hardest on tie handling
        rng = np.random.default_rng(101)
        for trial in range(30):
            n = int(rng.integers(3, 9))
            verts = tuple(
                (float(rng.integers(0, 12)), float(rng.integers(0, 12)))
                for _ in range(n)
            )
            got = rasterize_polygon(verts, 12, 12)
            ref = rasterize_oracle(verts, 12, 12)
            assert (got == ref).all(), f"trial {trial}: {verts}"

    def test_polygon_outside_canvas_clipped(self):
        verts = ((-5.0, -5.0), (3.0, -5.0), (3.0, 3.0), (-5.0, 3.0))
        m = rasterize_polygon(verts, 6, 6)
        assert m.sum() == 9
        assert (m[:3, :3] == 1).all()

    def test_document_union(self):
        (doc,) = parse_annotations(
            doc_json(
                [[[0, 0], [4, 0], [4, 4], [0, 4]], [[2, 2], [7, 2], [7, 7], [2, 7]]],
                w=8,
                h=8,
            )
        )
        m = rasterize_polygons(doc)
        a = rasterize_polygon(doc.polygons[0].vertices, 8, 8)
        b = rasterize_polygon(doc.polygons[1].vertices, 8, 8)
        assert (m == (a | b)).all()

    def test_empty_document_blank_mask(self):
        (doc,) = parse_annotations(doc_json([], w=5, h=4))
        m = rasterize_polygons(doc)
        assert m.shape == (4, 5)
        assert m.sum() == 0


class TestIndex:
    def _index(self):
        entries = tuple(
            IndexEntry("vid000", frame_rel_path("vid000", i), mask_rel_path("vid000", i), "train")
            for i in range(3)
        ) + tuple(
            IndexEntry("vid001", frame_rel_path("vid001", i), mask_rel_path("vid001", i), "test")
            for i in range(2)
        )
        return DatasetIndex(entries=entries, seed=5)

    def test_rel_path_layout(self):
        assert frame_rel_path("vid007", 3) == "frames/vid007/frame_000003.png"
        assert mask_rel_path("vid007", 3) == "masks/vid007/frame_000003.png"

    def test_json_roundtrip(self, tmp_path):
        idx = self._index()
        p = tmp_path / "index.json"
        idx.save(p)
        assert DatasetIndex.load(p) == idx

    def test_split_filter_and_video_ids(self):
        idx = self._index()
        assert len(idx.split_entries("train")) == 3
        assert len(idx.split_entries("test")) == 2
        assert idx.video_ids() == ["vid000", "vid001"]
        assert idx.video_ids("test") == ["vid001"]


class TestSplit:
    def _videos(self, n, frames=4):
        return [(f"vid{i:03d}", frames) for i in range(n)]

    def test_partition_is_exact(self):
        idx = split_dataset(self._videos(10), 0.2, seed=3)
        train_ids = set(idx.video_ids("train"))
        test_ids = set(idx.video_ids("test"))
        assert train_ids | test_ids == {f"vid{i:03d}" for i in range(10)}
        assert train_ids & test_ids == set()
        assert len(test_ids) == 2
        assert len(idx.entries) == 40

    def test_rounding_and_floor_of_one(self):
        for n, frac, want in ((10, 0.15, 2), (3, 0.1, 1), (7, 0.2, 1), (20, 0.17, 3)):
            idx = split_dataset(self._videos(n), frac, seed=0)
            assert len(idx.video_ids("test")) == want, (n, frac)

    def test_no_frame_level_leakage(self):
        idx = split_dataset(self._videos(8, frames=5), 0.2, seed=1)
        by_vid = {}
        for e in idx.entries:
            by_vid.setdefault(e.video_id, set()).add(e.split)
        assert all(len(splits) == 1 for splits in by_vid.values())

    def test_every_frame_indexed_in_order(self):
        idx = split_dataset(self._videos(4, frames=3), 0.2, seed=2)
        for vid in idx.video_ids():
            frames = [e.frame_path for e in idx.entries if e.video_id == vid]
            assert frames == [frame_rel_path(vid, k) for k in range(3)]

    def test_deterministic_in_seed(self):
        a = split_dataset(self._videos(12), 0.2, seed=9)
        b = split_dataset(self._videos(12), 0.2, seed=9)
        assert a == b
        c = split_dataset(self._videos(12), 0.2, seed=10)
        assert set(c.video_ids("test")) != set(a.video_ids("test")) or c != a

    def test_fraction_bounds_enforced(self):
        with pytest.raises(ValueError):
            split_dataset(self._videos(10), 0.05, seed=0)
        with pytest.raises(ValueError):
            split_dataset(self._videos(10), 0.25, seed=0)

    def test_needs_two_videos(self):
        with pytest.raises(ValueError):
            split_dataset(self._videos(1), 0.2, seed=0)
