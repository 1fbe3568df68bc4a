"""Synthetic scene generator: determinism, exact ground truth, challenge
isolation, and the on-disk dataset layout."""

import json

import numpy as np
import pytest

from stoneseg import imgio
from stoneseg.annotations import rasterize_polygon
from stoneseg.synthdata import (
    CHALLENGES,
    DRIFT_MAX,
    DRIFT_STEP,
    SceneSpec,
    SceneSpecError,
    generate_dataset,
    generate_video,
    normalize_challenges,
    save_dataset,
)

SPEC = SceneSpec(seed=3, image_size=48, stone_radius=(4.0, 7.0))


class TestSpecValidation:
    def test_defaults_are_valid(self):
        SceneSpec()

    def test_rejects_negative_seed(self):
        with pytest.raises(SceneSpecError):
            SceneSpec(seed=-1)

    def test_rejects_tiny_image(self):
        with pytest.raises(SceneSpecError):
            SceneSpec(image_size=8)

    def test_rejects_stone_bigger_than_fov(self):
        with pytest.raises(SceneSpecError, match="field of view"):
            SceneSpec(image_size=16, stone_radius=(7.0, 7.0))

    def test_rejects_stone_that_cannot_drift(self):
        # fits statically but not with drift headroom
        with pytest.raises(SceneSpecError, match="drift"):
            SceneSpec(image_size=32, stone_radius=(5.0, 9.0))

    def test_rejects_unknown_challenge(self):
        with pytest.raises(SceneSpecError):
            SceneSpec(challenges=frozenset({"rain"}))

    def test_rejects_bad_ranges(self):
        with pytest.raises(SceneSpecError):
            SceneSpec(stone_count=(3, 1))
        with pytest.raises(SceneSpecError):
            SceneSpec(stone_radius=(0.0, 4.0))
        with pytest.raises(SceneSpecError):
            SceneSpec(fov_fraction=0.0)

    def test_fov_radius_property(self):
        spec = SceneSpec(image_size=64, fov_fraction=0.5, stone_radius=(3.0, 4.0))
        assert spec.fov_radius == 16.0


class TestNormalizeChallenges:
    def test_aliases(self):
        got = normalize_challenges(["blur", "foreign", "saline"])
        assert got == frozenset({"motion_blur", "foreign_object", "saline_flash"})
        assert normalize_challenges(["flash"]) == frozenset({"saline_flash"})

    def test_full_names_pass_through(self):
        assert normalize_challenges(CHALLENGES) == frozenset(CHALLENGES)

    def test_unknown_rejected(self):
        with pytest.raises(SceneSpecError):
            normalize_challenges(["fog"])


class TestGenerateVideo:
    def test_shapes_and_dtypes(self):
        scene = generate_video(SPEC, 0, 5)
        assert scene.frames.shape == (5, 48, 48)
        assert scene.masks.shape == (5, 48, 48)
        assert scene.frames.dtype == np.uint8
        assert scene.masks.dtype == np.uint8
        assert set(np.unique(scene.masks)) <= {0, 1}
        assert len(scene.polygons) == 5

    def test_bitwise_deterministic(self):
        a = generate_video(SPEC, 2, 6)
        b = generate_video(SPEC, 2, 6)
        assert np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.masks, b.masks)

    def test_videos_differ(self):
        a = generate_video(SPEC, 0, 3)
        b = generate_video(SPEC, 1, 3)
        assert not np.array_equal(a.frames, b.frames)

    def test_masks_match_polygon_rasterization(self):
        scene = generate_video(SPEC, 1, 4)
        for t in range(4):
            ref = np.zeros((48, 48), dtype=np.uint8)
            for verts in scene.polygons[t]:
                ref |= rasterize_polygon(verts, 48, 48)
            assert np.array_equal(scene.masks[t], ref), f"frame {t}"

    def test_challenges_change_frames_not_masks(self):
        # 40 frames so the probabilistic flash challenge fires at least once
        clean = generate_video(SPEC, 0, 40)
        for ch in CHALLENGES:
            spiked = generate_video(
                SceneSpec(seed=3, image_size=48, stone_radius=(4.0, 7.0),
                          challenges=frozenset({ch})),
                0, 40,
            )
            assert np.array_equal(clean.masks, spiked.masks), ch
            assert not np.array_equal(clean.frames, spiked.frames), ch

    def test_zero_stones_yield_empty_masks(self):
        spec = SceneSpec(seed=1, image_size=32, stone_count=(0, 0),
                         stone_radius=(3.0, 5.0))
        scene = generate_video(spec, 0, 3)
        assert scene.masks.sum() == 0
        assert scene.frames.max() > 0  # background still rendered

    def test_stones_stay_inside_fov(self):
        for vid in range(4):
            scene = generate_video(SPEC, vid, 10)
            size = SPEC.image_size
            c = size / 2.0
            jj, ii = np.meshgrid(np.arange(size) + 0.5 - c, np.arange(size) + 0.5 - c)
            outside = ii * ii + jj * jj > SPEC.fov_radius ** 2
            assert not (scene.masks & outside).any(), f"video {vid}"

    def test_outside_fov_is_black(self):
        scene = generate_video(SPEC, 0, 3)
        size = SPEC.image_size
        c = size / 2.0
        jj, ii = np.meshgrid(np.arange(size) + 0.5 - c, np.arange(size) + 0.5 - c)
        outside = ii * ii + jj * jj > SPEC.fov_radius ** 2
        assert scene.frames[0][outside].max() == 0

    def test_drift_is_bounded_per_frame(self):
        # the mask centroid moves at most DRIFT_STEP per axis per frame
        # (plus sub-pixel rasterization wobble)
        scene = generate_video(SPEC, 3, 12)
        cents = []
        for t in range(12):
            idx = np.argwhere(scene.masks[t])
            if len(idx):
                cents.append(idx.mean(axis=0))
        for a, b in zip(cents, cents[1:]):
            assert np.abs(b - a).max() <= DRIFT_STEP + 0.75

    def test_total_drift_is_bounded(self):
        scene = generate_video(SPEC, 3, 30)
        cents = np.array([np.argwhere(m).mean(axis=0) for m in scene.masks])
        span = cents.max(axis=0) - cents.min(axis=0)
        assert (span <= 2 * DRIFT_MAX + 1.5).all()

    def test_rejects_zero_frames(self):
        with pytest.raises(SceneSpecError):
            generate_video(SPEC, 0, 0)

    def test_flash_brightens_some_frames(self):
        spec = SceneSpec(seed=9, image_size=48, stone_radius=(4.0, 7.0),
                         challenges=frozenset({"saline_flash"}))
        clean = generate_video(SceneSpec(seed=9, image_size=48, stone_radius=(4.0, 7.0)), 0, 40)
        flashed = generate_video(spec, 0, 40)
        per_frame_delta = flashed.frames.astype(int).mean(axis=(1, 2)) - \
            clean.frames.astype(int).mean(axis=(1, 2))
        assert (per_frame_delta > 5).any()       # some frames surge
        assert (np.abs(per_frame_delta) < 1e-9).sum() > 20  # most stay put


class TestDataset:
    def test_layout_and_index(self):
        frames, masks, index = generate_dataset(SPEC, 3, 4)
        assert sorted(frames) == ["vid000", "vid001", "vid002"]
        assert all(f.shape == (4, 48, 48) for f in frames.values())
        assert len(index.entries) == 12
        assert all(e.split == "train" for e in index.entries)
        assert index.seed == SPEC.seed

    def test_save_roundtrip(self, tmp_path):
        frames, masks, index = generate_dataset(SPEC, 2, 3)
        save_dataset(frames, masks, index, tmp_path, fps_nominal=20.0)

        loaded = json.loads((tmp_path / "index.json").read_text())
        assert len(loaded["entries"]) == 6

        for e in index.entries:
            k = int(e.frame_path[-10:-4])
            assert np.array_equal(imgio.read_gray(tmp_path / e.frame_path),
                                  frames[e.video_id][k])
            assert np.array_equal(imgio.read_mask(tmp_path / e.mask_path),
                                  masks[e.video_id][k])

    def test_per_video_timing_index(self, tmp_path):
        frames, masks, index = generate_dataset(SPEC, 1, 5)
        save_dataset(frames, masks, index, tmp_path, fps_nominal=25.0)
        timing = json.loads((tmp_path / "frames" / "vid000" / "index.json").read_text())
        assert timing["fps_nominal"] == 25.0
        assert timing["timestamps_ms"] == [0, 40, 80, 120, 160]

    def test_saved_bytes_reproducible(self, tmp_path):
        for sub in ("a", "b"):
            frames, masks, index = generate_dataset(SPEC, 1, 2)
            save_dataset(frames, masks, index, tmp_path / sub)
        for rel in ("index.json", "frames/vid000/frame_000000.png",
                    "masks/vid000/frame_000001.png", "frames/vid000/index.json"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_rejects_zero_videos(self):
        with pytest.raises(SceneSpecError):
            generate_dataset(SPEC, 0, 3)
