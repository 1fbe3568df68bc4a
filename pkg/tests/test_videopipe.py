"""Streaming annotation pipeline: sources, resampling, composition geometry,
binary formats, fault tolerance, and single vs pipelined equivalence."""

import io
import json

import numpy as np
import pytest

from stoneseg.nnet.checkpoint import Checkpoint
from stoneseg.nnet.model import ModelConfig, build_model
from stoneseg.synthdata import SceneSpec, generate_video
from stoneseg.videopipe import (
    SEPARATOR_WIDTH,
    ArraySource,
    DirectorySource,
    FrameFormatError,
    PipeSource,
    annotate_stream,
    bench_throughput,
    compose_panel,
    heat_colormap,
    letterbox,
    read_pmap,
    resample_frames,
    run_annotation,
    save_frame_dir,
    write_pipe_frames,
    write_pmap,
)


def gray_frames(n, h=32, w=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 256, size=(h, w), dtype=np.uint8) for _ in range(n)]


def small_ckpt():
    cfg = ModelConfig(block_kind="plain", depth=1, base_channels=2)
    return Checkpoint(config=cfg, parameters=build_model(cfg, seed=0),
                      input_size=(16, 16))


class TestArraySource:
    def test_default_timestamps_follow_fps(self):
        src = ArraySource(gray_frames(3), fps_nominal=10.0)
        assert src.timestamps_ms == [0.0, 100.0, 200.0]
        assert len(src) == 3

    def test_iteration_pairs_frames_and_stamps(self):
        frames = gray_frames(2)
        src = ArraySource(frames, [5, 9])
        got = list(src)
        assert np.array_equal(got[0][0], frames[0]) and got[0][1] == 5
        assert got[1][1] == 9

    def test_empty_rejected(self):
        with pytest.raises(FrameFormatError):
            ArraySource([])

    def test_timestamp_count_mismatch(self):
        with pytest.raises(FrameFormatError):
            ArraySource(gray_frames(2), [0])

    def test_decreasing_timestamps_rejected(self):
        with pytest.raises(FrameFormatError):
            ArraySource(gray_frames(2), [10, 5])

    def test_mixed_sizes_rejected(self):
        frames = [np.zeros((8, 8), np.uint8), np.zeros((9, 8), np.uint8)]
        with pytest.raises(FrameFormatError):
            ArraySource(frames)


class TestDirectorySource:
    def test_roundtrip(self, tmp_path):
        frames = gray_frames(3)
        save_frame_dir(tmp_path / "v", frames, [0, 50, 100], fps_nominal=20.0)
        src = DirectorySource(tmp_path / "v")
        assert len(src) == 3
        got = list(src)
        assert got[0][1] == 0 and got[2][1] == 100
        # DirectorySource promotes gray PNGs to RGB
        assert got[1][0].shape == (32, 32, 3)
        assert np.array_equal(got[1][0][..., 0], frames[1])

    def test_missing_index_rejected(self, tmp_path):
        (tmp_path / "v").mkdir()
        with pytest.raises(FrameFormatError):
            DirectorySource(tmp_path / "v")


class TestPipeSource:
    def test_roundtrip(self):
        frames = gray_frames(2, h=6, w=5)
        buf = io.BytesIO()
        write_pipe_frames(buf, frames, [100, 150])
        buf.seek(0)
        got = list(PipeSource(buf))
        assert len(got) == 2
        assert got[0][0].shape == (6, 5, 3)
        assert np.array_equal(got[0][0][..., 1], frames[0])
        assert got[1][1] == 150.0

    def test_bad_magic(self):
        buf = io.BytesIO(b"XXXX" + bytes(20))
        with pytest.raises(FrameFormatError):
            list(PipeSource(buf))

    def test_truncated_payload(self):
        buf = io.BytesIO()
        write_pipe_frames(buf, gray_frames(1, h=4, w=4), [0])
        data = buf.getvalue()
        with pytest.raises(FrameFormatError):
            list(PipeSource(io.BytesIO(data[:-5])))

    def test_size_change_rejected(self):
        buf = io.BytesIO()
        write_pipe_frames(buf, [np.zeros((4, 4), np.uint8)], [0])
        write_pipe_frames(buf, [np.zeros((5, 4), np.uint8)], [50])
        buf.seek(0)
        with pytest.raises(FrameFormatError):
            list(PipeSource(buf))


class TestResample:
    def test_downsample_60_to_20(self):
        frames = gray_frames(60)
        src = ArraySource(frames, [i * 1000.0 / 60.0 for i in range(60)])
        out = resample_frames(src, target_fps=20.0)
        assert len(out) == 20
        for k in range(20):
            assert np.array_equal(out.frames[k], frames[3 * k]), k

    def test_identity_at_matching_fps(self):
        frames = gray_frames(10)
        src = ArraySource(frames, [i * 50.0 for i in range(10)])
        out = resample_frames(src, target_fps=20.0)
        assert len(out) == 10
        for k in range(10):
            assert np.array_equal(out.frames[k], frames[k])

    def test_irregular_timestamps_snap_to_nearest(self):
        frames = gray_frames(5)
        src = ArraySource(frames, [0.0, 30.0, 80.0, 100.0, 150.0])
        out = resample_frames(src, target_fps=20.0)  # ticks at 0,50,100,150
        assert len(out) == 4
        want = [0, 1, 3, 4]  # tick 50: |30-50|=20 < |80-50|=30
        for k, idx in enumerate(want):
            assert np.array_equal(out.frames[k], frames[idx]), k

    def test_tie_prefers_earlier_frame(self):
        frames = gray_frames(3)
        src = ArraySource(frames, [0.0, 25.0, 75.0])
        out = resample_frames(src, target_fps=20.0)  # tick 50 equidistant to 25/75
        assert np.array_equal(out.frames[1], frames[1])

    def test_output_carries_tick_timeline(self):
        src = ArraySource(gray_frames(60), [i * 1000.0 / 60.0 for i in range(60)])
        out = resample_frames(src, target_fps=20.0)
        assert out.timestamps_ms == [k * 50.0 for k in range(20)]


class TestComposition:
    def test_heat_anchors(self):
        heat = heat_colormap(np.array([[0.0, 0.5, 1.0]]))
        assert heat[0, 0].tolist() == [0, 0, 255]
        assert heat[0, 1].tolist() == [127, 0, 127]
        assert heat[0, 2].tolist() == [255, 0, 0]

    def test_heat_clips_out_of_range(self):
        heat = heat_colormap(np.array([[-0.5, 1.5]]))
        assert heat[0, 0].tolist() == [0, 0, 255]
        assert heat[0, 1].tolist() == [255, 0, 0]

    def test_four_panel_width(self):
        h, w = 16, 64
        img = np.zeros((h, w), np.uint8)
        mask = np.zeros((h, w), np.uint8)
        heat = np.zeros((h, w, 3), np.uint8)
        panel = compose_panel(img, mask, mask, heat)
        assert panel.shape == (h, 4 * w + 3 * SEPARATOR_WIDTH, 3)

    def test_three_panel_width_without_gt(self):
        h, w = 16, 64
        img = np.zeros((h, w), np.uint8)
        panel = compose_panel(img, None, np.zeros((h, w), np.uint8),
                              np.zeros((h, w, 3), np.uint8))
        assert panel.shape == (h, 3 * w + 2 * SEPARATOR_WIDTH, 3)

    def test_separators_are_white(self):
        h, w = 4, 8
        panel = compose_panel(np.zeros((h, w), np.uint8), None,
                              np.zeros((h, w), np.uint8),
                              np.zeros((h, w, 3), np.uint8))
        assert (panel[:, w : w + SEPARATOR_WIDTH] == 255).all()

    def test_mask_rendered_full_white(self):
        h, w = 4, 4
        mask = np.eye(4, dtype=np.uint8)
        panel = compose_panel(np.zeros((h, w), np.uint8), None, mask,
                              np.zeros((h, w, 3), np.uint8))
        pred_tile = panel[:, w + SEPARATOR_WIDTH : 2 * w + SEPARATOR_WIDTH]
        assert (pred_tile[mask == 1] == 255).all()
        assert (pred_tile[mask == 0] == 0).all()

    def test_size_mismatch_rejected(self):
        with pytest.raises(FrameFormatError):
            compose_panel(np.zeros((4, 4), np.uint8), None,
                          np.zeros((4, 5), np.uint8),
                          np.zeros((4, 4, 3), np.uint8))


class TestLetterbox:
    def test_square_to_square_fills(self):
        img = np.arange(64, dtype=np.uint8).reshape(8, 8)
        out, (top, left, ch, cw) = letterbox(img, 16, 16)
        assert out.shape == (16, 16)
        assert (top, left, ch, cw) == (0, 0, 16, 16)

    def test_wide_input_gets_vertical_bars(self):
        img = np.full((8, 16), 200, np.uint8)
        out, (top, left, ch, cw) = letterbox(img, 16, 16)
        assert (ch, cw) == (8, 16)
        assert top == 4 and left == 0
        assert (out[:4] == 0).all() and (out[12:] == 0).all()
        assert (out[4:12] == 200).all()

    def test_tall_input_gets_horizontal_bars(self):
        img = np.full((16, 8), 90, np.uint8)
        out, (top, left, ch, cw) = letterbox(img, 16, 16)
        assert (ch, cw) == (16, 8)
        assert left == 4
        assert (out[:, :4] == 0).all() and (out[:, 12:] == 0).all()


class TestPmap:
    def test_roundtrip(self, tmp_path):
        prob = np.random.default_rng(0).random((6, 9)).astype(np.float32)
        p = tmp_path / "x.pmap"
        write_pmap(p, prob)
        assert np.array_equal(read_pmap(p), prob)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.pmap"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(FrameFormatError):
            read_pmap(p)

    def test_truncation(self, tmp_path):
        p = tmp_path / "x.pmap"
        write_pmap(p, np.zeros((4, 4), np.float32))
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FrameFormatError):
            read_pmap(p)

    def test_non_2d_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_pmap(tmp_path / "x.pmap", np.zeros((2, 2, 2), np.float32))


def scene_source(n_frames=8, size=32, seed=4):
    spec = SceneSpec(seed=seed, image_size=size, stone_radius=(3.0, 5.0))
    scene = generate_video(spec, 0, n_frames)
    return ArraySource(list(scene.frames)), list(scene.masks)


class TestAnnotateStream:
    def test_order_count_and_shapes(self):
        src, masks = scene_source()
        ckpt = small_ckpt()
        results = list(annotate_stream(ckpt, src, gt=masks))
        assert [r.index for r in results] == list(range(8))
        for r in results:
            assert r.error is None
            assert r.prob.shape == (32, 32)
            assert r.panel.shape == (32, 4 * 32 + 3 * SEPARATOR_WIDTH, 3)
            assert set(r.timings) == {"preprocess", "inference", "compose"}

    def test_without_gt_three_tiles(self):
        src, _ = scene_source()
        results = list(annotate_stream(small_ckpt(), src))
        assert results[0].panel.shape == (32, 3 * 32 + 2 * SEPARATOR_WIDTH, 3)

    def test_per_frame_error_keeps_streaming(self):
        src, _ = scene_source()
        calls = {"n": 0}

        def flaky(x):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("synthetic fault")
            return x[0, 0]

        results = list(annotate_stream(None, src, input_size=(32, 32), infer_fn=flaky))
        assert len(results) == 8
        bad = [r for r in results if r.error]
        assert len(bad) == 1
        assert bad[0].index == 2
        assert "synthetic fault" in bad[0].error
        assert (bad[0].panel == 0).all()
        assert bad[0].prob.max() == 0.0

    def test_pipelined_bitwise_identical_to_inline(self):
        src_a, masks = scene_source()
        src_b, _ = scene_source()
        ckpt = small_ckpt()
        inline = list(annotate_stream(ckpt, src_a, gt=masks, pipelined=False))
        piped = list(annotate_stream(ckpt, src_b, gt=masks, pipelined=True))
        assert len(inline) == len(piped) == 8
        for a, b in zip(inline, piped):
            assert a.index == b.index
            assert np.array_equal(a.panel, b.panel)
            assert np.array_equal(a.prob, b.prob)
            assert a.error == b.error

    def test_uncroppable_frame_falls_back_to_full_frame(self):
        # all-black frames defeat the auto-crop; the pipeline must not error
        frames = [np.zeros((32, 32), np.uint8) for _ in range(3)]
        results = list(annotate_stream(small_ckpt(), ArraySource(frames)))
        assert all(r.error is None for r in results)


class TestRunAnnotation:
    def test_report_fields_and_callback(self):
        src, masks = scene_source()
        seen = []
        results, report = run_annotation(small_ckpt(), src, gt=masks,
                                         on_panel=lambda r: seen.append(r.index))
        assert seen == list(range(8))
        assert report["n_frames"] == 8
        assert report["mean_fps"] > 0
        assert report["errors"] == []
        assert not report["pipelined"]
        assert set(report["stage_ms"]) == {"preprocess", "inference", "compose"}
        assert report["mean_latency_ms"] > 0
        assert report["p95_latency_ms"] >= report["median_latency_ms"] >= 0

    def test_errors_surface_in_report(self):
        src, _ = scene_source(n_frames=4)

        def broken(x):
            raise ValueError("dead model")

        _, report = run_annotation(None, src, input_size=(32, 32), infer_fn=broken)
        assert len(report["errors"]) == 4
        assert report["errors"][0]["index"] == 0
        assert "dead model" in report["errors"][0]["message"]


class TestBench:
    def test_identity_floor_runs(self):
        report = bench_throughput(None, frame_size=32, n_frames=30)
        assert report["n_frames"] == 30
        assert report["mean_fps"] > 0
        assert report["errors"] == []

    def test_rejects_short_runs(self):
        with pytest.raises(ValueError):
            bench_throughput(None, frame_size=32, n_frames=10)

    def test_model_bench_runs(self):
        report = bench_throughput(small_ckpt(), frame_size=32, n_frames=30)
        assert report["n_frames"] == 30
        assert report["errors"] == []
