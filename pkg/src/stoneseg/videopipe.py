"""Streaming video annotation: sources, resampling, inference, panels.

Frames flow through three stages: preprocess (auto-crop, letterbox resize
to the model input), inference (probability map), compose (un-crop the
prediction, build the side-by-side panel).  The stages either run inline
on one thread or as a pipeline of threads joined by bounded in-order
queues; both modes produce bitwise-identical panels.

Sources
  directory   frame_%06d.png plus index.json {"fps_nominal", "timestamps_ms"}
  raw pipe    per frame: magic FRM0, u32 width, u32 height, u64 timestamp_ms,
              then width*height*3 RGB bytes (integers little-endian)
  in-memory   any array sequence with timestamps

Heat maps use a fixed blue-to-red map: p=0 -> (0,0,255), p=1 -> (255,0,0),
channelwise floor(255*p) red and floor(255*(1-p)) blue, green 0.  Raw
probability maps export as: magic PMAP, u32 width, u32 height, f32 LE
row-major.
"""

from __future__ import annotations

import json
import math
import os
import queue
import struct
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from . import imgio
from .imaging import UncroppableFrameError, auto_crop_box, to_grayscale
from .nnet.checkpoint import Checkpoint
from .nnet.model import forward, predict_mask

__all__ = [
    "ArraySource",
    "DirectorySource",
    "PipeSource",
    "FrameFormatError",
    "resample_frames",
    "heat_colormap",
    "compose_panel",
    "letterbox",
    "annotate_stream",
    "run_annotation",
    "bench_throughput",
    "write_pipe_frames",
    "write_pmap",
    "read_pmap",
    "save_frame_dir",
]

SEPARATOR_WIDTH = 2
QUEUE_DEPTH = 4
PIPE_MAGIC = b"FRM0"
PMAP_MAGIC = b"PMAP"


class FrameFormatError(Exception):
    """A frame source violated its format contract."""


class ArraySource:
    """In-memory frames (each (H,W) gray or (H,W,3) RGB uint8) with
    millisecond timestamps."""

    def __init__(self, frames, timestamps_ms=None, fps_nominal=20.0):
        self.frames = list(frames)
        if not self.frames:
            raise FrameFormatError("empty frame source")
        if timestamps_ms is None:
            timestamps_ms = [1000.0 * i / fps_nominal for i in range(len(self.frames))]
        self.timestamps_ms = list(timestamps_ms)
        self.fps_nominal = fps_nominal
        if len(self.timestamps_ms) != len(self.frames):
            raise FrameFormatError("one timestamp per frame required")
        if any(b < a for a, b in zip(self.timestamps_ms, self.timestamps_ms[1:])):
            raise FrameFormatError("timestamps must be non-decreasing")
        first = self.frames[0].shape
        if any(f.shape != first for f in self.frames):
            raise FrameFormatError("frames must share one size")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(zip(self.frames, self.timestamps_ms))


class DirectorySource:
    """Numbered PNG frames plus an index.json timing file."""

    def __init__(self, path):
        self.path = path
        index_file = os.path.join(path, "index.json")
        try:
            with open(index_file) as f:
                index = json.load(f)
        except FileNotFoundError:
            raise FrameFormatError(f"missing {index_file}")
        self.timestamps_ms = list(index["timestamps_ms"])
        self.fps_nominal = float(index.get("fps_nominal", 20.0))
        if any(b < a for a, b in zip(self.timestamps_ms, self.timestamps_ms[1:])):
            raise FrameFormatError("timestamps must be non-decreasing")

    def __len__(self):
        return len(self.timestamps_ms)

    def __iter__(self):
        shape = None
        for i, ts in enumerate(self.timestamps_ms):
            frame = imgio.read_rgb(os.path.join(self.path, f"frame_{i:06d}.png"))
            if shape is None:
                shape = frame.shape
            elif frame.shape != shape:
                raise FrameFormatError(f"frame {i} size {frame.shape} != {shape}")
            yield frame, ts


class PipeSource:
    """Length-prefixed raw RGB frames from a binary stream."""

    def __init__(self, fileobj):
        self.fileobj = fileobj

    def _exactly(self, n):
        data = self.fileobj.read(n)
        if len(data) != n:
            raise FrameFormatError(f"pipe truncated: wanted {n} bytes, got {len(data)}")
        return data

    def __iter__(self):
        shape = None
        while True:
            head = self.fileobj.read(4)
            if not head:
                return
            if head != PIPE_MAGIC:
                raise FrameFormatError(f"bad frame magic {head!r}")
            w, h = struct.unpack("<II", self._exactly(8))
            (ts,) = struct.unpack("<Q", self._exactly(8))
            frame = np.frombuffer(self._exactly(w * h * 3), dtype=np.uint8).reshape(h, w, 3)
            if shape is None:
                shape = frame.shape
            elif frame.shape != shape:
                raise FrameFormatError(f"pipe frame size changed {shape} -> {frame.shape}")
            yield frame, float(ts)


def write_pipe_frames(fileobj, frames, timestamps_ms) -> None:
    for frame, ts in zip(frames, timestamps_ms):
        rgb = _as_rgb(np.asarray(frame))
        h, w = rgb.shape[:2]
        fileobj.write(PIPE_MAGIC)
        fileobj.write(struct.pack("<IIQ", w, h, int(ts)))
        fileobj.write(rgb.tobytes())


def save_frame_dir(path, frames, timestamps_ms, fps_nominal=20.0) -> None:
    imgio.ensure_dir(path)
    for i, frame in enumerate(frames):
        imgio.write_image(os.path.join(path, f"frame_{i:06d}.png"), frame)
    with open(os.path.join(path, "index.json"), "w") as f:
        json.dump({"fps_nominal": fps_nominal,
                   "timestamps_ms": [int(t) for t in timestamps_ms]}, f)


def resample_frames(src, target_fps: float = 20.0) -> ArraySource:
    """Pick, for each tick of a 1/target_fps grid starting at the first
    timestamp, the source frame with the nearest timestamp (earlier frame
    wins ties).  The resampled timeline carries the tick times."""
    frames = []
    stamps = []
    for frame, ts in src:
        frames.append(frame)
        stamps.append(ts)
    if not frames:
        raise FrameFormatError("empty frame source")
    period = 1000.0 / target_fps
    ticks = []
    t = stamps[0]
    while t <= stamps[-1] + 1e-9:
        ticks.append(t)
        t = stamps[0] + period * len(ticks)
    out = []
    j = 0
    for tick in ticks:
        while j + 1 < len(stamps) and abs(stamps[j + 1] - tick) < abs(stamps[j] - tick):
            j += 1
        out.append(frames[j])
    return ArraySource(out, ticks, fps_nominal=target_fps)


def heat_colormap(prob: np.ndarray) -> np.ndarray:
    """(H,W) probabilities -> (H,W,3) uint8, blue at 0 through red at 1."""
    p = np.clip(np.asarray(prob, dtype=np.float64), 0.0, 1.0)
    out = np.zeros(p.shape + (3,), dtype=np.uint8)
    out[..., 0] = np.floor(255.0 * p).astype(np.uint8)
    out[..., 2] = np.floor(255.0 * (1.0 - p)).astype(np.uint8)
    return out


def _as_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        return np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim == 3 and img.shape[2] == 3:
        return img
    raise FrameFormatError(f"expected (H,W) or (H,W,3), got {img.shape}")


def compose_panel(input_img, gt, pred, heat) -> np.ndarray:
    """Horizontal concatenation input | gt? | pred | heat with 2 px white
    separators.  Masks are rendered white on black; all panels must share
    the input's height and width."""
    panels = [_as_rgb(input_img)]
    if gt is not None:
        panels.append(_as_rgb(np.asarray(gt, dtype=np.uint8) * 255))
    panels.append(_as_rgb(np.asarray(pred, dtype=np.uint8) * 255))
    panels.append(_as_rgb(heat))
    h, w = panels[0].shape[:2]
    for p in panels[1:]:
        if p.shape[:2] != (h, w):
            raise FrameFormatError(f"panel size {p.shape[:2]} != {(h, w)}")
    sep = np.full((h, SEPARATOR_WIDTH, 3), 255, dtype=np.uint8)
    joined = []
    for i, p in enumerate(panels):
        if i:
            joined.append(sep)
        joined.append(p)
    return np.concatenate(joined, axis=1)


def letterbox(img: np.ndarray, out_h: int, out_w: int):
    """Bilinear-resize into (out_h, out_w) preserving aspect, black bars on
    the short side.  Returns (resized, placement) where placement =
    (top, left, content_h, content_w) for inverting the mapping."""
    h, w = img.shape[:2]
    scale = min(out_h / h, out_w / w)
    ch = max(1, min(out_h, int(round(h * scale))))
    cw = max(1, min(out_w, int(round(w * scale))))
    resized = np.asarray(Image.fromarray(img).resize((cw, ch), Image.BILINEAR))
    top = (out_h - ch) // 2
    left = (out_w - cw) // 2
    canvas_shape = (out_h, out_w) + img.shape[2:]
    canvas = np.zeros(canvas_shape, dtype=img.dtype)
    canvas[top:top + ch, left:left + cw] = resized
    return canvas, (top, left, ch, cw)


def _nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = arr.shape[:2]
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(int)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(int)
    return arr[rows][:, cols]


@dataclass
class PanelResult:
    index: int
    panel: np.ndarray
    prob: np.ndarray            # full-frame probability map
    timings: dict               # stage -> seconds
    error: Optional[str] = None


def _model_input_size(ckpt: Checkpoint, frame_shape):
    if ckpt.input_size:
        return tuple(ckpt.input_size)
    div = 2 ** ckpt.config.depth
    h = frame_shape[0] // div * div
    w = frame_shape[1] // div * div
    if h < div or w < div:
        raise FrameFormatError(
            f"frame {frame_shape[:2]} too small for a depth-{ckpt.config.depth} model"
        )
    return h, w


def _preprocess(frame, in_h, in_w):
    """Auto-crop to the dominant bright region, letterbox into the model
    input size.  Returns the network input and the geometry needed to map
    the prediction back onto the frame."""
    gray = to_grayscale(frame) if frame.ndim == 3 else frame
    try:
        box = auto_crop_box(gray)
        x0, y0, cw, ch = box.x0, box.y0, box.w, box.h
    except UncroppableFrameError:
        x0, y0, cw, ch = 0, 0, gray.shape[1], gray.shape[0]  # whole frame
    crop = gray[y0:y0 + ch, x0:x0 + cw]
    boxed, placement = letterbox(crop, in_h, in_w)
    x = boxed.astype(np.float32)[None, None] / 255.0
    return x, (x0, y0, cw, ch), placement


def _unmap_prob(prob, frame_shape, crop_box, placement):
    """Probability map at model scale -> full-frame map (zero outside the
    crop), inverting the letterbox with nearest-neighbor scaling."""
    x0, y0, cw, ch = crop_box
    top, left, content_h, content_w = placement
    content = prob[top:top + content_h, left:left + content_w]
    full = np.zeros(frame_shape[:2], dtype=prob.dtype)
    full[y0:y0 + ch, x0:x0 + cw] = _nearest_resize(content, ch, cw)
    return full


def _checkpoint_infer(ckpt):
    return lambda x: forward(ckpt.config, ckpt.parameters, x, check_finite=False)[0, 0]


def _compose(frame, gt_mask, full_prob):
    pred = predict_mask(full_prob)
    heat = heat_colormap(full_prob)
    return compose_panel(frame, gt_mask, pred, heat)


def annotate_stream(ckpt: Checkpoint, src, gt=None, pipelined: bool = False,
                    input_size=None, infer_fn=None):
    """Generator of PanelResult, one per source frame, in source order.

    ``gt`` is an optional sequence of {0,1} masks matching the source
    frames; when given, panels carry four tiles instead of three.  A frame
    that fails preprocessing or inference yields a black panel and an
    error note instead of halting the stream.  ``infer_fn`` overrides the
    checkpoint's network (used by identity benchmarks).
    """
    if infer_fn is None:
        infer_fn = _checkpoint_infer(ckpt)
    if input_size is None and ckpt is not None and ckpt.input_size:
        input_size = tuple(ckpt.input_size)
    stream = _pipelined_results if pipelined else _inline_results
    return stream(ckpt, src, gt, input_size, infer_fn)


def _frame_jobs(src, gt):
    gt_list = None if gt is None else list(gt)
    for i, (frame, ts) in enumerate(src):
        mask = None if gt_list is None else gt_list[i]
        yield i, frame, mask


def _black_panel(frame, has_gt):
    h, w = frame.shape[:2]
    n = 4 if has_gt else 3
    width = n * w + (n - 1) * SEPARATOR_WIDTH
    return np.zeros((h, width, 3), dtype=np.uint8)


def _inline_results(ckpt, src, gt, input_size, infer_fn):
    size = None
    for i, frame, mask in _frame_jobs(src, gt):
        if size is None:
            size = input_size or _model_input_size(ckpt, frame.shape)
        timings = {}
        try:
            t0 = time.perf_counter()
            x, crop_box, placement = _preprocess(frame, *size)
            t1 = time.perf_counter()
            prob = infer_fn(x)
            t2 = time.perf_counter()
            full_prob = _unmap_prob(prob, frame.shape, crop_box, placement)
            panel = _compose(frame, mask, full_prob)
            t3 = time.perf_counter()
            timings = {"preprocess": t1 - t0, "inference": t2 - t1, "compose": t3 - t2}
            yield PanelResult(i, panel, full_prob, timings)
        except Exception as e:  # per-frame fault tolerance
            yield PanelResult(i, _black_panel(frame, gt is not None),
                              np.zeros(frame.shape[:2], dtype=np.float32),
                              timings, error=f"{type(e).__name__}: {e}")


def _pipelined_results(ckpt, src, gt, input_size, infer_fn):
    """Same computation split across preprocess / infer / compose threads
    with bounded in-order queues."""
    q_pre = queue.Queue(maxsize=QUEUE_DEPTH)
    q_inf = queue.Queue(maxsize=QUEUE_DEPTH)
    q_out = queue.Queue(maxsize=QUEUE_DEPTH)
    DONE = object()

    def stage_preprocess():
        size = None
        try:
            for i, frame, mask in _frame_jobs(src, gt):
                if size is None:
                    size = input_size or _model_input_size(ckpt, frame.shape)
                t0 = time.perf_counter()
                try:
                    prepped = _preprocess(frame, *size)
                except Exception as e:
                    q_pre.put((i, frame, mask, None, None, f"{type(e).__name__}: {e}"))
                    continue
                q_pre.put((i, frame, mask, prepped, time.perf_counter() - t0, None))
        finally:
            q_pre.put(DONE)

    def stage_infer():
        try:
            while True:
                item = q_pre.get()
                if item is DONE:
                    return
                i, frame, mask, prepped, dt_pre, err = item
                if err:
                    q_inf.put((i, frame, mask, None, None, None, None, err))
                    continue
                x, crop_box, placement = prepped
                t0 = time.perf_counter()
                try:
                    prob = infer_fn(x)
                except Exception as e:
                    q_inf.put((i, frame, mask, None, None, None, None,
                               f"{type(e).__name__}: {e}"))
                    continue
                q_inf.put((i, frame, mask, (prob, crop_box, placement),
                           dt_pre, time.perf_counter() - t0, None, None))
        finally:
            q_inf.put(DONE)

    def stage_compose():
        try:
            while True:
                item = q_inf.get()
                if item is DONE:
                    return
                i, frame, mask, inferred, dt_pre, dt_inf, _, err = item
                if err:
                    q_out.put(PanelResult(i, _black_panel(frame, gt is not None),
                                          np.zeros(frame.shape[:2], dtype=np.float32),
                                          {}, error=err))
                    continue
                prob, crop_box, placement = inferred
                t0 = time.perf_counter()
                try:
                    full_prob = _unmap_prob(prob, frame.shape, crop_box, placement)
                    panel = _compose(frame, mask, full_prob)
                except Exception as e:
                    q_out.put(PanelResult(i, _black_panel(frame, gt is not None),
                                          np.zeros(frame.shape[:2], dtype=np.float32),
                                          {}, error=f"{type(e).__name__}: {e}"))
                    continue
                q_out.put(PanelResult(i, panel, full_prob,
                                      {"preprocess": dt_pre, "inference": dt_inf,
                                       "compose": time.perf_counter() - t0}))
        finally:
            q_out.put(DONE)

    threads = [threading.Thread(target=f, daemon=True)
               for f in (stage_preprocess, stage_infer, stage_compose)]
    for t in threads:
        t.start()
    while True:
        item = q_out.get()
        if item is DONE:
            break
        yield item
    for t in threads:
        t.join()


def _percentile(values, q):
    if not values:
        return 0.0
    return float(np.percentile(values, q))


def run_annotation(ckpt: Checkpoint, src, gt=None, pipelined: bool = False,
                   input_size=None, infer_fn=None, on_panel=None):
    """Drive annotate_stream to completion.

    ``on_panel(result)`` is called per frame as it emerges (bounded
    memory); panels are also collected and returned.  Returns (results,
    fps_report)."""
    results = []
    wall0 = time.perf_counter()
    for res in annotate_stream(ckpt, src, gt=gt, pipelined=pipelined,
                               input_size=input_size, infer_fn=infer_fn):
        if on_panel:
            on_panel(res)
        results.append(res)
    wall = time.perf_counter() - wall0

    lat = [sum(r.timings.values()) for r in results if r.timings]
    report = {
        "n_frames": len(results),
        "total_s": wall,
        "mean_fps": len(results) / wall if wall > 0 else math.inf,
        "mean_latency_ms": 1000.0 * float(np.mean(lat)) if lat else 0.0,
        "median_latency_ms": 1000.0 * _percentile(lat, 50),
        "p95_latency_ms": 1000.0 * _percentile(lat, 95),
        "stage_ms": {
            stage: 1000.0 * float(np.mean([r.timings[stage] for r in results if r.timings]))
            if lat else 0.0
            for stage in ("preprocess", "inference", "compose")
        },
        "pipelined": pipelined,
        "errors": [{"index": r.index, "message": r.error}
                   for r in results if r.error],
    }
    return results, report


def bench_throughput(ckpt, frame_size: int, n_frames: int, pipelined: bool = False,
                     seed: int = 0) -> dict:
    """Throughput on a synthetic video of n_frames at frame_size square.
    Pass ckpt=None to benchmark an identity "model" that echoes its input
    (the pipeline floor: preprocessing and composition alone)."""
    if n_frames < 30:
        raise ValueError("need at least 30 frames for a stable estimate")
    from .synthdata import SceneSpec, generate_video

    radius = (frame_size / 64.0 * 5.0, frame_size / 64.0 * 9.0)
    spec = SceneSpec(seed=seed, image_size=frame_size, stone_radius=radius)
    scene = generate_video(spec, 0, min(n_frames, 60))
    frames = [scene.frames[i % len(scene.frames)] for i in range(n_frames)]
    src = ArraySource(frames, fps_nominal=20.0)

    if ckpt is None:
        _, report = run_annotation(None, src, pipelined=pipelined,
                                   input_size=(frame_size, frame_size),
                                   infer_fn=lambda x: x[0, 0])
    else:
        _, report = run_annotation(ckpt, src, pipelined=pipelined)
    return report


def write_pmap(path, prob: np.ndarray) -> None:
    """Raw probability export: PMAP magic, u32 width, u32 height, f32 LE."""
    p = np.asarray(prob, dtype="<f4")
    if p.ndim != 2:
        raise ValueError(f"probability map must be 2-D, got {p.shape}")
    with open(path, "wb") as f:
        f.write(PMAP_MAGIC)
        f.write(struct.pack("<II", p.shape[1], p.shape[0]))
        f.write(np.ascontiguousarray(p).tobytes())


def read_pmap(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != PMAP_MAGIC:
        raise FrameFormatError(f"not a probability map: magic {data[:4]!r}")
    w, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 4 * w * h:
        raise FrameFormatError("probability map truncated")
    return np.frombuffer(data[12:], dtype="<f4").reshape(h, w).copy()
