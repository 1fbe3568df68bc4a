"""Deterministic endoscope-like scene generator with exact ground truth.

Each video is a fixed scene observed by a slowly drifting camera: bright
irregular stones over a darker textured field, inside a circular field of
view on black.  Stones are star-convex polygons (radius modulated by a
small harmonic series), and every mask is produced by rasterizing those
same polygons, so ground truth is exact by construction.

Challenge conditions alter frames only, never masks:
  motion_blur     box blur along a per-frame random vector
  debris          small bright specks that are not stones
  foreign_object  a straight bright line through the scene
  saline_flash    a global brightness surge on random frames
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import imgio
from .annotations import DatasetIndex, IndexEntry, frame_rel_path, mask_rel_path, rasterize_polygon

__all__ = [
    "SceneSpec",
    "SceneSpecError",
    "VideoScene",
    "CHALLENGES",
    "normalize_challenges",
    "generate_video",
    "generate_dataset",
    "save_dataset",
]

CHALLENGES = ("motion_blur", "debris", "foreign_object", "saline_flash")

_ALIASES = {
    "blur": "motion_blur",
    "foreign": "foreign_object",
    "saline": "saline_flash",
    "flash": "saline_flash",
}

RADIAL_PERTURB = 0.3     # stone radius swings by +-30 percent around its base
STONE_VERTICES = 24
DRIFT_MAX = 4.0          # camera offset never leaves [-DRIFT_MAX, DRIFT_MAX] px
DRIFT_STEP = 1.0         # per-axis per-frame walk step bound, px
PLACEMENT_MARGIN = 2.0
BACKGROUND_LEVEL = 60.0
BLUR_TAPS = 5
FLASH_GAIN = 1.3
FLASH_OFFSET = 10.0
FLASH_PROBABILITY = 0.12


class SceneSpecError(ValueError):
    """The scene parameters cannot produce a valid video."""


def normalize_challenges(names) -> frozenset:
    out = set()
    for raw in names:
        name = _ALIASES.get(raw.strip(), raw.strip())
        if name not in CHALLENGES:
            raise SceneSpecError(f"unknown challenge '{raw}' (choose from {CHALLENGES})")
        out.add(name)
    return frozenset(out)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    image_size: int = 64
    stone_count: tuple = (1, 3)
    stone_radius: tuple = (5.0, 9.0)
    texture_amplitude: float = 12.0
    fov_fraction: float = 0.92
    challenges: frozenset = frozenset()

    def __post_init__(self):
        if self.seed < 0:
            raise SceneSpecError("seed must be non-negative")
        if self.image_size < 16:
            raise SceneSpecError("image_size must be at least 16")
        lo, hi = self.stone_count
        if lo < 0 or hi < lo:
            raise SceneSpecError(f"bad stone_count range {self.stone_count}")
        r_lo, r_hi = self.stone_radius
        if r_lo <= 0 or r_hi < r_lo:
            raise SceneSpecError(f"bad stone_radius range {self.stone_radius}")
        if self.texture_amplitude < 0:
            raise SceneSpecError("texture_amplitude must be non-negative")
        if not 0 < self.fov_fraction <= 1:
            raise SceneSpecError("fov_fraction must be in (0, 1]")
        bad = set(self.challenges) - set(CHALLENGES)
        if bad:
            raise SceneSpecError(f"unknown challenges {sorted(bad)}")
        max_extent = (1 + RADIAL_PERTURB) * r_hi
        if max_extent >= self.fov_radius:
            raise SceneSpecError(
                f"stone radius up to {max_extent:.1f} px does not fit the "
                f"{self.fov_radius:.1f} px field of view"
            )
        if max_extent + DRIFT_MAX + PLACEMENT_MARGIN >= self.fov_radius:
            raise SceneSpecError(
                "stones cannot stay inside the field of view across camera drift; "
                "shrink stone_radius or grow image_size"
            )

    @property
    def fov_radius(self) -> float:
        return self.fov_fraction * self.image_size / 2.0


@dataclass
class VideoScene:
    """One rendered video: frames, exact masks, and the polygons (image
    coordinates, one list per frame) the masks were rasterized from."""
    frames: np.ndarray        # (T, H, W) uint8
    masks: np.ndarray         # (T, H, W) uint8 in {0, 1}
    polygons: list


def _disk_point(rng, max_radius):
    r = max_radius * math.sqrt(rng.uniform())
    a = rng.uniform(0.0, 2.0 * math.pi)
    return r * math.cos(a), r * math.sin(a)


def _stone_outline(rng, spec):
    """Base radius, center (scene coords), brightness, and the radius
    modulation harmonics of one stone."""
    r0 = rng.uniform(*spec.stone_radius)
    reach = (1 + RADIAL_PERTURB) * r0 + DRIFT_MAX + PLACEMENT_MARGIN
    cx, cy = _disk_point(rng, spec.fov_radius - reach)
    amps = rng.uniform(0.2, 1.0, size=3)
    amps /= amps.sum()
    phases = rng.uniform(0.0, 2.0 * math.pi, size=3)
    brightness = rng.uniform(170.0, 210.0)
    return {"r0": r0, "center": (cx, cy), "amps": amps, "phases": phases,
            "brightness": brightness}


def _stone_vertices(stone, offset):
    """Polygon vertices in image coordinates for a camera offset, relative
    to the scene origin placed at the image center."""
    theta = np.linspace(0.0, 2.0 * math.pi, STONE_VERTICES, endpoint=False)
    noise = np.zeros_like(theta)
    for k in range(3):
        noise += stone["amps"][k] * np.cos((k + 2) * theta + stone["phases"][k])
    radius = stone["r0"] * (1.0 + RADIAL_PERTURB * noise)
    cx, cy = stone["center"]
    x = cx + radius * np.cos(theta) - offset[0]
    y = cy + radius * np.sin(theta) - offset[1]
    return np.stack([x, y], axis=1)


def _drift_offsets(rng, n_frames):
    steps = rng.uniform(-DRIFT_STEP, DRIFT_STEP, size=(n_frames, 2))
    offsets = np.zeros((n_frames, 2))
    pos = np.zeros(2)
    for t in range(n_frames):
        pos = np.clip(pos + steps[t], -DRIFT_MAX, DRIFT_MAX)
        offsets[t] = pos
    return offsets


def _box_blur(frame, angle):
    taps = []
    for k in range(-(BLUR_TAPS // 2), BLUR_TAPS // 2 + 1):
        di = int(round(k * math.sin(angle)))
        dj = int(round(k * math.cos(angle)))
        ii = np.clip(np.arange(frame.shape[0]) - di, 0, frame.shape[0] - 1)
        jj = np.clip(np.arange(frame.shape[1]) - dj, 0, frame.shape[1] - 1)
        taps.append(frame[np.ix_(ii, jj)])
    return np.mean(taps, axis=0)


def generate_video(spec: SceneSpec, video_index: int, n_frames: int) -> VideoScene:
    """Render one drifting-camera video.  Deterministic in (spec, index)."""
    if n_frames < 1:
        raise SceneSpecError("n_frames must be >= 1")
    # separate streams so challenge flags cannot perturb scene geometry:
    # the same seed yields the same stones and drift with challenges on or off
    rng = np.random.default_rng([spec.seed, video_index, 0])
    crng = np.random.default_rng([spec.seed, video_index, 1])
    size = spec.image_size
    center = size / 2.0

    n_stones = int(rng.integers(spec.stone_count[0], spec.stone_count[1] + 1))
    stones = [_stone_outline(rng, spec) for _ in range(n_stones)]

    # smooth background texture, fixed to the scene so it drifts with it
    freqs = rng.uniform(0.04, 0.16, size=(4, 2)) * rng.choice([-1.0, 1.0], size=(4, 2))
    tex_phases = rng.uniform(0.0, 2.0 * math.pi, size=4)
    tex_weights = rng.uniform(0.5, 1.0, size=4)
    tex_weights /= tex_weights.sum()

    offsets = _drift_offsets(rng, n_frames)

    debris = []
    if "debris" in spec.challenges:
        for _ in range(int(crng.integers(3, 9))):
            pos = _disk_point(crng, spec.fov_radius - DRIFT_MAX - 3.0)
            debris.append((pos, crng.uniform(0.8, 1.6), crng.uniform(210.0, 240.0)))

    line = None
    if "foreign_object" in spec.challenges:
        p0 = _disk_point(crng, spec.fov_radius * 0.5)
        line = (p0, crng.uniform(0.0, 2.0 * math.pi), 235.0)

    flash = (crng.random(n_frames) < FLASH_PROBABILITY) \
        if "saline_flash" in spec.challenges else np.zeros(n_frames, bool)
    blur_angles = crng.uniform(0.0, 2.0 * math.pi, size=n_frames) \
        if "motion_blur" in spec.challenges else None

    jj, ii = np.meshgrid(np.arange(size) + 0.5 - center,
                         np.arange(size) + 0.5 - center)
    fov_mask = ii * ii + jj * jj <= spec.fov_radius ** 2
    vignette = 1.0 - 0.25 * (ii * ii + jj * jj) / spec.fov_radius ** 2

    frames = np.zeros((n_frames, size, size), dtype=np.uint8)
    masks = np.zeros((n_frames, size, size), dtype=np.uint8)
    polygons = []

    for t in range(n_frames):
        dx, dy = offsets[t]
        wx, wy = jj + dx, ii + dy  # scene coordinates of pixel centers
        tex = np.zeros_like(wx)
        for k in range(4):
            tex += tex_weights[k] * np.sin(freqs[k, 0] * wx + freqs[k, 1] * wy + tex_phases[k])
        frame = (BACKGROUND_LEVEL + spec.texture_amplitude * tex) * vignette

        frame_polys = []
        mask = np.zeros((size, size), dtype=np.uint8)
        for stone in stones:
            verts = _stone_vertices(stone, (dx, dy)) + center
            frame_polys.append(verts)
            m = rasterize_polygon(verts, size, size)
            shade = stone["brightness"] + 6.0 * np.sin(0.5 * wx) * np.cos(0.5 * wy)
            frame = np.where(m.astype(bool), shade, frame)
            mask |= m

        for (px, py), radius, bright in debris:
            d2 = (wx - px) ** 2 + (wy - py) ** 2
            frame = np.where(d2 <= radius * radius, bright, frame)

        if line is not None:
            (px, py), angle, bright = line
            ux, uy = math.cos(angle), math.sin(angle)
            along = (wx - px) * ux + (wy - py) * uy
            across = -(wx - px) * uy + (wy - py) * ux
            hit = (np.abs(across) <= 1.2) & (np.abs(along) <= spec.fov_radius * 2)
            frame = np.where(hit, bright, frame)

        frame = np.where(fov_mask, frame, 0.0)
        if blur_angles is not None:
            frame = _box_blur(frame, blur_angles[t])
        if flash[t]:
            frame = frame * FLASH_GAIN + FLASH_OFFSET

        frames[t] = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
        masks[t] = mask
        polygons.append(frame_polys)

    return VideoScene(frames=frames, masks=masks, polygons=polygons)


def _video_id(i: int) -> str:
    return f"vid{i:03d}"


def generate_dataset(spec: SceneSpec, n_videos: int, frames_per_video: int):
    """Render a dataset: ({video_id: frames}, {video_id: masks}, DatasetIndex).

    All entries come back split "train"; split assignment is a separate
    step so sources stay interchangeable.
    """
    if n_videos < 1:
        raise SceneSpecError("n_videos must be >= 1")
    frames = {}
    masks = {}
    entries = []
    for v in range(n_videos):
        vid = _video_id(v)
        scene = generate_video(spec, v, frames_per_video)
        frames[vid] = scene.frames
        masks[vid] = scene.masks
        for k in range(frames_per_video):
            entries.append(IndexEntry(vid, frame_rel_path(vid, k), mask_rel_path(vid, k), "train"))
    return frames, masks, DatasetIndex(tuple(entries), spec.seed)


def save_dataset(frames: dict, masks: dict, index: DatasetIndex, root,
                 fps_nominal: float = 20.0) -> None:
    """Write the PNG frame/mask layout plus index.json under root.

    Each video's frame directory also gets its own timing index so it can
    be streamed directly as a frame source."""
    import json
    import os

    for e in index.entries:
        k = int(e.frame_path[-10:-4])
        frame_file = os.path.join(root, e.frame_path)
        mask_file = os.path.join(root, e.mask_path)
        imgio.ensure_dir(os.path.dirname(frame_file))
        imgio.ensure_dir(os.path.dirname(mask_file))
        imgio.write_image(frame_file, frames[e.video_id][k])
        imgio.write_mask(mask_file, masks[e.video_id][k])
    period = 1000.0 / fps_nominal
    for vid, arr in frames.items():
        timing = {"fps_nominal": fps_nominal,
                  "timestamps_ms": [int(round(k * period)) for k in range(len(arr))]}
        with open(os.path.join(root, "frames", vid, "index.json"), "w") as f:
            json.dump(timing, f)
    index.save(os.path.join(root, "index.json"))
