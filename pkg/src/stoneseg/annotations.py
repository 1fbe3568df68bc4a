"""Polygon annotation documents, mask rasterization, and dataset splits.

The annotation JSON schema (one document may carry many images):

    {"images": [{"name": "<frame file>", "width": W, "height": H,
                 "annotations": [{"label": "stone", "points": [[x, y], ...]}]}]}

Masks on disk are 8-bit grayscale, 0 = background / 255 = stone; in memory
they are uint8 arrays of {0, 1}.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = [
    "Polygon",
    "AnnotationDoc",
    "DatasetIndex",
    "IndexEntry",
    "AnnotationParseError",
    "AnnotationSchemaError",
    "parse_annotations",
    "rasterize_polygon",
    "rasterize_polygons",
    "split_dataset",
    "frame_rel_path",
    "mask_rel_path",
]


class AnnotationParseError(Exception):
    """Annotation document is not well-formed JSON."""


class AnnotationSchemaError(Exception):
    """Well-formed JSON that violates the annotation schema."""


@dataclass(frozen=True)
class Polygon:
    label: str
    vertices: tuple  # ((x, y), ...) sub-pixel coordinates

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise AnnotationSchemaError(
                f"polygon '{self.label}' has {len(self.vertices)} vertices, need >= 3"
            )


@dataclass(frozen=True)
class AnnotationDoc:
    image_name: str
    image_width: int
    image_height: int
    polygons: tuple

    def __post_init__(self):
        if not self.image_name:
            raise AnnotationSchemaError("empty image name")
        if self.image_width < 1 or self.image_height < 1:
            raise AnnotationSchemaError(
                f"bad image size {self.image_width}x{self.image_height}"
            )


def parse_annotations(text: str) -> list:
    """Parse an annotation JSON document into AnnotationDoc records.

    Malformed JSON raises AnnotationParseError carrying the byte offset;
    missing fields or under-sized polygons raise AnnotationSchemaError
    naming the offending field / image.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise AnnotationParseError(f"invalid JSON at byte offset {e.pos}: {e.msg}") from e

    if not isinstance(data, dict) or "images" not in data:
        raise AnnotationSchemaError("missing required field 'images'")
    docs = []
    for entry in data["images"]:
        for key in ("name", "width", "height", "annotations"):
            if key not in entry:
                raise AnnotationSchemaError(f"image entry missing required field '{key}'")
        polys = []
        for ann in entry["annotations"]:
            for key in ("label", "points"):
                if key not in ann:
                    raise AnnotationSchemaError(
                        f"annotation in '{entry['name']}' missing required field '{key}'"
                    )
            try:
                pts = tuple((float(x), float(y)) for x, y in ann["points"])
            except (TypeError, ValueError) as e:
                raise AnnotationSchemaError(
                    f"bad point in '{entry['name']}': {e}"
                ) from e
            if len(pts) < 3:
                raise AnnotationSchemaError(
                    f"rejected polygon in '{entry['name']}': "
                    f"{len(pts)} vertices, need >= 3"
                )
            polys.append(Polygon(ann["label"], pts))
        docs.append(
            AnnotationDoc(entry["name"], int(entry["width"]), int(entry["height"]), tuple(polys))
        )
    return docs


def rasterize_polygon(vertices, width: int, height: int) -> np.ndarray:
    """Scanline even-odd rasterization of one polygon at pixel centers.

    A pixel (row i, col j) is set iff its center (j + 0.5, i + 0.5) lies
    inside the polygon.  Boundary ties follow the half-open rule: left/top
    edges inclusive, right/bottom exclusive, implemented by counting edge
    crossings at x <= center over edges spanning min_y <= y < max_y.
    Vertices are clamped into [0, width] x [0, height] first.
    """
    vx = np.clip([v[0] for v in vertices], 0.0, float(width))
    vy = np.clip([v[1] for v in vertices], 0.0, float(height))
    n = len(vx)
    mask = np.zeros((height, width), dtype=np.uint8)

    lo_row = max(0, int(math.floor(vy.min() - 0.5)))
    hi_row = min(height - 1, int(math.ceil(vy.max())))
    for i in range(lo_row, hi_row + 1):
        py = i + 0.5
        xs = []
        for k in range(n):
            x1, y1 = vx[k], vy[k]
            x2, y2 = vx[(k + 1) % n], vy[(k + 1) % n]
            if y1 == y2:
                continue
            if (y1 <= py < y2) or (y2 <= py < y1):
                xs.append(x1 + (py - y1) * (x2 - x1) / (y2 - y1))
        if not xs:
            continue
        xs.sort()
        for k in range(0, len(xs) - 1, 2):
            j0 = max(0, math.ceil(xs[k] - 0.5))
            j1 = min(width, math.ceil(xs[k + 1] - 0.5))
            if j1 > j0:
                mask[i, j0:j1] = 1
    return mask


def rasterize_polygons(doc: AnnotationDoc) -> np.ndarray:
    """Union of all of the document's polygons as a {0, 1} mask."""
    mask = np.zeros((doc.image_height, doc.image_width), dtype=np.uint8)
    for poly in doc.polygons:
        mask |= rasterize_polygon(poly.vertices, doc.image_width, doc.image_height)
    return mask


class IndexEntry(NamedTuple):
    video_id: str
    frame_path: str
    mask_path: str
    split: str


def frame_rel_path(video_id: str, k: int) -> str:
    return f"frames/{video_id}/frame_{k:06d}.png"


def mask_rel_path(video_id: str, k: int) -> str:
    return f"masks/{video_id}/frame_{k:06d}.png"


@dataclass(frozen=True)
class DatasetIndex:
    """Frame-level index with a per-video train/test split."""

    entries: tuple
    seed: int

    def split_entries(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def video_ids(self, split=None) -> list:
        seen = []
        for e in self.entries:
            if (split is None or e.split == split) and e.video_id not in seen:
                seen.append(e.video_id)
        return seen

    def to_json(self) -> str:
        return json.dumps(
            {"entries": [list(e) for e in self.entries], "seed": self.seed}
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetIndex":
        data = json.loads(text)
        return cls(tuple(IndexEntry(*e) for e in data["entries"]), int(data["seed"]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path) -> "DatasetIndex":
        with open(path) as f:
            return cls.from_json(f.read())


def split_dataset(videos, fraction: float, seed: int) -> DatasetIndex:
    """Assign whole videos to train/test with a seeded uniform shuffle.

    ``videos`` is a list of (video_id, frame_count).  The test set holds
    round(fraction * n_videos) videos (half-up), minimum 1; every frame of
    a video inherits its video's split, so no frames leak across.
    """
    if len(videos) < 2:
        raise ValueError(f"need >= 2 videos to hold out a test set, got {len(videos)}")
    if not 0.1 <= fraction <= 0.2:
        raise ValueError(f"test fraction {fraction} outside [0.1, 0.2]")
    n_test = max(1, int(math.floor(fraction * len(videos) + 0.5)))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(videos))
    test_ids = {videos[i][0] for i in order[:n_test]}
    entries = []
    for video_id, n_frames in videos:
        split = "test" if video_id in test_ids else "train"
        for k in range(n_frames):
            entries.append(
                IndexEntry(video_id, frame_rel_path(video_id, k), mask_rel_path(video_id, k), split)
            )
    return DatasetIndex(tuple(entries), seed)
