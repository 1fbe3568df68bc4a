"""Frame preprocessing: grayscale conversion, Otsu thresholding, contour
extraction and automatic cropping of endoscopic frames.

Images are plain numpy arrays: RGB frames are uint8 with shape (H, W, 3),
grayscale frames uint8 (H, W), binary masks uint8 (H, W) with values in {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

__all__ = [
    "Contour",
    "Rect",
    "OtsuResult",
    "UncroppableFrameError",
    "to_grayscale",
    "otsu_threshold",
    "binarize",
    "find_contours",
    "auto_crop",
]

# BT.601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])

# 8-connectivity structuring element for component labeling.
_CONN8 = np.ones((3, 3), dtype=bool)


class UncroppableFrameError(Exception):
    """No foreground contour could be found in the frame."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle: top-left corner plus extents."""

    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"degenerate rect {self.w}x{self.h}")


@dataclass(frozen=True)
class Contour:
    """Outer boundary of one 8-connected foreground component.

    ``points`` are lattice (pixel-corner) coordinates (x, y) tracing the
    closed boundary; consecutive points are one unit apart and the last
    point is adjacent to the first.  ``area`` is the shoelace area enclosed
    by the loop (component pixels plus any interior holes).  ``pixel_count``
    is the number of foreground pixels in the component itself.
    """

    points: tuple
    area: float
    pixel_count: int

    def bounding_box(self) -> Rect:
        xs = [p[0] for p in self.points]
        ys = [p[1] for p in self.points]
        return Rect(min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys))


class OtsuResult(NamedTuple):
    threshold: int
    degenerate: bool


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Convert an RGB frame to 8-bit grayscale (BT.601 weights, rounded).
    Already-gray (H, W) input passes through as uint8."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8, copy=False)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB image, got shape {img.shape}")
    gray = img.astype(np.float64) @ _LUMA
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def otsu_threshold(img: np.ndarray) -> OtsuResult:
    """Global threshold maximizing between-class variance over the 256-bin
    histogram.

    Classes are {pixel <= t} vs {pixel > t}.  The comparison is carried out
    in exact integer arithmetic so ties are broken to the smallest t without
    any floating-point ambiguity.  A single-intensity image is degenerate:
    the result is that intensity minus one (clamped at 0) with the
    ``degenerate`` flag set.
    """
    img = np.asarray(img)
    if img.size == 0:
        raise ValueError("empty image")
    hist = np.bincount(img.ravel().astype(np.int64), minlength=256)
    nonzero = np.nonzero(hist)[0]
    if len(nonzero) == 1:
        v = int(nonzero[0])
        return OtsuResult(max(v - 1, 0), True)

    # Cumulative pixel counts / intensity sums; python ints from here on so
    # the squared cross term cannot overflow.
    w0 = np.cumsum(hist).tolist()
    s0 = np.cumsum(hist * np.arange(256, dtype=np.int64)).tolist()
    n, s = w0[255], s0[255]

    best_t = 0
    best_num, best_den = 0, 1  # between-class variance as exact fraction
    for t in range(256):
        w0t = w0[t]
        w1t = n - w0t
        if w0t == 0 or w1t == 0:
            continue
        a = s0[t] * w1t - (s - s0[t]) * w0t
        num = a * a
        den = w0t * w1t
        # num/den > best_num/best_den, cross-multiplied (dens positive)
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return OtsuResult(best_t, False)


def binarize(gray: np.ndarray, threshold: int) -> np.ndarray:
    """Foreground mask: pixels strictly brighter than the threshold."""
    return (np.asarray(gray) > threshold).astype(np.uint8)


# Crack-boundary tracing.  The boundary walks pixel-corner lattice vertices
# keeping the component on its right; diagonal (8-connected) contacts are
# crossed rather than split.  Direction encoding: 0=+x, 1=+y, 2=-x, 3=-y.
_STEP = ((1, 0), (0, 1), (-1, 0), (0, -1))


def _trace_boundary(mask, start_row, start_col):
    """Trace the outer crack boundary of the component containing the
    topmost-leftmost pixel (start_row, start_col).  ``mask`` must be binary
    and contain only this component (use a padded per-component submask)."""
    h, w = mask.shape

    def fg(r, c):
        return 0 <= r < h and 0 <= c < w and mask[r, c]

    points = []
    x, y = start_col, start_row
    d = 0  # entering along the top edge, component below
    start_state = (x, y, d)
    while True:
        # pixels ahead-left / ahead-right of the current heading
        if d == 0:
            al, ar = fg(y - 1, x), fg(y, x)
        elif d == 1:
            al, ar = fg(y, x), fg(y, x - 1)
        elif d == 2:
            al, ar = fg(y, x - 1), fg(y - 1, x - 1)
        else:
            al, ar = fg(y - 1, x - 1), fg(y - 1, x)
        if ar and not al:
            nd = d
        elif ar and al:
            nd = (d + 3) % 4  # turn left
        elif not ar and not al:
            nd = (d + 1) % 4  # turn right
        else:
            nd = (d + 3) % 4  # diagonal pinch: cross it (8-connectivity)
        if points and (x, y, nd) == start_state:
            break
        points.append((x, y))
        dx, dy = _STEP[nd]
        x, y, d = x + dx, y + dy, nd
        if len(points) > 4 * (h + 2) * (w + 2):  # safety net, unreachable
            raise RuntimeError("boundary trace failed to close")
    return points


def _shoelace(points) -> float:
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    return float(abs(np.dot(xs, np.roll(ys, -1)) - np.dot(np.roll(xs, -1), ys)) / 2.0)


def find_contours(mask: np.ndarray) -> list:
    """Outer boundary contour of every 8-connected foreground component,
    in scan order.  Empty mask yields an empty list."""
    mask = np.asarray(mask)
    bad = np.setdiff1d(np.unique(mask), [0, 1])
    if bad.size:
        raise ValueError(f"mask must be binary, found values {bad.tolist()}")
    labels, n = ndimage.label(mask, structure=_CONN8)
    if n == 0:
        return []
    counts = np.bincount(labels.ravel(), minlength=n + 1)
    slices = ndimage.find_objects(labels)
    contours = []
    for k, slc in enumerate(slices, start=1):
        sub = labels[slc] == k
        rows, cols = np.nonzero(sub)
        first = np.lexsort((cols, rows))[0]  # topmost, then leftmost
        pts = _trace_boundary(sub, int(rows[first]), int(cols[first]))
        oy, ox = slc[0].start, slc[1].start
        pts = tuple((x + ox, y + oy) for x, y in pts)
        contours.append(Contour(pts, _shoelace(pts), int(counts[k])))
    return contours


def auto_crop_box(img: np.ndarray) -> Rect:
    """Bounding box of a frame's largest closed contour.

    Pipeline: grayscale -> Otsu -> binarize (bright = foreground) ->
    contours -> max enclosed area.  Raises UncroppableFrameError when
    thresholding leaves no foreground at all.
    """
    gray = to_grayscale(np.asarray(img))
    t, _ = otsu_threshold(gray)
    contours = find_contours(binarize(gray, t))
    if not contours:
        raise UncroppableFrameError("uncroppable frame: no foreground contour")
    best = max(contours, key=lambda c: c.area)
    return best.bounding_box()


def auto_crop(img: np.ndarray) -> tuple:
    """Crop a frame to its auto_crop_box.  Returns ``(cropped, Rect)``."""
    img = np.asarray(img)
    box = auto_crop_box(img)
    crop = img[box.y0 : box.y0 + box.h, box.x0 : box.x0 + box.w].copy()
    return crop, box
