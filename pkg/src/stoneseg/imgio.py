"""Reading and writing frames and masks.

PNG is the primary on-disk format (8-bit RGB frames, 8-bit grayscale masks
with 0 = background and 255 = stone).  Binary PPM (P6) / PGM (P5) are also
accepted and written for dependency-free fixtures.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image


def read_rgb(path) -> np.ndarray:
    """Load a frame as uint8 (H, W, 3)."""
    if str(path).lower().endswith((".ppm", ".pgm")):
        arr = _read_pnm(path)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        return arr
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_gray(path) -> np.ndarray:
    """Load an 8-bit grayscale image as uint8 (H, W)."""
    if str(path).lower().endswith((".ppm", ".pgm")):
        arr = _read_pnm(path)
        if arr.ndim == 3:
            raise ValueError(f"{path}: expected grayscale, got color PNM")
        return arr
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def read_mask(path) -> np.ndarray:
    """Load a mask stored as 0/255 grayscale; returns uint8 {0, 1}."""
    return (read_gray(path) >= 128).astype(np.uint8)


def write_image(path, arr: np.ndarray) -> None:
    """Write uint8 RGB (H, W, 3) or grayscale (H, W) to PNG or PPM/PGM."""
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    lower = str(path).lower()
    if lower.endswith((".ppm", ".pgm")):
        _write_pnm(path, arr)
        return
    Image.fromarray(arr).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    """Write a {0, 1} mask as 0/255 grayscale."""
    write_image(path, (np.asarray(mask) != 0).astype(np.uint8) * 255)


def _read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    fields = []
    pos = 0
    # header = magic, width, height, maxval; '#' comments run to end of line
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PNM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    if magic == b"P5":
        n = w * h
        arr = np.frombuffer(data[pos : pos + n], dtype=np.uint8)
        shape = (h, w)
    elif magic == b"P6":
        n = w * h * 3
        arr = np.frombuffer(data[pos : pos + n], dtype=np.uint8)
        shape = (h, w, 3)
    else:
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    if arr.size != n:
        raise ValueError(f"{path}: truncated PNM payload")
    return arr.reshape(shape).copy()


def _write_pnm(path, arr: np.ndarray) -> None:
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as PNM")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
