"""Binary model checkpoints.

Layout (all integers little-endian):

    magic           4 bytes  b"SSCK"
    version         u32      1
    meta_len        u32
    meta            meta_len bytes of UTF-8 JSON:
                    {"model": <config dict>,
                     "training_steps_completed": <int>,
                     "input_size": [h, w] or null}
    tensor_count    u32
    per tensor:
        name_len    u32
        name        UTF-8
        ndim        u32
        dims        u32 * ndim
        data        float32 little-endian, C order

Tensors are written in model parameter-registry order, which makes the
file bitwise reproducible for identical parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .model import ModelConfig, build_plan

__all__ = [
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "BadMagicError",
    "TruncatedCheckpointError",
    "ShapeMismatchError",
]

MAGIC = b"SSCK"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class TruncatedCheckpointError(CheckpointError):
    """The file ended before the declared content."""


class ShapeMismatchError(CheckpointError):
    """Stored tensors do not match the stored model config."""


@dataclass
class Checkpoint:
    config: ModelConfig
    parameters: dict
    training_steps_completed: int = 0
    input_size: Optional[Tuple[int, int]] = None


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    _, shapes = build_plan(ckpt.config)
    missing = set(shapes) - set(ckpt.parameters)
    if missing:
        raise ValueError(f"parameters missing for {sorted(missing)}")
    meta = {
        "model": ckpt.config.to_dict(),
        "training_steps_completed": int(ckpt.training_steps_completed),
        "input_size": list(ckpt.input_size) if ckpt.input_size else None,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(shapes)))
        for name in shapes:  # registry order
            arr = np.ascontiguousarray(ckpt.parameters[name], dtype=np.float32)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4", copy=False).tobytes())


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint file: magic {data[:4]!r}")
    r = _Reader(data)
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    config = ModelConfig.from_dict(meta["model"])
    n_tensors = r.u32()
    params = {}
    for _ in range(n_tensors):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        buf = r.take(4 * count)
        params[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()

    _, expected = build_plan(config)
    if set(params) != set(expected):
        raise ShapeMismatchError(
            f"tensor names do not match config: missing {sorted(set(expected) - set(params))}, "
            f"unexpected {sorted(set(params) - set(expected))}"
        )
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(
                f"tensor '{name}' has shape {params[name].shape}, config requires {shape}"
            )
    size = meta.get("input_size")
    return Checkpoint(
        config=config,
        parameters=params,
        training_steps_completed=int(meta.get("training_steps_completed", 0)),
        input_size=tuple(size) if size else None,
    )
