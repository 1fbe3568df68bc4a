"""Encoder-decoder segmentation models.

A ModelConfig is compiled once into a static plan: an ordered list of layer
steps over named activations.  The encoder applies a block then halves the
resolution at each level; the decoder mirrors it with nearest-neighbor
upsampling and skip concatenations.  ``nested_skips`` switches the plain
skip topology to the nested variant whose intermediate nodes consume the
upsampled deeper output together with every same-level predecessor.

Blocks come in three kinds:
  plain     conv3x3 -> relu, twice
  residual  two-conv body plus identity (1x1-projected when channels change)
  dense     ``dense_layers_per_block`` conv layers, each emitting
            ``growth_rate`` channels concatenated onto the running stack,
            then a 1x1 transition conv back down to the level width
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import layers as L

__all__ = [
    "ModelConfig",
    "Step",
    "build_plan",
    "build_model",
    "forward",
    "backward",
    "bce_loss_and_grad",
    "predict_mask",
    "parameter_count",
    "NonFiniteActivationError",
]

BLOCK_KINDS = ("plain", "residual", "dense")


class NonFiniteActivationError(FloatingPointError):
    """A layer produced NaN or Inf during the forward pass."""


@dataclass(frozen=True)
class ModelConfig:
    block_kind: str
    depth: int
    base_channels: int
    nested_skips: bool = False
    use_norm: bool = False
    input_channels: int = 1
    output_channels: int = 1
    growth_rate: Optional[int] = None
    dense_layers_per_block: Optional[int] = None

    def __post_init__(self):
        if self.block_kind not in BLOCK_KINDS:
            raise ValueError(f"unknown block_kind '{self.block_kind}'")
        if self.depth < 1 or self.base_channels < 1 or self.input_channels < 1:
            raise ValueError("depth, base_channels and input_channels must be >= 1")
        if self.output_channels != 1:
            raise ValueError("only single-channel (binary) output is supported")
        if self.block_kind == "dense":
            if not self.growth_rate or not self.dense_layers_per_block:
                raise ValueError("dense blocks need growth_rate and dense_layers_per_block")
        elif self.growth_rate is not None or self.dense_layers_per_block is not None:
            raise ValueError("growth_rate/dense_layers_per_block apply to dense blocks only")

    def to_dict(self) -> dict:
        return {
            "block_kind": self.block_kind,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "nested_skips": self.nested_skips,
            "use_norm": self.use_norm,
            "input_channels": self.input_channels,
            "output_channels": self.output_channels,
            "growth_rate": self.growth_rate,
            "dense_layers_per_block": self.dense_layers_per_block,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class Step(NamedTuple):
    op: str        # conv3x3 | conv1x1 | relu | sigmoid | maxpool2 | upsample2 | concat | add | norm
    out: str
    ins: tuple     # activation names
    param: Optional[str]  # parameter prefix for conv/norm steps


class _Planner:
    def __init__(self, config):
        self.config = config
        self.steps = []
        self.channels = {"input": config.input_channels}
        self.param_shapes = {}  # name -> shape, in creation order
        self._uid = 0

    def _fresh(self, tag):
        self._uid += 1
        return f"{tag}#{self._uid}"

    def conv(self, prefix, src, out_ch, k):
        in_ch = self.channels[src]
        self.param_shapes[f"{prefix}.w"] = (out_ch, in_ch, k, k)
        self.param_shapes[f"{prefix}.b"] = (out_ch,)
        out = self._fresh(prefix)
        self.steps.append(Step("conv3x3" if k == 3 else "conv1x1", out, (src,), prefix))
        self.channels[out] = out_ch
        return out

    def norm(self, prefix, src):
        ch = self.channels[src]
        self.param_shapes[f"{prefix}.gamma"] = (ch,)
        self.param_shapes[f"{prefix}.beta"] = (ch,)
        out = self._fresh(prefix)
        self.steps.append(Step("norm", out, (src,), prefix))
        self.channels[out] = ch
        return out

    def simple(self, op, src):
        out = self._fresh(op)
        self.steps.append(Step(op, out, (src,), None))
        self.channels[out] = self.channels[src]
        return out

    def concat(self, srcs):
        out = self._fresh("concat")
        self.steps.append(Step("concat", out, tuple(srcs), None))
        self.channels[out] = sum(self.channels[s] for s in srcs)
        return out

    def add(self, a, b):
        out = self._fresh("add")
        self.steps.append(Step("add", out, (a, b), None))
        self.channels[out] = self.channels[a]
        return out

    def conv_unit(self, prefix, src, out_ch, k=3, activate=True):
        h = self.conv(prefix, src, out_ch, k)
        if self.config.use_norm:
            h = self.norm(f"{prefix}.norm", h)
        return self.simple("relu", h) if activate else h

    def block(self, prefix, src, out_ch):
        kind = self.config.block_kind
        if kind == "plain":
            h = self.conv_unit(f"{prefix}.conv1", src, out_ch)
            return self.conv_unit(f"{prefix}.conv2", h, out_ch)
        if kind == "residual":
            h = self.conv_unit(f"{prefix}.conv1", src, out_ch)
            h = self.conv_unit(f"{prefix}.conv2", h, out_ch, activate=False)
            shortcut = src
            if self.channels[src] != out_ch:
                shortcut = self.conv_unit(f"{prefix}.proj", src, out_ch, k=1, activate=False)
            return self.simple("relu", self.add(h, shortcut))
        # dense
        stack = src
        for i in range(self.config.dense_layers_per_block):
            grown = self.conv_unit(f"{prefix}.grow{i}", stack, self.config.growth_rate)
            stack = self.concat((stack, grown))
        return self.conv_unit(f"{prefix}.transition", stack, out_ch, k=1)


def _level_channels(config, level):
    return config.base_channels * (2 ** level)


@functools.lru_cache(maxsize=None)
def build_plan(config: ModelConfig):
    """Compile a config into (steps, param_shapes).  Cached per config."""
    p = _Planner(config)
    depth = config.depth

    # encoder column: node[i][0]
    node = {}
    h = "input"
    for i in range(depth + 1):
        if i > 0:
            h = p.simple("maxpool2", h)
        h = p.block(f"enc{i}", h, _level_channels(config, i))
        node[(i, 0)] = h

    if config.nested_skips:
        for j in range(1, depth + 1):
            for i in range(depth - j + 1):
                up = p.simple("upsample2", node[(i + 1, j - 1)])
                cat = p.concat(tuple(node[(i, jj)] for jj in range(j)) + (up,))
                node[(i, j)] = p.block(f"dec{i}_{j}", cat, _level_channels(config, i))
        top = node[(0, depth)]
    else:
        h = node[(depth, 0)]
        for i in range(depth - 1, -1, -1):
            up = p.simple("upsample2", h)
            cat = p.concat((node[(i, 0)], up))
            h = p.block(f"dec{i}", cat, _level_channels(config, i))
        top = h

    logits = p.conv("head", top, config.output_channels, k=1)
    out = p.simple("sigmoid", logits)
    steps = tuple(p.steps)
    # route the final activation under a stable name
    steps = steps[:-1] + (Step("sigmoid", "out", steps[-1].ins, None),)
    return steps, dict(p.param_shapes)


def build_model(config: ModelConfig, seed: int = 0) -> dict:
    """He-initialized parameters for the config: zero-mean Gaussians with
    variance 2/fan_in for conv kernels, zero biases, unit norm scales.
    Deterministic for a given seed."""
    _, shapes = build_plan(config)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)
        elif name.endswith(".gamma"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:  # biases and betas
            params[name] = np.zeros(shape, dtype=np.float32)
    return params


def parameter_count(config: ModelConfig) -> int:
    _, shapes = build_plan(config)
    return sum(int(np.prod(s)) for s in shapes.values())


def _step_forward(step, params, acts):
    if step.op in ("conv3x3", "conv1x1"):
        return L.conv_forward(acts[step.ins[0]], params[f"{step.param}.w"], params[f"{step.param}.b"])
    if step.op == "norm":
        return L.norm_forward(acts[step.ins[0]], params[f"{step.param}.gamma"], params[f"{step.param}.beta"])
    if step.op == "relu":
        return L.relu_forward(acts[step.ins[0]])
    if step.op == "sigmoid":
        return L.sigmoid_forward(acts[step.ins[0]])
    if step.op == "maxpool2":
        return L.maxpool2_forward(acts[step.ins[0]])
    if step.op == "upsample2":
        return L.upsample2_forward(acts[step.ins[0]])
    if step.op == "concat":
        return L.concat_forward(tuple(acts[k] for k in step.ins))
    if step.op == "add":
        return L.add_forward(tuple(acts[k] for k in step.ins))
    raise ValueError(f"unknown op '{step.op}'")


def _check_input(config, x):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != config.input_channels:
        raise L.ShapeError(
            f"model input must be (B, {config.input_channels}, H, W), got {x.shape}"
        )
    div = 2 ** config.depth
    if x.shape[2] % div or x.shape[3] % div:
        raise L.ShapeError(
            f"input {x.shape[2]}x{x.shape[3]} not divisible by 2^depth = {div}"
        )
    return x


def forward(config: ModelConfig, params: dict, x: np.ndarray, check_finite: bool = True) -> np.ndarray:
    """Probability maps for a batch: output shape (B, 1, H, W), values in (0, 1)."""
    x = _check_input(config, x)
    steps, _ = build_plan(config)
    acts = {"input": x}
    for step in steps:
        y, _ = _step_forward(step, params, acts)
        if check_finite and not np.isfinite(y).all():
            raise NonFiniteActivationError(f"non-finite activation out of layer '{step.out}'")
        acts[step.out] = y
    return acts["out"]


def bce_loss_and_grad(prob: np.ndarray, gt: np.ndarray):
    """Mean clamped binary cross-entropy over the batch and its gradient
    with respect to the probabilities."""
    eps = 1e-7
    y = (np.asarray(gt) != 0).astype(prob.dtype).reshape(prob.shape)
    inside = (prob > eps) & (prob < 1.0 - eps)
    p = np.clip(prob, eps, 1.0 - eps)
    loss = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    grad = np.where(inside, (p - y) / (p * (1.0 - p)), 0.0) / prob.size
    return loss, grad.astype(prob.dtype)


def backward(config: ModelConfig, params: dict, x: np.ndarray, gt: np.ndarray):
    """Full forward + loss + backpropagation.

    Returns (loss, grads, prob): grads has exactly the parameter names and
    shapes of ``params``, prob is the forward output.  ``gt`` is a batch of
    {0, 1} masks shaped like the model output (a (B, H, W) batch is
    accepted and reshaped).
    """
    x = _check_input(config, x)
    steps, shapes = build_plan(config)
    acts = {"input": x}
    caches = {}
    for step in steps:
        y, cache = _step_forward(step, params, acts)
        acts[step.out] = y
        caches[step.out] = cache

    loss, dprob = bce_loss_and_grad(acts["out"], gt)

    grads = {name: np.zeros(shape, dtype=x.dtype) for name, shape in shapes.items()}
    dacts = {"out": dprob}
    for step in reversed(steps):
        g = dacts.pop(step.out, None)
        if g is None:
            continue
        cache = caches[step.out]
        if step.op in ("conv3x3", "conv1x1"):
            dx, dw, db = L.conv_backward(g, cache)
            grads[f"{step.param}.w"] += dw
            grads[f"{step.param}.b"] += db
            dins = (dx,)
        elif step.op == "norm":
            dx, dgamma, dbeta = L.norm_backward(g, cache)
            grads[f"{step.param}.gamma"] += dgamma
            grads[f"{step.param}.beta"] += dbeta
            dins = (dx,)
        elif step.op == "relu":
            dins = (L.relu_backward(g, cache),)
        elif step.op == "sigmoid":
            dins = (L.sigmoid_backward(g, cache),)
        elif step.op == "maxpool2":
            dins = (L.maxpool2_backward(g, cache),)
        elif step.op == "upsample2":
            dins = (L.upsample2_backward(g, cache),)
        elif step.op == "concat":
            dins = L.concat_backward(g, cache)
        elif step.op == "add":
            dins = L.add_backward(g, cache)
        else:
            raise ValueError(f"unknown op '{step.op}'")
        for name, din in zip(step.ins, dins):
            if name == "input":
                continue
            if name in dacts:
                dacts[name] = dacts[name] + din
            else:
                dacts[name] = din
    return loss, grads, acts["out"]


def predict_mask(prob: np.ndarray) -> np.ndarray:
    """Threshold probabilities at 0.5 (inclusive) into a {0, 1} mask."""
    return (np.asarray(prob) >= 0.5).astype(np.uint8)
