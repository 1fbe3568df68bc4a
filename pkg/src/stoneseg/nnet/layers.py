"""Layer primitives with exact forward and backward passes.

Tensors are numpy arrays of shape (batch, channels, height, width); every
op preserves the input dtype (float32 for training, float64 for gradient
checks).  Each ``*_forward`` returns (output, cache) and the matching
``*_backward`` consumes (upstream_grad, cache) and returns input gradients
plus parameter gradients where applicable.
"""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Layer input does not have the shape the layer requires."""


def _require_4d(name, x):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4-D (B, C, H, W) tensor, got shape {x.shape}")
    return x


# convolution, stride 1, padding k//2 (shape-preserving)

def _im2col(x, k):
    B, C, H, W = x.shape
    pad = k // 2
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = x.strides
    cols = np.lib.stride_tricks.as_strided(
        x, (B, C, k, k, H, W), (s[0], s[1], s[2], s[3], s[2], s[3])
    )
    return np.ascontiguousarray(cols.transpose(0, 4, 5, 1, 2, 3)).reshape(B * H * W, C * k * k)


def conv_forward(x, w, b):
    x = _require_4d("conv", x)
    out_c, in_c, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"conv: unsupported kernel shape {w.shape}")
    if x.shape[1] != in_c:
        raise ShapeError(
            f"conv: input has {x.shape[1]} channels, kernel {w.shape} expects {in_c}"
        )
    B, C, H, W = x.shape
    if k == 1:
        # channel mixing only; skip the im2col copy
        y = np.einsum("oc,bchw->bohw", w.reshape(out_c, in_c), x, optimize=True)
        y += b.reshape(1, out_c, 1, 1)
        return y, (x, w, None)
    cols = _im2col(x, k)
    y = cols @ w.reshape(out_c, -1).T
    y += b
    y = y.reshape(B, H, W, out_c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x, w, cols)


def conv_backward(g, cache):
    x, w, cols = cache
    out_c, in_c, k, _ = w.shape
    B, C, H, W = x.shape
    g = np.ascontiguousarray(g)
    db = g.sum(axis=(0, 2, 3))
    if k == 1:
        dw = np.einsum("bohw,bchw->oc", g, x, optimize=True).reshape(w.shape)
        dx = np.einsum("oc,bohw->bchw", w.reshape(out_c, in_c), g, optimize=True)
        return dx, dw, db
    gmat = g.transpose(0, 2, 3, 1).reshape(B * H * W, out_c)
    dw = (gmat.T @ cols).reshape(w.shape)
    dcols = gmat @ w.reshape(out_c, -1)
    # col2im: scatter the per-window gradients back onto the padded input
    dcols = dcols.reshape(B, H, W, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    pad = k // 2
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki : ki + H, kj : kj + W] += dcols[:, :, ki, kj]
    dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
    return dx, dw, db


def relu_forward(x):
    x = np.asarray(x)
    return np.maximum(x, 0), x


def relu_backward(g, cache):
    return g * (cache > 0)


def sigmoid_forward(x):
    x = np.asarray(x)
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(g, cache):
    y = cache
    return g * y * (1.0 - y)


def maxpool2_forward(x):
    x = _require_4d("maxpool2", x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {H}x{W}")
    h2, w2 = H // 2, W // 2
    xr = x.reshape(B, C, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, h2, w2, 4)
    idx = xr.argmax(axis=-1)
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2_backward(g, cache):
    idx, (B, C, H, W) = cache
    h2, w2 = H // 2, W // 2
    dxr = np.zeros((B, C, h2, w2, 4), dtype=g.dtype)
    np.put_along_axis(dxr, idx[..., None], g[..., None], axis=-1)
    return dxr.reshape(B, C, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)


def upsample2_forward(x):
    x = _require_4d("upsample2", x)
    return x.repeat(2, axis=2).repeat(2, axis=3), x.shape


def upsample2_backward(g, cache):
    B, C, H, W = cache
    return g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5))


def concat_forward(xs):
    if len({x.shape[0] for x in xs}) > 1 or len({x.shape[2:] for x in xs}) > 1:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=1), tuple(x.shape[1] for x in xs)


def concat_backward(g, cache):
    splits = np.cumsum(cache)[:-1]
    return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=1))


def add_forward(xs):
    a, b = xs
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b, None


def add_backward(g, cache):
    return g, g.copy()


def norm_forward(x, gamma, beta):
    """Per-channel batch-statistic normalization with learned scale/shift."""
    x = _require_4d("norm", x)
    mu = x.mean(axis=(0, 2, 3), keepdims=True)
    var = x.var(axis=(0, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    return y, (xhat, inv, gamma)


def norm_backward(g, cache):
    xhat, inv, gamma = cache
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dgamma = (g * xhat).sum(axis=(0, 2, 3))
    dbeta = g.sum(axis=(0, 2, 3))
    dxhat = g * gamma.reshape(1, -1, 1, 1)
    dx = (
        dxhat
        - dxhat.mean(axis=(0, 2, 3), keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
    ) * inv
    return dx, dgamma, dbeta


# generic single-layer interface

_PARAMLESS = {"relu", "sigmoid", "maxpool2", "upsample2", "concat", "add"}


def layer_apply(kind, params, x):
    """Apply one layer.  ``params`` is (w, b) for convs, (gamma, beta) for
    norm, None otherwise; ``x`` is a sequence of tensors for concat/add."""
    y, _ = _layer_forward(kind, params, x)
    return y


def layer_grad(kind, params, x, upstream):
    """Exact analytic gradients of one layer: (input_grad, param_grads).
    ``input_grad`` is a tuple when the layer takes several inputs."""
    _, cache = _layer_forward(kind, params, x)
    if kind in ("conv3x3", "conv1x1"):
        dx, dw, db = conv_backward(upstream, cache)
        return dx, (dw, db)
    if kind == "relu":
        return relu_backward(upstream, cache), None
    if kind == "sigmoid":
        return sigmoid_backward(upstream, cache), None
    if kind == "maxpool2":
        return maxpool2_backward(upstream, cache), None
    if kind == "upsample2":
        return upsample2_backward(upstream, cache), None
    if kind == "concat":
        return concat_backward(upstream, cache), None
    if kind == "add":
        return add_backward(upstream, cache), None
    if kind == "norm":
        dx, dgamma, dbeta = norm_backward(upstream, cache)
        return dx, (dgamma, dbeta)
    raise ValueError(f"unknown layer kind '{kind}'")


def _layer_forward(kind, params, x):
    if kind in ("conv3x3", "conv1x1"):
        w, b = params
        k = 3 if kind == "conv3x3" else 1
        if w.shape[2] != k:
            raise ShapeError(f"{kind}: kernel shaped {w.shape}")
        return conv_forward(x, w, b)
    if kind == "relu":
        return relu_forward(x)
    if kind == "sigmoid":
        return sigmoid_forward(x)
    if kind == "maxpool2":
        return maxpool2_forward(x)
    if kind == "upsample2":
        return upsample2_forward(x)
    if kind == "concat":
        return concat_forward(tuple(np.asarray(v) for v in x))
    if kind == "add":
        return add_forward(tuple(np.asarray(v) for v in x))
    if kind == "norm":
        gamma, beta = params
        return norm_forward(x, gamma, beta)
    raise ValueError(f"unknown layer kind '{kind}'")
