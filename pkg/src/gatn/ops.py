"""Differentiable layer operations on :class:`~gatn.tensor.Tensor`.

Image tensors use the batch x channels x height x width layout. Every op
computes in the element type of its first input.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, TensorError, make_output

PROB_FLOOR = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _check_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise TensorError(f"{op} expects a 4-d batch x channels x height x width tensor, got shape {x.shape}")


def _pad(a: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return a
    return np.pad(a, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    _check_4d(x, "conv2d")
    if kernels.ndim != 4:
        raise TensorError(f"conv2d kernels must be out_ch x in_ch x kh x kw, got shape {kernels.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernels.shape
    if ic != c:
        raise TensorError(f"conv2d: input has {c} channels but kernels expect {ic}")
    if bias is not None and bias.shape != (oc,):
        raise TensorError(f"conv2d: bias shape {bias.shape} does not match {oc} output channels")
    if stride < 1 or pad < 0:
        raise TensorError("conv2d: stride must be >= 1 and pad >= 0")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with pad {pad}")

    dt = x.dtype
    xp = _pad(x.data, pad)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernels.data.reshape(oc, -1).astype(dt, copy=False)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data.astype(dt, copy=False)
    out = out.reshape(n, ho, wo, oc).transpose(0, 3, 1, 2)

    def backward_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, oc)
        gw = (gm.T @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gw, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return make_output("conv2d", np.ascontiguousarray(out), inputs, backward_fn)


def maxpool2d(x: Tensor, window: int, stride: Optional[int] = None) -> Tensor:
    """Max pooling; ties send the gradient to the first window element in row-major order."""
    _check_4d(x, "maxpool2d")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise TensorError("maxpool2d: window and stride must be >= 1")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise TensorError(f"maxpool2d: window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    flat = win.reshape(n, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        for idx in range(window * window):
            i, j = divmod(idx, window)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += np.where(arg == idx, g, 0)
        return (gx,)

    return make_output("maxpool2d", np.ascontiguousarray(out), (x,), backward_fn)


def dense(x: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weights.T + bias`` with ``weights`` shaped out x in."""
    if x.ndim != 2 or weights.ndim != 2:
        raise TensorError(f"dense expects 2-d input and weights, got {x.shape} and {weights.shape}")
    if x.shape[1] != weights.shape[1]:
        raise TensorError(f"dense: input width {x.shape[1]} does not match weight inner dimension {weights.shape[1]}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise TensorError(f"dense: bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    dt = x.dtype
    wd = weights.data.astype(dt, copy=False)
    out = x.data @ wd.T
    if bias is not None:
        out = out + bias.data.astype(dt, copy=False)

    def backward_fn(g):
        return (
            g @ wd if x.requires_grad else None,
            g.T @ x.data if weights.requires_grad else None,
            g.sum(axis=0) if bias is not None and bias.requires_grad else None,
        )

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return make_output("dense", out, inputs, backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_output("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row max."""
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_output("softmax", y, (logits,), backward_fn)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of ``-log(max(p[label], 1e-12))`` over the batch.

    ``probs`` may be a single distribution (1-d) with an int label, or a batch
    (2-d) with one label per row.
    """
    p = probs.data if probs.ndim == 2 else probs.data[None, :]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = p.shape
    if lab.shape != (n,):
        raise TensorError(f"cross_entropy: {lab.size} labels for a batch of {n}")
    if np.any(lab < 0) or np.any(lab >= c):
        raise TensorError(f"cross_entropy: label out of range [0, {c})")
    rows = np.arange(n)
    picked = p[rows, lab]
    clamped = np.maximum(picked, PROB_FLOOR)
    loss = np.array(-np.log(clamped).mean(), dtype=probs.dtype)

    def backward_fn(g):
        gp = np.zeros_like(p)
        gp[rows, lab] = np.where(picked > PROB_FLOOR, -1.0 / (n * clamped), 0.0)
        gp *= g
        return (gp.reshape(probs.shape),)

    return make_output("cross_entropy", loss, (probs,), backward_fn)


def entropy(probs: Tensor) -> Tensor:
    """Row-wise ``sum_l p_l * log(max(p_l, 1e-12))`` (note: no leading minus)."""
    p = probs.data
    logp = np.log(np.maximum(p, PROB_FLOOR))
    h = (p * logp).sum(axis=-1)

    def backward_fn(g):
        dp = np.where(p > PROB_FLOOR, logp + 1.0, logp)
        return (dp * np.expand_dims(g, -1),)

    return make_output("entropy", h.astype(probs.dtype), (probs,), backward_fn)


class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, mean: np.ndarray, var: np.ndarray, momentum: float = BN_MOMENTUM) -> None:
        self.mean = (momentum * self.mean + (1 - momentum) * mean).astype(self.mean.dtype)
        self.var = (momentum * self.var + (1 - momentum) * var).astype(self.var.dtype)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train", stats: Optional[RunningStats] = None) -> Tensor:
    """Per-channel batch normalization for 2-d (N x C) or 4-d (N x C x H x W) input."""
    if x.ndim not in (2, 4):
        raise TensorError(f"batchnorm expects 2-d or 4-d input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise TensorError(f"batchnorm: gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise TensorError(f"batchnorm: mode must be 'train' or 'eval', got {mode!r}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    dt = x.dtype
    g_ = gamma.data.astype(dt, copy=False).reshape(bshape)
    b_ = beta.data.astype(dt, copy=False).reshape(bshape)

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if stats is not None:
            stats.update(mu, var)
    else:
        if stats is None:
            raise TensorError("batchnorm: eval mode needs running statistics")
        mu, var = stats.mean.astype(dt), stats.var.astype(dt)
    inv = (1.0 / np.sqrt(var + BN_EPS)).astype(dt)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * g_ + b_
    m = x.data.size // c

    def backward_fn(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * g_
            if mode == "train":
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = inv.reshape(bshape) / m * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv.reshape(bshape)
        return gx, gg, gb

    return make_output("batchnorm", out.astype(dt, copy=False), (x, gamma, beta), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _check_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return make_output("global_avg_pool", out, (x,), backward_fn)


# --- structural helpers -------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return make_output("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_output("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_output("take_rows", x.data[idx], (x,), backward_fn)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)

    def backward_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_output("sum", out, (x,), backward_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    out = np.asarray(x.data.mean(axis=axis), dtype=x.dtype)

    def backward_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return make_output("mean", out, (x,), backward_fn)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Max along ``axis``; the first maximal element receives the gradient."""
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return make_output("max", out, (x,), backward_fn)


def mul(x: Tensor, other: Tensor) -> Tensor:
    """Elementwise product of two same-shaped tensors."""
    if x.shape != other.shape:
        raise TensorError(f"mul: shapes {x.shape} and {other.shape} differ")
    return make_output("mul", x.data * other.data, (x, other), lambda g: (g * other.data, g * x.data))


def add(x: Tensor, other: Tensor) -> Tensor:
    if x.shape != other.shape:
        raise TensorError(f"add: shapes {x.shape} and {other.shape} differ")
    return make_output("add", x.data + other.data, (x, other), lambda g: (g, g))


def scale(x: Tensor, factor: float) -> Tensor:
    return make_output("scale", (x.data * factor).astype(x.dtype), (x,), lambda g: (g * factor,))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize rows (last axis) to unit Euclidean length."""
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x.data / norm

    def backward_fn(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return make_output("l2_normalize", y, (x,), backward_fn)
