"""Differentiable neural-network primitives built on :class:`Tensor`."""

from __future__ import annotations

import numpy as np

from . import conv as _conv
from .tensor import Tensor, concat  # noqa: F401  (re-export)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation=(1, 1),
    save_columns: bool = False,
) -> Tensor:
    """2-D convolution with zero same-padding.

    Output spatial size is ``ceil(in / stride)``. With ``save_columns`` the
    im2col buffer is kept for the backward pass instead of being rebuilt,
    trading memory for one gather.
    """
    dilation = _pair(dilation)
    _conv.check_shapes(x.shape, weight.shape, dilation)
    xd, wd = x.data, weight.data
    out, cols = _conv.conv_forward(xd, wd, stride, dilation)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    kept = cols if save_columns else None
    del cols
    x_shape = xd.shape
    kh, kw = wd.shape[2:]
    need_x = x.requires_grad

    def backward(g):
        c = kept if kept is not None else _conv.im2col(xd, kh, kw, stride, dilation)
        gx, gw = _conv.conv_backward(g, x_shape, wd, c, stride, dilation, need_input_grad=need_x)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear expects {weight.shape[1]} input features, got {x.shape[-1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    return x.relu()


def batch_norm(
    x: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    running_mean: np.ndarray | None,
    running_var: np.ndarray | None,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over every axis except axis 1 (channels / features).

    In training mode the batch statistics are used and the running buffers,
    if given, are updated in place with ``momentum``. Running variance uses
    the unbiased estimator.
    """
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = [1] * xd.ndim
    bshape[1] = xd.shape[1]
    if training:
        if xd.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2 samples")
        m = xd.size // xd.shape[1]
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mean
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat
    if gamma is not None:
        out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gam = gamma.data.reshape(bshape) if gamma is not None else 1.0
        gxhat = g * gam
        if training:
            gx = (
                gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            ) * inv_std.reshape(bshape)
        else:
            gx = gxhat * inv_std.reshape(bshape)
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=axes))
            grads.append(g.sum(axis=axes))
        return grads

    parents = (x,) if gamma is None else (x, gamma, beta)
    return Tensor._make(out.astype(xd.dtype, copy=False), parents, backward)


def max_pool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Max pooling with windows aligned at the origin and no padding.

    Gradient goes to the first maximal element of each window (row-major).
    """
    stride = kernel if stride is None else stride
    xd = x.data
    n, c, h, w = xd.shape
    ho, wo = (h - kernel) // stride + 1, (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"max_pool2d window {kernel} larger than input {h}x{w}")
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    def tap(arr, i, j):
        return arr[:, :, i : i + hs : stride, j : j + ws : stride]

    out = tap(xd, 0, 0).copy()
    for i in range(kernel):
        for j in range(kernel):
            if i or j:
                np.maximum(out, tap(xd, i, j), out=out)

    def backward(g):
        gx = np.zeros_like(xd)
        pending = np.ones(out.shape, dtype=bool)
        for i in range(kernel):
            for j in range(kernel):
                hit = pending & (tap(xd, i, j) == out)
                tap(gx, i, j)[...] += np.where(hit, g, 0)
                pending &= ~hit
        return (gx,)

    return Tensor._make(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)

    def backward(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], (n, c, h, w)).astype(g.dtype),)

    return Tensor._make((x.data.sum(axis=(2, 3)) * scale).astype(x.dtype), (x,), backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy for integer class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    xd = logits.data
    shifted = xd - xd.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    picked = logp[np.arange(n), targets]
    soft = np.exp(logp)

    def backward(g):
        gl = soft.copy()
        gl[np.arange(n), targets] -= 1.0
        return (gl * (g / n),)

    return Tensor._make(np.asarray(-picked.mean(), dtype=logits.dtype), (logits,), backward)


def l2_normalize(x: Tensor, axis: int = 1, eps: float = 1e-12) -> Tensor:
    norm = (x * x).sum(axis=axis, keepdims=True).sqrt()
    return x / (norm + eps)
