"""Scale-dependent convolution.

Every object is resized to a fixed ``target x target`` square before it
reaches the network, so a 3x3 kernel in the first layer covers a different
physical extent for small and large objects. The scale-dependent layer
undoes that: the resized image is upsampled by ``u_f`` (nearest), convolved
with a per-sample dilation derived from the object's original height and
width, then max-pooled back by ``u_f``. Kernel weights are shared across
all samples.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import conv as _conv
from .autodiff import functional as F
from .autodiff.nn import Module, Parameter, he_normal
from .autodiff.tensor import Tensor

TARGET_SIDE = 32
DEFAULT_UPSCALE = 3


def compute_dilation(a_I: float, u_f: int = DEFAULT_UPSCALE, target: int = TARGET_SIDE) -> int:
    """Dilation along one axis: ``max(floor(u_f * target / a_I), 1)``.

    Non-integer lengths (after augmentation) are floored first.
    """
    if not a_I >= 1:
        raise ValueError(f"original axis length must be >= 1 px, got {a_I}")
    return max((u_f * target) // int(math.floor(a_I)), 1)


def dilations_for(sizes, u_f: int = DEFAULT_UPSCALE, target: int = TARGET_SIDE) -> np.ndarray:
    """(N, 2) array of (d_h, d_w) for an (N, 2) array of original (h, w)."""
    if sizes is None:
        raise ValueError("scale-dependent convolution needs per-sample (h, w) sizes")
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    return np.array([[compute_dilation(h, u_f, target), compute_dilation(w, u_f, target)] for h, w in sizes],
                    dtype=np.int64)


def sdcl_inner(x: Tensor, weight: Tensor, d_h, d_w, bias: Tensor | None = None) -> Tensor:
    """Convolution where sample ``n`` uses dilation ``(d_h[n], d_w[n])``.

    Samples sharing a dilation pair are convolved together; the result is
    identical to running each sample through ``conv2d`` on its own.
    """
    n = x.shape[0]
    d_h = np.broadcast_to(np.asarray(d_h, dtype=np.int64), (n,))
    d_w = np.broadcast_to(np.asarray(d_w, dtype=np.int64), (n,))
    if len(d_h) != n or len(d_w) != n:
        raise ValueError("a dilation pair is required for every sample in the batch")
    _conv.check_shapes(x.shape, weight.shape, (int(d_h.min()), int(d_w.min())))
    xd, wd = x.data, weight.data
    o, _, kh, kw = wd.shape
    out = np.empty((n, o) + xd.shape[2:], dtype=xd.dtype)
    groups = {}
    for i, key in enumerate(zip(d_h.tolist(), d_w.tolist())):
        groups.setdefault(key, []).append(i)
    groups = {k: np.array(v) for k, v in sorted(groups.items())}
    for dil, idx in groups.items():
        part, _ = _conv.conv_forward(xd[idx], wd, 1, dil)
        out[idx] = part
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    need_x = x.requires_grad

    def backward(g):
        gx = np.zeros_like(xd) if need_x else None
        gw = np.zeros_like(wd)
        for dil, idx in groups.items():
            xs = xd[idx]
            cols = _conv.im2col(xs, kh, kw, 1, dil)
            gxs, gws = _conv.conv_backward(g[idx], xs.shape, wd, cols, 1, dil, need_input_grad=need_x)
            gw += gws
            if need_x:
                gx[idx] = gxs
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def sdcl_forward(
    x: Tensor,
    sizes,
    weight: Tensor,
    u_f: int = DEFAULT_UPSCALE,
    bias: Tensor | None = None,
    target: int = TARGET_SIDE,
) -> Tensor:
    """max-pool_{u_f} . scale-dependent conv . upsample_{u_f}; spatial size is preserved."""
    if u_f < 1:
        raise ValueError(f"up-scaling factor must be >= 1, got {u_f}")
    if sizes is None:
        raise ValueError("scale-dependent convolution needs per-sample (h, w) sizes")
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    if len(sizes) != x.shape[0]:
        raise ValueError(f"got {len(sizes)} sizes for a batch of {x.shape[0]}")
    if np.any(sizes <= 0):
        raise ValueError("object sizes must be positive")
    dil = dilations_for(sizes, u_f, target)
    up = F.upsample_nearest(x, u_f)
    y = sdcl_inner(up, weight, dil[:, 0], dil[:, 1], bias)
    return F.max_pool2d(y, u_f, u_f) if u_f > 1 else y


class SDConv2d(Module):
    """Scale-dependent 3x3 convolution layer."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, u_f: int = DEFAULT_UPSCALE,
                 bias: bool = False, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.u_f = u_f
        self.weight = Parameter(he_normal((out_ch, in_ch, kernel, kernel), in_ch * kernel * kernel, rng))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None

    def forward(self, x: Tensor, sizes) -> Tensor:
        return sdcl_forward(x, sizes, self.weight, self.u_f, self.bias)
