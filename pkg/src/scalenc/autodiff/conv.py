"""Raw numpy kernels for zero-"same"-padded, strided, dilated 2-D convolution.

These operate on plain arrays; :func:`scalenc.autodiff.functional.conv2d`
wraps them into the graph. Layout is NCHW for activations and
(out, in, kh, kw) for weights.

The forward is an im2col gather followed by one batched GEMM per sample, so
each output element is reduced in the same order regardless of batch size.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided


def out_size(n: int, stride: int) -> int:
    return -(-n // stride)


def same_padding(k: int, dilation: int) -> tuple[int, int]:
    total = dilation * (k - 1)
    return total // 2, total - total // 2


def check_shapes(x_shape, w_shape, dilation) -> None:
    if len(x_shape) != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {tuple(x_shape)}")
    if len(w_shape) != 4:
        raise ValueError(f"conv2d expects (out, in, kh, kw) weights, got shape {tuple(w_shape)}")
    if x_shape[1] != w_shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input has {x_shape[1]} channels, kernel expects {w_shape[1]}"
        )
    kh, kw = w_shape[2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel spatial extents must be odd, got {kh}x{kw}")
    if dilation[0] < 1 or dilation[1] < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")


def _padded(x: np.ndarray, kh: int, kw: int, dil: tuple[int, int]) -> np.ndarray:
    (t, b), (l, r) = same_padding(kh, dil[0]), same_padding(kw, dil[1])
    if t == b == l == r == 0:
        return x
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + t + b, w + l + r), dtype=x.dtype)
    xp[:, :, t : t + h, l : l + w] = x
    return xp


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, dil: tuple[int, int]) -> np.ndarray:
    """Gather receptive fields into an (N, C*kh*kw, Ho*Wo) array."""
    n, c, h, w = x.shape
    ho, wo = out_size(h, stride), out_size(w, stride)
    if kh == kw == 1:
        sub = x[:, :, ::stride, ::stride] if stride > 1 else x
        return np.ascontiguousarray(sub).reshape(n, c, ho * wo)
    xp = _padded(x, kh, kw, dil)
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, dil[0] * sh, dil[1] * sw, stride * sh, stride * sw),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, ho * wo)


def col2im(
    cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, dil: tuple[int, int]
) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    ho, wo = out_size(h, stride), out_size(w, stride)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    if kh == kw == 1:
        if stride == 1:
            return cols.reshape(n, c, h, w)
        gx = np.zeros(x_shape, dtype=cols.dtype)
        gx[:, :, ::stride, ::stride] = cols[:, :, 0, 0]
        return gx
    (t, b), (l, r) = same_padding(kh, dil[0]), same_padding(kw, dil[1])
    gp = np.zeros((n, c, h + t + b, w + l + r), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dil[0]
        for j in range(kw):
            c0 = j * dil[1]
            gp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += cols[
                :, :, i, j
            ]
    return gp[:, :, t : t + h, l : l + w]


def conv_forward(
    x: np.ndarray, w: np.ndarray, stride: int = 1, dilation: tuple[int, int] = (1, 1)
) -> tuple[np.ndarray, np.ndarray]:
    """Return (output, columns). Columns are handed back so callers may reuse them."""
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, dilation)
    out = np.matmul(w.reshape(o, -1), cols)
    return out.reshape(n, o, out_size(h, stride), out_size(wd, stride)), cols


def conv_backward(
    g: np.ndarray,
    x_shape,
    w: np.ndarray,
    cols: np.ndarray,
    stride: int = 1,
    dilation: tuple[int, int] = (1, 1),
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    n, o = g.shape[:2]
    _, _, kh, kw = w.shape
    g2 = g.reshape(n, o, -1)
    gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gx = None
    if need_input_grad:
        if stride == 1:
            # adjoint of a stride-1 same-padded conv is a conv with the flipped, transposed kernel
            w_adj = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = conv_forward(g, w_adj, 1, dilation)
        else:
            gcols = np.matmul(w.reshape(o, -1).T, g2)
            gx = col2im(gcols, x_shape, kh, kw, stride, dilation)
    return gx, gw
