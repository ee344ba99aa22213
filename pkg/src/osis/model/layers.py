"""Single-image (batch size 1) conv layers with explicit backward passes.

Activations are ``C x H x W`` float64 arrays. Each ``*_forward`` returns the
output and a cache consumed by the matching ``*_backward``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride=1):
    """'Same'-padded convolution with square odd kernels."""
    C, H, W = x.shape
    O, Ci, k, _ = w.shape
    if Ci != C:
        raise ValueError(f"conv expects {Ci} input channels, got {C}")
    pad = k // 2
    Ho, Wo = conv_out_size(H, k, stride, pad), conv_out_size(W, k, stride, pad)
    if k == 1 and stride == 1:
        cols = x.reshape(C, H * W)
    else:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
        cols = win.transpose(0, 3, 4, 1, 2).reshape(C * k * k, Ho * Wo)
    out = w.reshape(O, -1) @ cols + b[:, None]
    return out.reshape(O, Ho, Wo), (cols, x.shape, w, stride)


def conv2d_backward(dy, cache):
    cols, xshape, w, stride = cache
    O, C, k, _ = w.shape
    _, H, W = xshape
    Ho, Wo = dy.shape[1:]
    dy2 = dy.reshape(O, -1)
    dw = (dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1)
    dcols = w.reshape(O, -1).T @ dy2
    if k == 1 and stride == 1:
        return dcols.reshape(xshape), dw, db
    pad = k // 2
    dcols = dcols.reshape(C, k, k, Ho, Wo)
    dxp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, i, j]
    return dxp[:, pad:pad + H, pad:pad + W], dw, db


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy, mask):
    return dy * mask


def upsample_forward(x, factor, out_hw):
    """Nearest-neighbour upsampling, cropped to ``out_hw``."""
    if factor == 1:
        return x[:, :out_hw[0], :out_hw[1]]
    y = np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)
    return y[:, :out_hw[0], :out_hw[1]]


def upsample_backward(dy, factor, in_hw):
    C = dy.shape[0]
    H, W = in_hw
    full = np.zeros((C, H * factor, W * factor))
    full[:, :dy.shape[1], :dy.shape[2]] = dy
    if factor == 1:
        return full
    return full.reshape(C, H, factor, W, factor).sum(axis=(2, 4))
