"""Pure-NumPy kernels for the convolution/pooling hot paths.

The compiled extension in ``_fastconv`` implements the same eight functions
with direct C loops; this module is the fallback selected when the extension
is unavailable.  Both backends take C-contiguous float32 arrays, accumulate
in float64 and return float32, so results agree to rounding of the final
cast.

Layout conventions:
  images          (N, C, H, W)
  conv weights    (O, C, KH, KW)        cross-correlation, no flipping
  deconv weights  (C, O, KH, KW)
"""
from __future__ import annotations

import numpy as np


def _sliding(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """All (kh, kw) windows of x at the given stride: (N, C, OH, OW, kh, kw)."""
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride, padding):
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {cw}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _sliding(x, kh, kw, stride).astype(np.float64)
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    out = cols @ w.reshape(o, -1).astype(np.float64).T
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(n, o, oh, ow), dtype=np.float32)


def conv2d_grad_input(gout, w, stride, padding, h, wd):
    n, o, oh, ow = gout.shape
    _, c, kh, kw = w.shape
    gcols = gout.astype(np.float64).transpose(0, 2, 3, 1).reshape(n, oh * ow, o) @ w.reshape(o, -1).astype(np.float64)
    gcols = gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            gx[:, :, a : a + stride * oh : stride, b : b + stride * ow : stride] += gcols[:, :, a, b]
    if padding:
        gx = gx[:, :, padding : padding + h, padding : padding + wd]
    return np.ascontiguousarray(gx, dtype=np.float32)


def conv2d_grad_weight(gout, x, stride, padding, kh, kw):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = _sliding(x, kh, kw, stride).astype(np.float64)  # (N, C, OH, OW, kh, kw)
    gw = np.einsum("nchwab,nohw->ocab", win, gout.astype(np.float64))
    return np.ascontiguousarray(gw, dtype=np.float32)


def maxpool2d_forward(x, kernel, stride):
    n, c, h, w = x.shape
    win = _sliding(x, kernel, kernel, stride)
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    idx = flat.argmax(axis=-1).astype(np.int64)  # first max in row-major window order
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out, dtype=np.float32), np.ascontiguousarray(idx)


def maxpool2d_backward(gout, idx, h, w, kernel, stride):
    n, c, oh, ow = gout.shape
    gx = np.zeros((n, c, h, w), dtype=np.float64)
    ii, jj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    rows = ii * stride + idx // kernel  # (n, c, oh, ow)
    cols = jj * stride + idx % kernel
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    np.add.at(gx, (np.broadcast_to(nn, idx.shape), np.broadcast_to(cc, idx.shape), rows, cols), gout.astype(np.float64))
    return np.ascontiguousarray(gx, dtype=np.float32)


def convt2d_forward(x, w, stride):
    n, c, h, wd = x.shape
    cw, o, kh, kw = w.shape
    if c != cw:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {cw}")
    oh, ow = (h - 1) * stride + kh, (wd - 1) * stride + kw
    contrib = np.einsum("nchw,coab->nohwab", x.astype(np.float64), w.astype(np.float64))
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + stride * h : stride, b : b + stride * wd : stride] += contrib[:, :, :, :, a, b]
    return np.ascontiguousarray(out, dtype=np.float32)


def convt2d_grad_input(gout, w, stride):
    _, o, kh, kw = w.shape
    win = _sliding(gout, kh, kw, stride).astype(np.float64)  # (N, O, H, W, kh, kw)
    gx = np.einsum("nohwab,coab->nchw", win, w.astype(np.float64))
    return np.ascontiguousarray(gx, dtype=np.float32)


def convt2d_grad_weight(gout, x, stride, kh, kw):
    win = _sliding(gout, kh, kw, stride).astype(np.float64)  # (N, O, H, W, kh, kw)
    gw = np.einsum("nchw,nohwab->coab", x.astype(np.float64), win)
    return np.ascontiguousarray(gw, dtype=np.float32)
