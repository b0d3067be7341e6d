"""Independent reference implementations used by the test suite.

Everything here is written from the mathematical definition (explicit loops
or direct formulas in float64) and never calls into the package's kernels or
autodiff engine, so agreement is evidence rather than tautology.
"""
from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# forward oracles (explicit loops)
# ---------------------------------------------------------------------------


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if a.ndim == 2:
        m, k = a.shape
        _, n = b.shape
        out = np.zeros((m, n))
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for t in range(k):
                    acc += a[i, t] * b[t, j]
                out[i, j] = acc
        return out
    return np.stack([loop_matmul(a[i], b[i]) for i in range(a.shape[0])])


def loop_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    x = x.astype(np.float64)
    w = w.astype(np.float64)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                ih = i * stride + a - padding
                                iw = j * stride + b - padding
                                if 0 <= ih < h and 0 <= iw < wd:
                                    acc += x[ni, ci, ih, iw] * w[oi, ci, a, b]
                    out[ni, oi, i, j] = acc
    return out


def loop_conv2d_grad_input(g: np.ndarray, w: np.ndarray, stride: int, padding: int, h: int, wd: int) -> np.ndarray:
    g = g.astype(np.float64)
    w = w.astype(np.float64)
    n, o, oh, ow = g.shape
    c, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    gx = np.zeros((n, c, h, wd))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                ih = i * stride + a - padding
                                iw = j * stride + b - padding
                                if 0 <= ih < h and 0 <= iw < wd:
                                    gx[ni, ci, ih, iw] += g[ni, oi, i, j] * w[oi, ci, a, b]
    return gx


def loop_conv2d_grad_weight(g: np.ndarray, x: np.ndarray, stride: int, padding: int, kh: int, kw: int) -> np.ndarray:
    g = g.astype(np.float64)
    x = x.astype(np.float64)
    n, o, oh, ow = g.shape
    c, h, wd = x.shape[1], x.shape[2], x.shape[3]
    gw = np.zeros((o, c, kh, kw))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                ih = i * stride + a - padding
                                iw = j * stride + b - padding
                                if 0 <= ih < h and 0 <= iw < wd:
                                    gw[oi, ci, a, b] += g[ni, oi, i, j] * x[ni, ci, ih, iw]
    return gw


def loop_convt2d(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    x = x.astype(np.float64)
    w = w.astype(np.float64)
    n, c, h, wd = x.shape
    _, o, kh, kw = w.shape
    oh = (h - 1) * stride + kh
    ow = (wd - 1) * stride + kw
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    for oi in range(o):
                        for a in range(kh):
                            for b in range(kw):
                                out[ni, oi, i * stride + a, j * stride + b] += x[ni, ci, i, j] * w[ci, oi, a, b]
    return out


def loop_maxpool2d(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    x = x.astype(np.float64)
    n, c, h, w = x.shape
    oh = (h - kernel) // stride + 1
    ow = (w - kernel) // stride + 1
    out = np.zeros((n, c, oh, ow))
    idx = np.zeros((n, c, oh, ow), dtype=np.int64)
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    best_val = -np.inf
                    best_pos = 0
                    for a in range(kernel):
                        for b in range(kernel):
                            v = x[ni, ci, i * stride + a, j * stride + b]
                            if v > best_val:  # first occurrence wins ties
                                best_val = v
                                best_pos = a * kernel + b
                    out[ni, ci, i, j] = best_val
                    idx[ni, ci, i, j] = best_pos
    return out, idx


def direct_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    x = x.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def direct_attention(
    q_src: np.ndarray,
    kv_src: np.ndarray,
    wq: np.ndarray,
    bq: np.ndarray,
    wk: np.ndarray,
    bk: np.ndarray,
    wv: np.ndarray,
    bv: np.ndarray,
) -> np.ndarray:
    """Three matmuls + scaled softmax, straight from the formula, in f64."""
    q = q_src.astype(np.float64) @ wq.astype(np.float64) + bq.astype(np.float64)
    k = kv_src.astype(np.float64) @ wk.astype(np.float64) + bk.astype(np.float64)
    v = kv_src.astype(np.float64) @ wv.astype(np.float64) + bv.astype(np.float64)
    d = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d)
    return direct_softmax(scores, -1) @ v


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def fd_grad(f, arrays: list[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central-difference gradients of scalar f(*arrays) w.r.t. each array.

    Evaluations happen in float64 copies of the inputs.
    """
    arrays = [a.astype(np.float64).copy() for a in arrays]
    grads = []
    for ai, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*arrays)
            flat[i] = orig - h
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float((np.abs(a - b) / denom).max())


# ---------------------------------------------------------------------------
# fast float64 references for use inside fd_grad closures
# ---------------------------------------------------------------------------


def ref_conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    x = x.astype(np.float64)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (w.shape[2], w.shape[3]), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("nchwab,ocab->nohw", win, w.astype(np.float64))


def ref_convt2d(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    return loop_convt2d(x, w, stride)  # small shapes only


def ref_maxpool2d(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x.astype(np.float64), (kernel, kernel), axis=(2, 3))[
        :, :, ::stride, ::stride
    ]
    return win.max(axis=(-1, -2))


def ref_log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    x = x.astype(np.float64)
    x = x - x.max(axis=axis, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=axis, keepdims=True))


def ref_batchnorm_train(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = x.astype(np.float64)
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    return gamma.astype(np.float64) * (x - mean) / np.sqrt(var + eps) + beta.astype(np.float64)
