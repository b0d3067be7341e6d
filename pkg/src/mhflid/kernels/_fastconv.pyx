# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the convolution/pooling hot paths.

Mirrors ``reference.py``: float32 in/out, float64 accumulation, identical
signatures.  Single-threaded and deterministic.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w, int stride, int padding):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    if w.shape[1] != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {w.shape[1]}")
    cdef Py_ssize_t oh = (h + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t ow = (wd + 2 * padding - kw) // stride + 1
    out_arr = np.empty((n, o, oh, ow), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, oi, ci, i, j, a, b, ih, iw
    cdef double acc
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            ih = i * stride + a - padding
                            if ih < 0 or ih >= h:
                                continue
                            for b in range(kw):
                                iw = j * stride + b - padding
                                if iw < 0 or iw >= wd:
                                    continue
                                acc += <double> x[ni, ci, ih, iw] * <double> w[oi, ci, a, b]
                    out[ni, oi, i, j] = <float> acc
    return out_arr


def conv2d_grad_input(const float[:, :, :, ::1] gout, const float[:, :, :, ::1] w,
                      int stride, int padding, int h, int wd):
    cdef Py_ssize_t n = gout.shape[0], o = gout.shape[1], oh = gout.shape[2], ow = gout.shape[3]
    cdef Py_ssize_t c = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    acc_arr = np.zeros((n, c, h, wd), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t ni, oi, ci, i, j, a, b, ih, iw
    cdef double g
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    g = <double> gout[ni, oi, i, j]
                    for ci in range(c):
                        for a in range(kh):
                            ih = i * stride + a - padding
                            if ih < 0 or ih >= h:
                                continue
                            for b in range(kw):
                                iw = j * stride + b - padding
                                if iw < 0 or iw >= wd:
                                    continue
                                acc[ni, ci, ih, iw] += g * <double> w[oi, ci, a, b]
    return acc_arr.astype(np.float32)


def conv2d_grad_weight(const float[:, :, :, ::1] gout, const float[:, :, :, ::1] x,
                       int stride, int padding, int kh, int kw):
    cdef Py_ssize_t n = gout.shape[0], o = gout.shape[1], oh = gout.shape[2], ow = gout.shape[3]
    cdef Py_ssize_t c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    acc_arr = np.zeros((o, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t ni, oi, ci, i, j, a, b, ih, iw
    cdef double g
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    g = <double> gout[ni, oi, i, j]
                    for ci in range(c):
                        for a in range(kh):
                            ih = i * stride + a - padding
                            if ih < 0 or ih >= h:
                                continue
                            for b in range(kw):
                                iw = j * stride + b - padding
                                if iw < 0 or iw >= wd:
                                    continue
                                acc[oi, ci, a, b] += g * <double> x[ni, ci, ih, iw]
    return acc_arr.astype(np.float32)


def maxpool2d_forward(const float[:, :, :, ::1] x, int kernel, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kernel) // stride + 1
    cdef Py_ssize_t ow = (w - kernel) // stride + 1
    out_arr = np.empty((n, c, oh, ow), dtype=np.float32)
    idx_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef float[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t ni, ci, i, j, a, b, best
    cdef float v, cur
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = 0
                    v = x[ni, ci, i * stride, j * stride]
                    for a in range(kernel):
                        for b in range(kernel):
                            cur = x[ni, ci, i * stride + a, j * stride + b]
                            if cur > v:  # strict: ties keep the first window position
                                v = cur
                                best = a * kernel + b
                    out[ni, ci, i, j] = v
                    idx[ni, ci, i, j] = best
    return out_arr, idx_arr


def maxpool2d_backward(const float[:, :, :, ::1] gout, const cnp.int64_t[:, :, :, ::1] idx,
                       int h, int w, int kernel, int stride):
    cdef Py_ssize_t n = gout.shape[0], c = gout.shape[1], oh = gout.shape[2], ow = gout.shape[3]
    acc_arr = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t ni, ci, i, j, a, b
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    a = idx[ni, ci, i, j] // kernel
                    b = idx[ni, ci, i, j] % kernel
                    acc[ni, ci, i * stride + a, j * stride + b] += <double> gout[ni, ci, i, j]
    return acc_arr.astype(np.float32)


def convt2d_forward(const float[:, :, :, ::1] x, const float[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = w.shape[1], kh = w.shape[2], kw = w.shape[3]
    if w.shape[0] != c:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {w.shape[0]}")
    cdef Py_ssize_t oh = (h - 1) * stride + kh
    cdef Py_ssize_t ow = (wd - 1) * stride + kw
    acc_arr = np.zeros((n, o, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t ni, ci, oi, i, j, a, b
    cdef double v
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    v = <double> x[ni, ci, i, j]
                    for oi in range(o):
                        for a in range(kh):
                            for b in range(kw):
                                acc[ni, oi, i * stride + a, j * stride + b] += v * <double> w[ci, oi, a, b]
    return acc_arr.astype(np.float32)


def convt2d_grad_input(const float[:, :, :, ::1] gout, const float[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t n = gout.shape[0], o = gout.shape[1]
    cdef Py_ssize_t c = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t h = (gout.shape[2] - kh) // stride + 1
    cdef Py_ssize_t wd = (gout.shape[3] - kw) // stride + 1
    out_arr = np.empty((n, c, h, wd), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t ni, ci, oi, i, j, a, b
    cdef double acc
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for oi in range(o):
                        for a in range(kh):
                            for b in range(kw):
                                acc += <double> gout[ni, oi, i * stride + a, j * stride + b] * <double> w[ci, oi, a, b]
                    out[ni, ci, i, j] = <float> acc
    return out_arr


def convt2d_grad_weight(const float[:, :, :, ::1] gout, const float[:, :, :, ::1] x,
                        int stride, int kh, int kw):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t o = gout.shape[1]
    acc_arr = np.zeros((c, o, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] acc = acc_arr
    cdef Py_ssize_t ni, ci, oi, i, j, a, b
    cdef double v
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(wd):
                    v = <double> x[ni, ci, i, j]
                    for oi in range(o):
                        for a in range(kh):
                            for b in range(kw):
                                acc[ci, oi, a, b] += v * <double> gout[ni, oi, i * stride + a, j * stride + b]
    return acc_arr.astype(np.float32)
