"""Kernel backends against explicit-loop oracles and against each other."""
from __future__ import annotations

import numpy as np
import pytest

import oracles
from mhflid.kernels import reference

BACKENDS = [pytest.param(reference, id="python")]
try:
    from mhflid.kernels import _fastconv

    BACKENDS.append(pytest.param(_fastconv, id="compiled"))
except ImportError:  # pragma: no cover - extension not built
    _fastconv = None


def _rand(rng, *shape):
    return rng.standard_normal(shape).astype(np.float32)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.mark.parametrize("seed", range(6))
def test_conv2d_forward_matches_loops(backend, seed):
    rng = np.random.default_rng(seed)
    n, c, o = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k))
    h = int(rng.integers(k, k + 6))
    w = int(rng.integers(k, k + 6))
    x = _rand(rng, n, c, h, w)
    wt = _rand(rng, o, c, k, k)
    got = backend.conv2d_forward(x, wt, stride, padding)
    want = oracles.loop_conv2d(x, wt, stride, padding)
    assert got.dtype == np.float32
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-5)


@pytest.mark.parametrize("seed", range(6))
def test_conv2d_gradients_match_loops(backend, seed):
    rng = np.random.default_rng(100 + seed)
    n, c, o = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, k))
    h = int(rng.integers(k + 1, k + 6))
    w = int(rng.integers(k + 1, k + 6))
    x = _rand(rng, n, c, h, w)
    wt = _rand(rng, o, c, k, k)
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    g = _rand(rng, n, o, oh, ow)

    gi = backend.conv2d_grad_input(g, wt, stride, padding, h, w)
    gw = backend.conv2d_grad_weight(g, x, stride, padding, k, k)
    np.testing.assert_allclose(gi, oracles.loop_conv2d_grad_input(g, wt, stride, padding, h, w), atol=1e-5)
    np.testing.assert_allclose(gw, oracles.loop_conv2d_grad_weight(g, x, stride, padding, k, k), atol=1e-5)


@pytest.mark.parametrize("seed", range(6))
def test_convt2d_matches_loops(backend, seed):
    rng = np.random.default_rng(200 + seed)
    n, c, o = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))
    k = int(rng.integers(1, 5))
    stride = int(rng.integers(1, min(k, 3) + 1))
    h = int(rng.integers(1, 6))
    w = int(rng.integers(1, 6))
    x = _rand(rng, n, c, h, w)
    wt = _rand(rng, c, o, k, k)
    got = backend.convt2d_forward(x, wt, stride)
    want = oracles.loop_convt2d(x, wt, stride)
    np.testing.assert_allclose(got, want, atol=1e-5)

    g = _rand(rng, *want.shape)
    gi = backend.convt2d_grad_input(g, wt, stride)
    gw = backend.convt2d_grad_weight(g, x, stride, k, k)
    # adjoint identities give independent closed forms for both gradients:
    # d/dx <convt(x, w), g> is a strided convolution of g with w, and
    # d/dw <convt(x, w), g> correlates x against g.
    want_gi = np.zeros_like(x, dtype=np.float64)
    want_gw = np.zeros((c, o, k, k))
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    for oi in range(wt.shape[1]):
                        for a in range(k):
                            for b in range(k):
                                gval = g[ni, oi, i * stride + a, j * stride + b]
                                want_gi[ni, ci, i, j] += gval * wt[ci, oi, a, b]
                                want_gw[ci, oi, a, b] += gval * x[ni, ci, i, j]
    np.testing.assert_allclose(gi, want_gi, atol=1e-5)
    np.testing.assert_allclose(gw, want_gw, atol=1e-5)


@pytest.mark.parametrize("seed", range(6))
def test_maxpool_matches_loops(backend, seed):
    rng = np.random.default_rng(300 + seed)
    n, c = 2, int(rng.integers(1, 4))
    k = int(rng.integers(2, 4))
    stride = int(rng.integers(1, 3))
    h = int(rng.integers(k, k + 6))
    w = int(rng.integers(k, k + 6))
    x = _rand(rng, n, c, h, w)
    out, idx = backend.maxpool2d_forward(x, k, stride)
    want_out, want_idx = oracles.loop_maxpool2d(x, k, stride)
    np.testing.assert_allclose(out, want_out, atol=0)
    np.testing.assert_array_equal(idx, want_idx)

    g = _rand(rng, *out.shape)
    gx = backend.maxpool2d_backward(g, idx, h, w, k, stride)
    # scatter by the recorded argmax positions
    want_gx = np.zeros((n, c, h, w))
    oh, ow = out.shape[2], out.shape[3]
    for ni in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    a, b = divmod(int(idx[ni, ci, i, j]), k)
                    want_gx[ni, ci, i * stride + a, j * stride + b] += g[ni, ci, i, j]
    np.testing.assert_allclose(gx, want_gx, atol=1e-6)


def test_maxpool_tie_takes_first(backend):
    x = np.zeros((1, 1, 2, 2), dtype=np.float32)  # all equal: index 0 must win
    out, idx = backend.maxpool2d_forward(x, 2, 2)
    assert out.item() == 0.0
    assert idx.item() == 0

    x = np.array([[[[1.0, 5.0], [5.0, 0.0]]]], dtype=np.float32)
    _, idx = backend.maxpool2d_forward(x, 2, 2)
    assert idx.item() == 1  # row-major first max


def test_maxpool_overlapping_backward_accumulates(backend):
    # stride 1 with kernel 2 reuses the centre pixel of a 3x3 input
    x = np.zeros((1, 1, 3, 3), dtype=np.float32)
    x[0, 0, 1, 1] = 10.0
    out, idx = backend.maxpool2d_forward(x, 2, 1)
    g = np.ones_like(out)
    gx = backend.maxpool2d_backward(g, idx, 3, 3, 2, 1)
    assert gx[0, 0, 1, 1] == 4.0  # centre wins all four windows
    assert gx.sum() == 4.0


@pytest.mark.skipif(_fastconv is None, reason="compiled extension not built")
def test_backends_agree_bitwise():
    rng = np.random.default_rng(7)
    for _ in range(10):
        n, c, o = 2, int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, k))
        h = int(rng.integers(k + 1, k + 7))
        w = int(rng.integers(k + 1, k + 7))
        x = _rand(rng, n, c, h, w)
        wt = _rand(rng, o, c, k, k)
        a = reference.conv2d_forward(x, wt, stride, padding)
        b = _fastconv.conv2d_forward(x, wt, stride, padding)
        # both accumulate in float64 and round once to float32
        np.testing.assert_array_equal(a, b)

        g = _rand(rng, *a.shape)
        np.testing.assert_array_equal(
            reference.conv2d_grad_input(g, wt, stride, padding, h, w),
            _fastconv.conv2d_grad_input(g, wt, stride, padding, h, w),
        )
        np.testing.assert_array_equal(
            reference.conv2d_grad_weight(g, x, stride, padding, k, k),
            _fastconv.conv2d_grad_weight(g, x, stride, padding, k, k),
        )


def test_conv2d_rejects_bad_geometry(backend):
    x = np.zeros((1, 2, 4, 4), dtype=np.float32)
    w = np.zeros((3, 1, 2, 2), dtype=np.float32)  # channel mismatch
    with pytest.raises((ValueError, TypeError)):
        backend.conv2d_forward(x, w, 1, 0)
