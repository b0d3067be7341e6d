"""Autodiff engine: gradients against finite differences, graph semantics,
shape discipline, and the freeze switch."""
from __future__ import annotations

import numpy as np
import pytest
import scipy.special

import gradcheck_defs
import oracles
from mhflid import ShapeError, Tensor, no_grad, set_debug_checks
from mhflid import tensor as T


@pytest.mark.parametrize("case", sorted(gradcheck_defs.CASES))
@pytest.mark.parametrize("seed", [0, 1])
def test_gradcheck(case, seed):
    gradcheck_defs.run_gradcheck(case, seed)


# --- graph semantics ---------------------------------------------------------


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_backward_frees_graph_and_clears_intermediates():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    y = x * 2.0
    loss = y.sum()
    loss.backward()
    assert x.grad is not None and np.allclose(x.grad, 2.0)
    assert y.grad is None  # intermediate grads cleared
    assert y._parents == () and y._backward is None  # graph dropped


def test_grad_accumulates_across_graphs():
    x = Tensor(np.full(3, 2.0, dtype=np.float32), requires_grad=True)
    (x * 1.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, 4.0)
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    y = x * x  # d/dx = 2x through two paths
    y.sum().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad
    z = (x * 2.0).sum()
    assert z.requires_grad
    z.backward()
    np.testing.assert_allclose(x.grad, 2.0)


def test_detach_cuts_gradient_flow():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    (x.detach() * 5.0 + x).sum().backward()
    np.testing.assert_allclose(x.grad, 1.0)  # only the direct path counts


def test_frozen_leaf_gets_no_gradient():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones(3, dtype=np.float32), requires_grad=False)
    (x * w).sum().backward()
    assert x.grad is not None
    assert w.grad is None


# --- shape discipline --------------------------------------------------------


def test_no_implicit_broadcasting():
    a = Tensor(np.ones((3, 4), dtype=np.float32))
    b = Tensor(np.ones(4, dtype=np.float32))
    for op in (T.add, T.sub, T.mul):
        with pytest.raises(ShapeError):
            op(a, b)
    with pytest.raises(ShapeError):
        T.div(a, Tensor(np.ones((1, 4), dtype=np.float32)))


def test_scalar_arithmetic_allowed():
    a = Tensor(np.full((2, 2), 4.0, dtype=np.float32))
    assert np.allclose((a + 1.0).data, 5.0)
    assert np.allclose((a * 0.5).data, 2.0)
    assert np.allclose((a / 2.0).data, 2.0)
    assert np.allclose((1.0 - a).data, -3.0)
    assert np.allclose((-a).data, -4.0)


def test_expand_rejects_non_unit_axis():
    a = Tensor(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        T.expand(a, 1, 5)


def test_matmul_rejects_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3), dtype=np.float32)), Tensor(np.ones((4, 2), dtype=np.float32)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 2, 3), dtype=np.float32)), Tensor(np.ones((3, 3, 2), dtype=np.float32)))


def test_conv2d_channel_mismatch():
    x = Tensor(np.ones((1, 2, 4, 4), dtype=np.float32))
    w = Tensor(np.ones((3, 1, 2, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        T.conv2d(x, w, None)


def test_gradient_shape_checked():
    t = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(ShapeError):
        T._accum(t, np.ones(3, dtype=np.float32))


# --- numeric behaviour -------------------------------------------------------


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    x = Tensor((rng.standard_normal((8, 7)) * 20).astype(np.float32))
    s = T.softmax(x, axis=-1)
    np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-6)
    assert (s.data >= 0).all()


def test_softmax_sum_has_zero_gradient():
    # sum of a softmax row is identically 1, so its gradient must vanish
    x = Tensor(np.random.default_rng(1).standard_normal((4, 5)).astype(np.float32), requires_grad=True)
    T.tsum(T.softmax(x, axis=-1)).backward()
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-6)


def test_log_softmax_matches_scipy():
    rng = np.random.default_rng(2)
    x = (rng.standard_normal((6, 9)) * 15).astype(np.float32)
    got = T.log_softmax(Tensor(x), axis=-1).data
    want = scipy.special.log_softmax(x.astype(np.float64), axis=-1)
    np.testing.assert_allclose(got, want, atol=1e-5)


def test_softmax_shift_invariant():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 6)).astype(np.float32)
    a = T.softmax(Tensor(x), axis=-1).data
    b = T.softmax(Tensor(x + 37.0), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_softmax_stable_under_large_logits():
    x = Tensor(np.array([[1000.0, 1000.0, -1000.0]], dtype=np.float32))
    s = T.softmax(x, axis=-1).data
    np.testing.assert_allclose(s, [[0.5, 0.5, 0.0]], atol=1e-7)


def test_debug_checks_catch_nonfinite():
    x = Tensor(np.array([1000.0], dtype=np.float32))
    with np.errstate(over="ignore"):
        with pytest.raises(FloatingPointError):
            T.exp(x)
        set_debug_checks(False)
        out = T.exp(x)
    assert np.isinf(out.data).all()


def test_matmul_f64_accumulation():
    # catastrophic cancellation survives because the reduction runs in f64
    a = np.array([[1e7, 1.0, -1e7]], dtype=np.float32)
    b = np.array([[1.0], [1.0], [1.0]], dtype=np.float32)
    out = T.matmul(Tensor(a), Tensor(b))
    assert out.data.item() == 1.0


# --- batch normalization -----------------------------------------------------


def test_batchnorm_constant_batch_outputs_beta():
    x = Tensor(np.full((4, 3), 7.0, dtype=np.float32), requires_grad=True)
    gamma = Tensor(np.full(3, 2.0, dtype=np.float32))
    beta = Tensor(np.array([1.0, -1.0, 0.5], dtype=np.float32))
    rm, rv = np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32)
    out = T.batchnorm1d(x, gamma, beta, rm, rv, training=True)
    np.testing.assert_allclose(out.data, np.tile(beta.data, (4, 1)), atol=1e-2)


def test_batchnorm_train_normalizes_with_biased_variance():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((16, 5)).astype(np.float32) * 3 + 2
    gamma = Tensor(np.ones(5, dtype=np.float32))
    beta = Tensor(np.zeros(5, dtype=np.float32))
    rm, rv = np.zeros(5, dtype=np.float32), np.ones(5, dtype=np.float32)
    out = T.batchnorm1d(Tensor(x), gamma, beta, rm, rv, training=True)
    want = oracles.ref_batchnorm_train(x, np.ones(5), np.zeros(5))
    np.testing.assert_allclose(out.data, want, atol=1e-5)
    # buffers blend by momentum 0.1, variance stored unbiased
    x64 = x.astype(np.float64)
    np.testing.assert_allclose(rm, 0.1 * x64.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x64.var(axis=0, ddof=1), atol=1e-6)


def test_batchnorm_eval_uses_buffers_and_leaves_them_alone():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    rm = rng.standard_normal(4).astype(np.float32)
    rv = (np.abs(rng.standard_normal(4)) + 0.5).astype(np.float32)
    rm0, rv0 = rm.copy(), rv.copy()
    gamma = Tensor((rng.standard_normal(4)).astype(np.float32))
    beta = Tensor((rng.standard_normal(4)).astype(np.float32))
    out = T.batchnorm1d(Tensor(x), gamma, beta, rm, rv, training=False)
    want = gamma.data.astype(np.float64) * (x - rm0) / np.sqrt(rv0.astype(np.float64) + 1e-5) + beta.data
    np.testing.assert_allclose(out.data, want, atol=1e-5)
    np.testing.assert_array_equal(rm, rm0)
    np.testing.assert_array_equal(rv, rv0)


def test_batchnorm_train_rejects_single_sample():
    x = Tensor(np.ones((1, 3), dtype=np.float32))
    g = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.zeros(3, dtype=np.float32))
    with pytest.raises(ShapeError):
        T.batchnorm1d(x, g, b, np.zeros(3, dtype=np.float32), np.ones(3, dtype=np.float32), training=True)


# --- parameters and freezing -------------------------------------------------


def test_parameter_freeze_roundtrip():
    p = T.Parameter("w", Tensor(np.ones(2, dtype=np.float32), requires_grad=True))
    p.freeze()
    assert not p.tensor.requires_grad
    p.unfreeze()
    assert p.tensor.requires_grad


def test_buffer_never_unfreezes():
    buf = T.Parameter("rm", Tensor(np.zeros(2, dtype=np.float32)), trainable=False)
    buf.unfreeze()
    assert not buf.tensor.requires_grad


def test_frozen_parameter_untouched_by_training_step():
    from mhflid.optim import Adam

    w = T.Parameter("w", Tensor(np.ones(3, dtype=np.float32), requires_grad=True))
    frozen = T.Parameter("f", Tensor(np.ones(3, dtype=np.float32), requires_grad=True))
    frozen.freeze()
    before = frozen.tensor.data.copy()
    opt = Adam([w, frozen], lr=0.1)
    loss = T.tsum(w.tensor * frozen.tensor)
    loss.backward()
    opt.step()
    assert frozen.tensor.grad is None
    np.testing.assert_array_equal(frozen.tensor.data, before)
    assert not np.array_equal(w.tensor.data, np.ones(3, dtype=np.float32))
