"""Task losses, the consistency term, and the two stage objectives."""
from __future__ import annotations

import numpy as np
import pytest
import scipy.special

import oracles
from mhflid import ShapeError, Tensor
from mhflid import tensor as T
from mhflid.losses import (
    LossWeights,
    cross_entropy,
    dice_loss,
    distillation_loss,
    injection_loss,
    kl_loss,
    task_loss,
)
from mhflid.metrics import dice_coefficient


def test_uniform_logits_give_log_c():
    for c in (2, 3, 7):
        logits = Tensor(np.zeros((5, c), dtype=np.float32))
        labels = np.arange(5) % c
        assert abs(cross_entropy(logits, labels).item() - np.log(c)) < 1e-6


def test_cross_entropy_matches_scipy():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((16, 4)).astype(np.float32)
    labels = rng.integers(0, 4, 16)
    got = cross_entropy(Tensor(logits), labels).item()
    lp = scipy.special.log_softmax(logits.astype(np.float64), axis=1)
    want = -lp[np.arange(16), labels].mean()
    assert abs(got - want) < 1e-6


def test_cross_entropy_validates_labels():
    logits = Tensor(np.zeros((3, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        cross_entropy(logits, np.array([0, 1, 2]))
    with pytest.raises(ShapeError):
        cross_entropy(logits, np.array([0, -1, 1]))
    with pytest.raises(ShapeError):
        cross_entropy(logits, np.array([0, 1]))


def test_perfect_prediction_drives_ce_to_zero():
    logits = np.full((4, 3), -50.0, dtype=np.float32)
    labels = np.array([0, 1, 2, 1])
    logits[np.arange(4), labels] = 50.0
    assert cross_entropy(Tensor(logits), labels).item() < 1e-6


# --- consistency term -------------------------------------------------------


@pytest.mark.parametrize("variant", ["standard", "appendix"])
def test_kl_of_identical_logits_is_zero(variant):
    rng = np.random.default_rng(1)
    for shape in [(8, 5), (2, 3, 4, 4)]:
        x = (rng.standard_normal(shape) * 5).astype(np.float32)
        assert kl_loss(Tensor(x), Tensor(x), variant).item() == 0.0


def test_standard_kl_matches_scipy_and_is_nonnegative():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((10, 6)).astype(np.float32)
    t = rng.standard_normal((10, 6)).astype(np.float32)
    got = kl_loss(Tensor(s), Tensor(t), "standard").item()
    p_t = scipy.special.softmax(t.astype(np.float64), axis=1)
    lp_t = scipy.special.log_softmax(t.astype(np.float64), axis=1)
    lp_s = scipy.special.log_softmax(s.astype(np.float64), axis=1)
    want = (p_t * (lp_t - lp_s)).sum(axis=1).mean()
    assert abs(got - want) < 1e-5
    assert got > 0


def test_appendix_variant_matches_formula_and_can_go_negative():
    rng = np.random.default_rng(3)
    s = rng.standard_normal((12, 4)).astype(np.float32)
    t = rng.standard_normal((12, 4)).astype(np.float32)
    got = kl_loss(Tensor(s), Tensor(t), "appendix").item()
    p_t = scipy.special.softmax(t.astype(np.float64), axis=1)
    lp_t = scipy.special.log_softmax(t.astype(np.float64), axis=1)
    p_s = scipy.special.softmax(s.astype(np.float64), axis=1)
    lp_s = scipy.special.log_softmax(s.astype(np.float64), axis=1)
    want = (p_t * lp_t - p_s * lp_s).sum(axis=1).mean()
    assert abs(got - want) < 1e-5

    # a peaked student against a flat teacher makes the alternative form negative
    flat_t = np.zeros((1, 4), dtype=np.float32)
    peaked_s = np.array([[40.0, -40.0, -40.0, -40.0]], dtype=np.float32)
    assert kl_loss(Tensor(peaked_s), Tensor(flat_t), "appendix").item() < 0


def test_kl_teacher_receives_no_gradient():
    rng = np.random.default_rng(4)
    s = Tensor(rng.standard_normal((6, 3)).astype(np.float32), requires_grad=True)
    t = Tensor(rng.standard_normal((6, 3)).astype(np.float32), requires_grad=True)
    kl_loss(s, t, "standard").backward()
    assert s.grad is not None and np.abs(s.grad).max() > 0
    assert t.grad is None


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    s = rng.standard_normal((4, 3)).astype(np.float32)
    t = rng.standard_normal((4, 3)).astype(np.float32)
    st = Tensor(s, requires_grad=True)
    kl_loss(st, Tensor(t), "standard").backward()

    def f(sv):
        p_t = scipy.special.softmax(t.astype(np.float64), axis=1)
        lp_t = scipy.special.log_softmax(t.astype(np.float64), axis=1)
        lp_s = scipy.special.log_softmax(sv, axis=1)
        return float((p_t * (lp_t - lp_s)).sum() / 4)

    fd = oracles.fd_grad(f, [s])[0]
    assert oracles.rel_err(st.grad, fd) < 1e-3


def test_kl_rejects_shape_mismatch_and_unknown_variant():
    a = Tensor(np.zeros((2, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        kl_loss(a, Tensor(np.zeros((3, 2), dtype=np.float32)))
    with pytest.raises(ValueError):
        kl_loss(a, a, "reverse")


def test_kl_dense_averages_over_pixels():
    # dense logits divide by N*H*W: constant-per-pixel case equals the 2D case
    rng = np.random.default_rng(6)
    s2 = rng.standard_normal((3, 4)).astype(np.float32)
    t2 = rng.standard_normal((3, 4)).astype(np.float32)
    s4 = np.repeat(s2[:, :, None], 6, axis=2).reshape(3, 4, 2, 3).astype(np.float32)
    t4 = np.repeat(t2[:, :, None], 6, axis=2).reshape(3, 4, 2, 3).astype(np.float32)
    a = kl_loss(Tensor(s2), Tensor(t2)).item()
    b = kl_loss(Tensor(s4), Tensor(t4)).item()
    assert abs(a - b) < 1e-6


# --- dice -------------------------------------------------------------------


def test_dice_loss_complements_hard_dice_on_hard_masks():
    rng = np.random.default_rng(7)
    for _ in range(5):
        mask = rng.integers(0, 2, (2, 6, 6))
        pred = rng.integers(0, 2, (2, 6, 6))
        if pred.sum() == 0 or mask.sum() == 0:
            continue
        probs = np.stack([(pred == 0), (pred == 1)], axis=1).astype(np.float32)
        loss = dice_loss(Tensor(probs), mask).item()
        # dice_coefficient averages per image; the soft loss is global, so
        # compare against the global hard dice
        inter = np.logical_and(pred == 1, mask == 1).sum()
        hard = 2.0 * inter / ((pred == 1).sum() + (mask == 1).sum())
        assert abs(loss - (1.0 - hard)) < 1e-5


def test_dice_loss_perfect_prediction_is_zero():
    mask = np.zeros((1, 4, 4), dtype=np.int64)
    mask[0, 1:3, 1:3] = 1
    probs = np.stack([(mask == 0), (mask == 1)], axis=1).astype(np.float32)
    assert dice_loss(Tensor(probs), mask).item() < 1e-5


def test_dice_loss_validates_shapes():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 2, 4), dtype=np.float32)), np.zeros((1, 4, 4)))
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32)), np.zeros((1, 5, 5)))
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 1, 4, 4), dtype=np.float32)), np.zeros((1, 4, 4)))


def test_dice_loss_gradient_flows():
    rng = np.random.default_rng(8)
    logits = Tensor(rng.standard_normal((2, 2, 4, 4)).astype(np.float32), requires_grad=True)
    mask = rng.integers(0, 2, (2, 4, 4))
    task_loss(logits, mask, "segmentation").backward()
    assert logits.grad is not None and np.abs(logits.grad).max() > 0


def test_task_loss_dispatch():
    with pytest.raises(ValueError):
        task_loss(Tensor(np.zeros((1, 2), dtype=np.float32)), np.zeros(1, dtype=np.int64), "regression")


def test_dice_coefficient_prefers_true_overlap():
    a = np.zeros((4, 4), dtype=np.int64)
    a[:2] = 1
    assert dice_coefficient(a, a) == 1.0
    b = np.zeros((4, 4), dtype=np.int64)
    b[2:] = 1
    assert dice_coefficient(a, b) == 0.0
    assert dice_coefficient(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


# --- stage objectives --------------------------------------------------------


def _tiny_setup(seed=0):
    from mhflid.fusion import FusionProjections
    from mhflid.models import build_model, classification_messenger, tiny_convnet

    local = build_model(tiny_convnet(2, 3, (1, 16, 16)), seed=seed)
    messenger = build_model(classification_messenger(3, (1, 16, 16)), seed=seed + 50, prefix="mes.")
    fusion = FusionProjections(local.d_body, messenger.d_body, seed=seed + 99)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((4, 1, 16, 16)).astype(np.float32))
    labels = rng.integers(0, 3, 4)
    return local, messenger, fusion, x, labels


def test_injection_loss_is_stated_mixture():
    local, messenger, fusion, x, labels = _tiny_setup()
    messenger.eval()
    w = LossWeights()
    loss, y_l, y_m = injection_loss(x, labels, local, messenger, fusion, w, "classification")
    part_l = cross_entropy(Tensor(y_l.data), labels).item()
    part_m = cross_entropy(Tensor(y_m.data), labels).item()
    assert abs(loss.item() - (0.9 * part_l + 0.1 * part_m)) < 1e-5


def test_distillation_loss_is_stated_mixture():
    local, messenger, fusion, x, labels = _tiny_setup(1)
    local.eval()
    w = LossWeights()
    loss, y_m, teacher = distillation_loss(x, labels, local, messenger, fusion, w, "classification")
    part_task = cross_entropy(Tensor(y_m.data), labels).item()
    part_kl = kl_loss(Tensor(y_m.data), Tensor(teacher.data)).item()
    assert abs(loss.item() - (0.9 * part_task + 0.1 * part_kl)) < 1e-5


def test_injection_gradients_stay_out_of_messenger():
    local, messenger, fusion, x, labels = _tiny_setup(2)
    messenger.eval()
    for p in messenger.parameters():
        p.freeze()
    loss, _, _ = injection_loss(x, labels, local, messenger, fusion, LossWeights(), "classification")
    loss.backward()
    assert all(p.tensor.grad is None for p in messenger.parameters())
    assert any(p.tensor.grad is not None for p in local.parameters())
    assert all(p.tensor.grad is not None for p in fusion.receiver_params())


def test_distillation_gradients_stay_out_of_local_and_adapter():
    local, messenger, fusion, x, labels = _tiny_setup(3)
    local.eval()
    for p in local.parameters():
        p.freeze()
    for p in fusion.receiver_params():
        p.freeze()
    loss, _, _ = distillation_loss(x, labels, local, messenger, fusion, LossWeights(), "classification")
    loss.backward()
    assert all(p.tensor.grad is None for p in local.parameters())
    assert all(p.tensor.grad is None for p in fusion.receiver_params())
    assert any(p.tensor.grad is not None for p in messenger.parameters())
    assert all(p.tensor.grad is not None for p in fusion.transmitter_params())
