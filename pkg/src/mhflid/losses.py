"""Task losses and the two stage objectives.

The stage objectives are weighted sums with the weights fixed by
``LossWeights`` (defaults 0.9 on the supervised term and 0.1 on the
auxiliary term in both stages).  ``kl_loss`` always detaches its teacher, so
its gradient w.r.t. anything on the teacher side is exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import Model, features_to_tokens
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossWeights:
    local_injection: float = 0.9
    messenger_injection: float = 0.1
    messenger_distillation: float = 0.9
    consistency: float = 0.1


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N, C) logits against integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (N, C) logits, got {logits.data.shape}")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"cross_entropy: label outside [0, {c})")
    onehot = Tensor(np.eye(c, dtype=np.float32)[labels])
    return T.mul(T.tsum(T.mul(T.log_softmax(logits, axis=1), onehot)), -1.0 / n)


def _class_axis_probs(logits: Tensor) -> tuple[int, int]:
    """(class axis, number of distributions) for (N, C) or (N, C, H, W) logits."""
    if logits.ndim == 2:
        return 1, logits.shape[0]
    if logits.ndim == 4:
        n, _, h, w = logits.shape
        return 1, n * h * w
    raise ShapeError(f"expected (N, C) or (N, C, H, W) logits, got {logits.data.shape}")


def kl_loss(student_logits: Tensor, teacher_logits: Tensor, variant: str = "standard") -> Tensor:
    """Consistency term between messenger (student) and local (teacher) outputs.

    ``standard`` is KL(teacher || student) averaged over samples (and pixels
    for dense outputs).  ``appendix`` is the alternative form
    sum_c [p_t log p_t - p_s log p_s], same averaging; it is not a
    divergence (it can be negative) but is kept selectable for fidelity.
    """
    if student_logits.data.shape != teacher_logits.data.shape:
        raise ShapeError(
            f"kl_loss: student {student_logits.data.shape} and teacher {teacher_logits.data.shape} shapes differ"
        )
    axis, denom = _class_axis_probs(student_logits)
    teacher = teacher_logits.detach()
    with T.no_grad():
        lp_t = T.log_softmax(teacher, axis=axis)
        p_t = T.exp(lp_t)
    if variant == "standard":
        lp_s = T.log_softmax(student_logits, axis=axis)
        elem = T.mul(p_t, T.sub(lp_t, lp_s))
    elif variant == "appendix":
        teacher_term = Tensor(p_t.data * lp_t.data)
        lp_s = T.log_softmax(student_logits, axis=axis)
        p_s = T.exp(lp_s)  # derive probabilities from the same log values as
        # the teacher term so identical logits cancel exactly
        elem = T.sub(teacher_term, T.mul(p_s, lp_s))
    else:
        raise ValueError(f"unknown kl variant {variant!r}")
    return T.mul(T.tsum(elem), 1.0 / denom)


def dice_loss(pred_probs: Tensor, true_mask: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Soft Dice loss (1 - mean foreground Dice) of (N, C, H, W) probabilities."""
    if pred_probs.ndim != 4:
        raise ShapeError(f"dice_loss expects (N, C, H, W) probabilities, got {pred_probs.data.shape}")
    n, c, h, w = pred_probs.shape
    true_mask = np.asarray(true_mask)
    if true_mask.shape != (n, h, w):
        raise ShapeError(f"dice_loss: mask shape {true_mask.shape} != {(n, h, w)}")
    if c < 2:
        raise ShapeError("dice_loss needs at least background + 1 foreground class")
    total = None
    for cls in range(1, c):
        p = T.channel(pred_probs, cls)
        m = Tensor((true_mask == cls).astype(np.float32))
        inter = T.tsum(T.mul(p, m))
        denom = T.add(T.add(T.tsum(p), float(m.data.sum(dtype=np.float64))), eps)
        dice = T.div(T.add(T.mul(inter, 2.0), eps), denom)
        total = dice if total is None else T.add(total, dice)
    mean_dice = T.mul(total, 1.0 / (c - 1))
    return T.add(T.mul(mean_dice, -1.0), 1.0)


def task_loss(logits: Tensor, labels: np.ndarray, task: str) -> Tensor:
    if task == "classification":
        return cross_entropy(logits, labels)
    if task == "segmentation":
        return dice_loss(T.softmax(logits, axis=1), labels)
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# stage objectives
# ---------------------------------------------------------------------------


def injection_outputs(x: Tensor, local: Model, messenger: Model, fusion, use_receiver: bool) -> tuple[Tensor, Tensor]:
    """Forward pass of the injection stage: (local logits, messenger-view logits).

    The messenger body runs without a graph (it is frozen during injection);
    gradients flow into the local model and the receiver projections through
    the fused tokens and the frozen messenger head.
    """
    feat_l = local.forward_body(x)
    y_l = local.forward_head(feat_l)
    with T.no_grad():
        mes_feat = messenger.forward_body(x)
    i_mes = features_to_tokens(mes_feat)
    i_loc = features_to_tokens(feat_l)
    fused = fusion.receiver(i_loc, i_mes) if use_receiver else fusion.add_receive(i_loc, i_mes)
    y_m = messenger.forward_head(fused)
    return y_l, y_m


def injection_loss(
    x: Tensor,
    labels: np.ndarray,
    local: Model,
    messenger: Model,
    fusion,
    weights: LossWeights,
    task: str,
    use_receiver: bool = True,
) -> tuple[Tensor, Tensor, Tensor]:
    y_l, y_m = injection_outputs(x, local, messenger, fusion, use_receiver)
    loss = T.add(
        T.mul(task_loss(y_l, labels, task), weights.local_injection),
        T.mul(task_loss(y_m, labels, task), weights.messenger_injection),
    )
    return loss, y_l, y_m


def distillation_outputs(x: Tensor, local: Model, messenger: Model, fusion, use_transmitter: bool) -> tuple[Tensor, Tensor]:
    """Forward pass of the distillation stage: (messenger logits, teacher logits).

    The local model runs without a graph (it is the frozen teacher); gradients
    flow into the messenger body/head and the transmitter projections.
    """
    with T.no_grad():
        feat_l = local.forward_body(x)
        teacher = local.forward_head(feat_l)
        i_loc = features_to_tokens(feat_l)
    mes_feat = messenger.forward_body(x)
    i_mes = features_to_tokens(mes_feat)
    fused = fusion.transmitter(i_loc, i_mes) if use_transmitter else fusion.add_transmit(i_loc, i_mes)
    y_m = messenger.forward_head(fused)
    return y_m, teacher


def distillation_loss(
    x: Tensor,
    labels: np.ndarray,
    local: Model,
    messenger: Model,
    fusion,
    weights: LossWeights,
    task: str,
    kl_variant: str = "standard",
    use_transmitter: bool = True,
) -> tuple[Tensor, Tensor, Tensor]:
    y_m, teacher = distillation_outputs(x, local, messenger, fusion, use_transmitter)
    loss = T.add(
        T.mul(task_loss(y_m, labels, task), weights.messenger_distillation),
        T.mul(kl_loss(y_m, teacher, kl_variant), weights.consistency),
    )
    return loss, y_m, teacher
