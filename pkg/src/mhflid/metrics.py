"""Evaluation metrics (plain NumPy, no autodiff graphs).

The messenger disentanglement score follows the server-side diagnostic: take
the final body conv weight, flatten each output filter to a row, L2-normalize
the rows, and measure how far the row Gram matrix is from identity.
"""
from __future__ import annotations

import numpy as np


def accuracy(preds: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"accuracy: shapes {preds.shape} != {labels.shape}")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(preds == labels))


def confusion_matrix(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(num_classes, num_classes) counts, rows = true class, cols = predicted."""
    preds = np.asarray(preds).ravel()
    labels = np.asarray(labels).ravel()
    if preds.shape != labels.shape:
        raise ValueError(f"confusion_matrix: shapes {preds.shape} != {labels.shape}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def macro_f1(preds: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no true or predicted
    instances (or zero precision+recall) contributes 0."""
    cm = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0).astype(np.float64) - tp
    fn = cm.sum(axis=1).astype(np.float64) - tp
    f1 = np.zeros(num_classes, dtype=np.float64)
    denom = 2 * tp + fp + fn
    nz = denom > 0
    f1[nz] = 2 * tp[nz] / denom[nz]
    return float(f1.mean())


def dice_coefficient(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Hard-mask Dice 2|A∩B| / (|A|+|B|) over foreground labels.

    Multi-label maps are averaged over the foreground labels present in
    either mask; two all-background masks score 1.0.
    """
    pred_mask = np.asarray(pred_mask)
    true_mask = np.asarray(true_mask)
    if pred_mask.shape != true_mask.shape:
        raise ValueError(f"dice_coefficient: shapes {pred_mask.shape} != {true_mask.shape}")
    fg = np.union1d(np.unique(pred_mask), np.unique(true_mask))
    fg = fg[fg > 0]
    if fg.size == 0:
        return 1.0
    scores = []
    for cls in fg:
        p = pred_mask == cls
        t = true_mask == cls
        inter = np.logical_and(p, t).sum(dtype=np.float64)
        scores.append(2.0 * inter / (p.sum(dtype=np.float64) + t.sum(dtype=np.float64)))
    return float(np.mean(scores))


def disentanglement(weight: np.ndarray) -> float:
    """|| B_hat @ B_hat^T - I ||_F with B_hat the row-L2-normalized filter matrix."""
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim < 2:
        raise ValueError(f"disentanglement needs a rank>=2 weight, got {weight.shape}")
    b = weight.reshape(weight.shape[0], -1)
    norms = np.linalg.norm(b, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    bhat = b / norms
    gram = bhat @ bhat.T
    return float(np.linalg.norm(gram - np.eye(b.shape[0]), ord="fro"))
