"""Optimizers over ``Parameter`` lists.

Slot state lives on each parameter's ``optimizer_state`` dict so it survives
snapshot downloads when the protocol is configured to retain it.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .tensor import Parameter


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction; parameters without a gradient
    (frozen or unused this step) are left untouched."""
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        st = p.optimizer_state
        if "m" not in st:
            st["m"] = np.zeros_like(p.tensor.data)
            st["v"] = np.zeros_like(p.tensor.data)
            st["t"] = 0
        st["t"] += 1
        t = st["t"]
        st["m"] = beta1 * st["m"] + (1.0 - beta1) * g
        st["v"] = beta2 * st["v"] + (1.0 - beta2) * (g * g)
        m_hat = st["m"].astype(np.float64) / (1.0 - beta1**t)
        v_hat = st["v"].astype(np.float64) / (1.0 - beta2**t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.data = np.ascontiguousarray(p.tensor.data.astype(np.float64) - update, dtype=np.float32)


def sgd_step(params: Iterable[Parameter], lr: float) -> None:
    for p in params:
        g = p.tensor.grad
        if g is None:
            continue
        p.tensor.data = np.ascontiguousarray(p.tensor.data - np.float32(lr) * g, dtype=np.float32)


class Optimizer:
    def __init__(self, params: Sequence[Parameter], lr: float):
        self.params = list(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        raise NotImplementedError

    def reset_state(self) -> None:
        for p in self.params:
            p.optimizer_state.clear()


class Adam(Optimizer):
    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)


class SGD(Optimizer):
    def step(self) -> None:
        sgd_step(self.params, self.lr)


def make_optimizer(kind: str, params: Sequence[Parameter], lr: float) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")
