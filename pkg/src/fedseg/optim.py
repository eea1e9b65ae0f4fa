"""Adam optimizer with bias correction.

update at step t:
    m = b1*m + (1-b1)*g
    v = b2*v + (1-b2)*g^2
    p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
"""

from __future__ import annotations

import numpy as np

from .params import ParameterStore


class AdamState:
    def __init__(
        self,
        params: ParameterStore,
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.trainable_items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.trainable_items()}


def adam_step(params: ParameterStore, state: AdamState):
    """One bias-corrected Adam update over all trainable tensors; clears grads."""
    for name, t in params.trainable_items():
        if t.grad is None:
            raise ValueError(f"adam_step: missing gradient on parameter {name!r}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name, t in params.trainable_items():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        t.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        t.grad = np.zeros_like(t.data)
