from __future__ import annotations

from typing import Iterable

import numpy as np

from .ops import sum_squares
from .params import Parameter, ParameterStore
from .tensor import Tensor


def sgd_momentum_step(params: Iterable[Parameter], lr: float, momentum: float = 0.9) -> None:
    """v <- momentum * v + g;  theta <- theta - lr * v."""
    for p in params:
        if p.grad is None:
            continue
        v = p.state.get("momentum")
        v = p.grad.copy() if v is None else momentum * v + p.grad
        p.state["momentum"] = v
        p.data = p.data - lr * v


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        t = int(p.state.get("adam_t", 0)) + 1
        m = p.state.get("adam_m")
        v = p.state.get("adam_v")
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.state.update(adam_t=t, adam_m=m, adam_v=v)


def weight_decay_penalty(store: ParameterStore, groups: tuple[str, ...] | None = None) -> Tensor:
    """Sum of squared weights over decayed parameters (biases excluded).

    Built from tape ops, so its gradient flows in the same backward pass.
    """
    total: Tensor = Tensor(0.0)
    for p in store:
        if p.decay and (groups is None or p.group in groups):
            total = total + sum_squares(p)
    return total
