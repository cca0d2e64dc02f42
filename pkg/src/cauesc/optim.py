"""AdamW with linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Parameter


@dataclass
class OptimizerState:
    learning_rate: float = 2e-5
    warmup_steps: int = 120
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        """Learning rate in effect for 1-based ``step``: linear up, then flat."""
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.learning_rate * step / self.warmup_steps
        return self.learning_rate


def clip_grad_norm(params: list[Parameter], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def optimizer_step(params: list[Parameter], state: OptimizerState) -> OptimizerState:
    """One decoupled-weight-decay Adam update of ``params`` in place.

    Parameters without a gradient (unused by the configured variant) are
    left untouched, moments included.
    """
    state.step_count += 1
    t = state.step_count
    lr = state.lr_at(t)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        key = p.name or str(i)
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        g = p.grad
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[key] = m
        state.second_moment[key] = v
        data = p.data
        if state.weight_decay:
            data = data * (1.0 - lr * state.weight_decay)
        p.data = data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return state
