"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ContractError
from .tensor import DTYPE, Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("learning_rate", "beta1", "beta2", "epsilon", "weight_decay"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")


def _named(params) -> Mapping[str, Tensor]:
    if isinstance(params, Mapping):
        return params
    return {(p.name or str(i)): p for i, p in enumerate(params)}


def adam_step(state: OptimizerState, params) -> None:
    """Apply one bias-corrected Adam update in place, then clear the grads."""
    named = _named(params)
    for name, p in named.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in named.items():
        g = p.grad.astype(np.float64)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros(p.dims)
            v = np.zeros(p.dims)
        if m.shape != p.dims:
            raise ContractError(f"moment buffers of {name!r} do not match dims {p.dims}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        w = p.values.astype(np.float64)
        if state.weight_decay:
            w = w - state.learning_rate * state.weight_decay * w
        p.values = (w - state.learning_rate * update).astype(DTYPE)
        p.grad = None


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale grads so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    named = _named(params)
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                              for p in named.values() if p.grad is not None)))
    if max_norm > 0 and total > max_norm:
        scale = DTYPE(max_norm / (total + 1e-12))
        for p in named.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


class Adam:
    """Thin stateful wrapper binding parameters to an :class:`OptimizerState`."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = _named(params)
        self.state = OptimizerState(lr, betas[0], betas[1], eps, weight_decay)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adam_step(self.state, self.params)
