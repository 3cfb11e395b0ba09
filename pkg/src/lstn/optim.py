"""Adam with bias correction, one state object per parameter."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(param: Tensor, state: AdamState) -> None:
    """Apply one Adam update to ``param`` in place using ``param.grad``."""
    if param.grad is None:
        raise UsageError(f"adam_step: parameter {param.name or ''} has no gradient")
    if state.m.shape != param.shape or state.v.shape != param.shape:
        raise DimensionError(f"adam_step: state shape {state.m.shape} != parameter shape {param.shape}")
    g = param.grad.astype(param.dtype, copy=False)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * (g * g)
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    m_hat = state.m / bc1
    v_hat = state.v / bc2
    param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(param.dtype)


@dataclass
class Adam:
    """Convenience wrapper holding named parameters and their states."""

    params: dict[str, Tensor]
    lr: float = 1e-3
    states: dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        for key, p in self.params.items():
            self.states.setdefault(key, AdamState.for_param(p, lr=self.lr))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, skip: frozenset[str] = frozenset()) -> None:
        for key, p in self.params.items():
            if key in skip:
                continue
            adam_step(p, self.states[key])
