"""AdamW with decoupled weight decay over named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> "OptimizerState":
        state = cls(**hyper)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adamw_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """Apply one update using each parameter's ``.grad`` (missing grad counts as zero)."""
    state.step += 1
    lr, wd = state.learning_rate, state.weight_decay
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**state.step
    bias2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if wd:
            p.data *= p.data.dtype.type(1.0 - lr * wd)
        update = (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        p.data -= p.data.dtype.type(lr) * update.astype(p.data.dtype, copy=False)


def zero_grad(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
