"""Adam with decoupled-from-loss L2 weight regularization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .tensor import ParameterStore


def is_weight(name: str) -> bool:
    """True for convolution/linear kernels; biases and norm scale/shift are not regularized."""
    return name.endswith("/weight")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParameterStore, state: AdamState, lr: float, l2: float = 0.0) -> AdamState:
    """Apply one bias-corrected Adam update using the ``.grad`` of every parameter.

    L2 regularization enters as an extra gradient term ``2 * l2 * w`` on
    weight kernels.  All gradients are validated before anything is modified,
    so a NaN leaves parameters and state untouched.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    grads = {}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"no gradient for parameter {name!r}")
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        g = p.grad
        if l2 and is_weight(name):
            g = g + (2.0 * l2) * p.data
        grads[name] = g

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr:
            step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
            p.data -= step.astype(p.dtype, copy=False)
    return state
