"""Adam optimizer over a named parameter registry."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.dims:
            raise ShapeError(f"gradient for {name} has dims {g.shape}, parameter has {p.dims}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.dims:
            raise ShapeError(f"Adam moments for {name} have dims {m.shape}, parameter has {p.dims}")
        dt = p.data.dtype.type
        m = dt(b1) * m + dt(1.0 - b1) * g
        v = dt(b2) * v + dt(1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        mhat = m / dt(c1)
        vhat = v / dt(c2)
        p.data = (p.data - dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, **kwargs):
        self.params = dict(params)
        self.state = AdamState(lr=lr, **kwargs)

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
