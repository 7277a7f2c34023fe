"""Bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import NdiffError


class NonFiniteGradientError(NdiffError, FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """Update ``params`` in place from ``grads``; returns ``(params, state)``.

    Raises NonFiniteGradientError naming the offending tensors before touching
    anything.
    """
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(f"non-finite gradients in {bad}")
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise NdiffError(f"gradient shape {g.shape} does not match parameter {k} {params[k].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        p = params[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype)
    return params, state


class Adam:
    """Adam bound to a Sequential's parameter arrays."""

    def __init__(self, graph, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.graph = graph
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        params = self.graph.parameters()
        adam_step(params, self.graph.gradients(), self.state)
        self.graph.zero_grad()
