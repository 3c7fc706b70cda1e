"""Adam optimizer over Param objects.

Bias-corrected first/second moment estimates per parameter, fixed
decay constants beta1=0.9, beta2=0.999, eps=1e-8.  `adam_step` applies
one update in place and zeroes gradients afterwards.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tape import NumericError, Param

__all__ = ["AdamState", "adam_step"]


class AdamState:
    """Per-parameter moment buffers plus a shared step counter."""

    beta1 = 0.9
    beta2 = 0.999
    eps = 1e-8

    def __init__(self, params: Sequence[Param]) -> None:
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique for optimizer state")
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}
        self.step_count = 0


def adam_step(params: Sequence[Param], state: AdamState, lr: float) -> None:
    """One in-place Adam update; gradients are zeroed afterwards.

    lr=0 leaves every parameter unchanged (moments still advance).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in params:
        g = p.grad
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.value -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.zero_grad()
