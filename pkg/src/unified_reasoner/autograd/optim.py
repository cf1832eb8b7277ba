"""Adam with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    base_lr: float = 3e-4
    warmup_steps: int = 0
    total_steps: int = 1
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def hyper(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in
                ("base_lr", "warmup_steps", "total_steps", "weight_decay", "beta1", "beta2", "epsilon", "step")}


def lr_at(step: int, state: OptimState) -> float:
    """Linear ramp 0 -> base over warmup, then linear decay to 0 at total."""
    if step <= 0 or step >= state.total_steps:
        return 0.0
    if step < state.warmup_steps:
        return state.base_lr * (step / state.warmup_steps)
    span = state.total_steps - state.warmup_steps
    return state.base_lr * ((state.total_steps - step) / span)


def adam_apply(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState,
               lr: Optional[float] = None) -> float:
    """One in-place AdamW update; returns the learning rate used.

    ``lr`` overrides the schedule (used by tests and fixed-rate probes).
    """
    if len(params) != len(grads):
        raise ValueError(f"adam_apply: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    if lr is None:
        lr = lr_at(t, state)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"adam_apply: grad {g.shape} / moment {m.shape} vs param {p.shape}")
        dt = p.data.dtype.type
        m *= dt(b1)
        m += dt(1.0 - b1) * g
        v *= dt(b2)
        v += dt(1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= dt(1.0 - lr * state.weight_decay)
        p.data -= dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.epsilon))
    return lr
