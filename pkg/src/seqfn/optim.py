"""Adam with bias correction, and global-norm gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import NonFiniteError


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def _array(p) -> np.ndarray:
    # ndarray also has a .data attribute (a memoryview), so test for the array first
    return p if isinstance(p, np.ndarray) else p.data


def adam_step(params: Mapping, grads: Mapping[str, np.ndarray | None], state: OptimState):
    """One in-place Adam update of every named parameter.

    ``params`` maps names to Tensors or arrays; a missing or None gradient
    counts as zero. Nothing is modified if any gradient is non-finite.
    Returns ``(params, state)``.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}", name=name)

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        w = _array(p)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        if m.shape != w.shape:
            raise ValueError(f"optimizer moment shape {m.shape} != parameter shape {w.shape} for {name!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        w -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads: Mapping[str, np.ndarray | None], max_norm: float) -> tuple[float, bool]:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping and whether clipping happened.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values() if g is not None))
    if total > max_norm and math.isfinite(total):
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= scale
        return total, True
    return total, False
