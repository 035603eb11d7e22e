"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from tmsp.core.tensor import Tensor
from tmsp.errors import ArgumentError, DimensionError


@dataclass
class OptimizerState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm is None or max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / (total + 1e-12)
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}, total


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float | None = None,
) -> tuple[dict[str, Tensor], OptimizerState]:
    """One Adam update. Returns fresh parameter tensors and a new state.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    if state.step < 0:
        raise ArgumentError(f"optimizer step must be >= 0, got {state.step}")
    lr = state.lr if lr is None else lr
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        m = m.astype(p.dtype, copy=False)
        v = v.astype(p.dtype, copy=False)
        update = (lr / c1) * m / (np.sqrt(v / dt(c2)) + dt(state.eps))
        new_params[name] = Tensor(p.data - update.astype(p.dtype, copy=False), requires_grad=p.requires_grad, dtype=p.dtype)
        new_m[name] = m
        new_v[name] = v
    new_state = OptimizerState(lr=state.lr, beta1=b1, beta2=b2, eps=state.eps, step=t, m=new_m, v=new_v)
    return new_params, new_state
