"""Central finite differences as an independent check on :func:`backward`."""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Mapping

import numpy as np

from tmsp.core import tensor as _tensor
from tmsp.core.tensor import Tensor, backward
from tmsp.errors import ArgumentError


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, computed in float64."""
    if h <= 0:
        raise ArgumentError(f"step h must be positive, got {h}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(Tensor(base, dtype=np.float64)))
        flat[i] = orig - h
        fm = _scalar(f(Tensor(base, dtype=np.float64)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data.reshape(-1)[0])
    return float(v)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` with the Euclidean norm."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-6,
) -> dict[str, float]:
    """Relative error between backward and finite differences for each named input.

    ``f`` receives a mapping of float64 tensors (all requiring grad) and must
    return a scalar tensor.
    """
    leaves = {k: Tensor(v, requires_grad=True, dtype=np.float64) for k, v in inputs.items()}
    out = f(leaves)
    grads = backward(out)
    errors = {}
    for name, leaf in leaves.items():
        analytic = grads.get(leaf, np.zeros(leaf.shape))

        def partial(t: Tensor, _name=name) -> Tensor:
            args = dict(leaves)
            args[_name] = t
            return f(args)

        errors[name] = relative_error(analytic, finite_diff_grad(partial, leaf, h))
    return errors


@contextlib.contextmanager
def corrupt_op(name: str) -> Iterator[None]:
    """Scale the backward of every op tagged ``name`` (negative-control hook)."""
    _tensor._corrupted.add(name)
    try:
        yield
    finally:
        _tensor._corrupted.discard(name)
