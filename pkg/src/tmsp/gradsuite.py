"""Float64 finite-difference suite: every differentiable op and every model parameter group."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from tmsp.core import (
    adaptive_avg_pool1d,
    adaptive_max_pool1d,
    bce_loss,
    check_gradients,
    concat,
    conv1d,
    gelu,
    layer_norm,
    linear_resample,
    precision,
    relative_error,
    scaled_dot_attention,
    sigmoid,
    softmax,
    tanh,
)
from tmsp.core.tensor import Tensor, backward, exp, log, matmul, relu
from tmsp.model import ModelConfig, ModelParams, collate, forward_loss, init_params
from tmsp.training import prepare
from tmsp.world import WorldConfig, generate_episodes

ELEMENTWISE_TOL = 1e-4
STRUCTURED_TOL = 1e-3

TINY_CONFIG = ModelConfig(
    d_model=8,
    n_layers=2,
    n_heads=2,
    d_ff=16,
    d_trm=4,
    dropout=0.0,
    kernel_size=3,
    txt_dim=8,
    coord_freqs=(1.0, 2.0),
)


@dataclass(frozen=True)
class Check:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _ab(shape=(3, 4)):
    return lambda rng: {"a": rng.normal(size=shape), "b": rng.normal(size=shape)}


# name -> (loss builder, input sampler, tolerance); names match the op tags used by corrupt_op
OP_CASES: dict[str, tuple[Callable, Callable, float]] = {
    "add": (lambda p: ((p["a"] + p["b"]) ** 2).sum(), _ab(), ELEMENTWISE_TOL),
    "sub": (lambda p: ((p["a"] - p["b"]) ** 2).sum(), _ab(), ELEMENTWISE_TOL),
    "mul": (lambda p: (p["a"] * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "div": (lambda p: (p["a"] / (p["b"] * p["b"] + 1.0)).sum(), _ab(), ELEMENTWISE_TOL),
    "neg": (lambda p: ((-p["a"]) * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "pow": (lambda p: ((p["a"] ** 3) * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "exp": (lambda p: (exp(p["a"] * 0.5) * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "log": (lambda p: (log(p["a"] * p["a"] + 1.0) * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "tanh": (lambda p: (tanh(p["a"]) * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "sigmoid": (lambda p: (sigmoid(p["a"]) * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "relu": (lambda p: (relu(p["a"] + 0.05) * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "gelu": (lambda p: (gelu(p["a"]) * p["b"]).sum(), _ab(), ELEMENTWISE_TOL),
    "sum": (lambda p: (p["a"].sum(axis=0) ** 2).sum() + p["b"].sum(), _ab(), ELEMENTWISE_TOL),
    "mean": (lambda p: (p["a"].mean(axis=1) ** 2).sum() + p["b"].mean(), _ab(), ELEMENTWISE_TOL),
    "reshape": (lambda p: (p["a"].reshape(4, 3) ** 2).sum() + p["b"].sum(), _ab(), ELEMENTWISE_TOL),
    "transpose": (lambda p: (p["a"].T * p["b"].T).sum(), _ab(), ELEMENTWISE_TOL),
    "getitem": (lambda p: (p["a"][:, 1:3] ** 2).sum() + p["b"][0].sum(), _ab(), ELEMENTWISE_TOL),
    "concat": (lambda p: (concat([p["a"], p["b"]], axis=0) ** 2).sum(), _ab(), ELEMENTWISE_TOL),
    "matmul": (
        lambda p: (matmul(p["a"], p["b"]) ** 2).sum(),
        lambda rng: {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=(5, 3))},
        STRUCTURED_TOL,
    ),
    "softmax": (lambda p: (softmax(p["a"], axis=-1) * p["b"]).sum(), _ab(), STRUCTURED_TOL),
    "conv1d": (
        lambda p: (conv1d(p["a"], p["b"], padding=1) ** 2).sum(),
        lambda rng: {"a": rng.normal(size=(8, 24)), "b": rng.normal(size=(4, 8, 3))},
        STRUCTURED_TOL,
    ),
    "adaptive_avg_pool1d": (
        lambda p: (adaptive_avg_pool1d(p["a"], 3) * p["b"]).sum(),
        lambda rng: {"a": rng.normal(size=(2, 7)), "b": rng.normal(size=(2, 3))},
        STRUCTURED_TOL,
    ),
    "adaptive_max_pool1d": (
        lambda p: (adaptive_max_pool1d(p["a"], 3) * p["b"]).sum(),
        lambda rng: {"a": rng.normal(size=(2, 7)), "b": rng.normal(size=(2, 3))},
        STRUCTURED_TOL,
    ),
    "linear_resample": (
        lambda p: (linear_resample(p["a"], 6) * p["b"]).sum(),
        lambda rng: {"a": rng.normal(size=(2, 9)), "b": rng.normal(size=(2, 6))},
        STRUCTURED_TOL,
    ),
    "layer_norm": (
        lambda p: (layer_norm(p["a"], p["b"][0], p["b"][1]) ** 2 * p["b"][2]).sum(),
        lambda rng: {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=(3, 5))},
        STRUCTURED_TOL,
    ),
    "attention": (
        lambda p: (scaled_dot_attention(p["a"], p["b"], p["b"] * 0.5) ** 2).sum(),
        lambda rng: {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(4, 3))},
        STRUCTURED_TOL,
    ),
    "bce_loss": (
        lambda p: bce_loss(sigmoid(p["a"]), np.array([[1.0, 0.0, 1.0, 0.0]] * 3)) + (p["b"] ** 2).sum(),
        _ab(),
        STRUCTURED_TOL,
    ),
}


def op_checks(seed: int = 0, instances: int = 3, h: float = 1e-6) -> list[Check]:
    """Worst relative error of each op over a few random instances."""
    out = []
    with precision(np.float64):
        for name, (fn, sample, tol) in OP_CASES.items():
            worst = 0.0
            for i in range(instances):
                rng = np.random.default_rng([seed, i, len(name)])
                worst = max(worst, *check_gradients(fn, sample(rng), h).values())
            out.append(Check(name, worst, tol))
    return out


def _tiny_batch(config: ModelConfig, seed: int, n: int = 2):
    cfg = WorldConfig(t_range=(12, 20), n_objects=(2, 3))
    episodes, _ = generate_episodes(n, seed, cfg)
    data = prepare(episodes, config)
    return collate(data.bundles, config, np.float64), data.labels


def model_checks(
    config: ModelConfig = TINY_CONFIG,
    seed: int = 0,
    h: float = 1e-6,
    max_coords: int | None = None,
) -> list[Check]:
    """Per parameter group: backward vs central differences of the mean BCE on a 2-sample batch.

    Groups are parameter names without their last component
    (``enc.0.self_attn.q`` holds ``.weight`` and ``.bias``). Every
    coordinate is probed unless ``max_coords`` caps the count per tensor.
    """
    config = replace(config, dropout=0.0).validate()
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        params = init_params(config, seed, dtype=np.float64)
        # non-trivial norms and biases so every path carries gradient
        params = ModelParams(
            {k: Tensor(v.data + 0.1 * rng.normal(size=v.shape), requires_grad=True, dtype=np.float64) for k, v in params.items()}
        )
        batch, labels = _tiny_batch(config, seed)
        loss, _ = forward_loss(batch, labels, params, config)
        grads = backward(loss)
        errors: dict[str, list[np.ndarray]] = {}
        for name, t in params.items():
            analytic = grads.get(t, np.zeros(t.shape)).reshape(-1)
            size = t.size
            coords = np.arange(size) if max_coords is None or size <= max_coords else np.sort(rng.choice(size, max_coords, replace=False))
            base = t.data.reshape(-1)
            numeric = np.zeros(len(coords))
            for j, c in enumerate(coords):
                vals = []
                for sign in (1.0, -1.0):
                    d = base.copy()
                    d[c] += sign * h
                    p2 = dict(params.tensors)
                    p2[name] = Tensor(d.reshape(t.shape), requires_grad=True, dtype=np.float64)
                    vals.append(float(forward_loss(batch, labels, ModelParams(p2), config)[0].data))
                numeric[j] = (vals[0] - vals[1]) / (2 * h)
            group = name.rsplit(".", 1)[0]
            errors.setdefault(group, [np.zeros(0), np.zeros(0)])
            errors[group][0] = np.concatenate([errors[group][0], analytic[coords]])
            errors[group][1] = np.concatenate([errors[group][1], numeric])
    return [Check(g, relative_error(a, n), STRUCTURED_TOL) for g, (a, n) in errors.items()]

