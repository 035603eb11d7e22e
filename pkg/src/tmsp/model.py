"""Fusion model: scene + trajectory tokens as encoder memory, instruction tokens as decoder queries.

The encoder runs self-attention over ``[h_lambda ; h_traj]``; the decoder
runs self-attention over the instruction tokens followed by cross-attention
into the encoder output. The decoder output is mean-pooled over valid tokens
and a two-layer MLP with a sigmoid gives p(success).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

from tmsp.core import (
    Tensor,
    as_tensor,
    bce_loss,
    concat,
    dropout,
    gelu,
    key_padding_mask,
    layer_norm,
    linear,
    scaled_dot_attention,
    sigmoid,
)
from tmsp.core.tensor import backward, tsum
from tmsp.errors import ConfigError, DataError
from tmsp.features import FeatureBundle, ProviderSpec, scene_feature_dim
from tmsp.trajectory import (
    COORD_FREQS,
    TRAJ_MODES,
    TrajEncoderParams,
    encode_trajectory,
    lift_trajectory,
    linear_trajectory_baseline,
    normalize_trajectory,
    pad_batch,
)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    d_trm: int = 16
    dropout: float = 0.1
    traj_mode: str = "conv_pool"
    threshold: float = 0.5
    traj_dim: int = 8
    kernel_size: int = 5
    conv: str = "depthwise"
    conv_activation: bool = True
    pooling: str = "avg"
    resample_len: int = 64
    traj_tokens: str = "time"
    txt_dim: int = 128
    lambda_dim: int | None = None  # None: width of the synthetic scene provider
    coord_freqs: tuple = COORD_FREQS
    lambda_positional: bool = False
    text_seed: int = 0
    ln_eps: float = 1e-5
    traj_mean: tuple | None = None
    traj_std: tuple | None = None

    def validate(self) -> "ModelConfig":
        problems = []
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "d_trm", "traj_dim", "kernel_size", "resample_len", "scene_dim", "txt_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            problems.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 < self.threshold < 1.0:
            problems.append("threshold must lie in (0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.traj_mode not in TRAJ_MODES:
            problems.append(f"traj_mode must be one of {TRAJ_MODES}")
        if self.kernel_size % 2 == 0:
            problems.append("kernel_size must be odd so the convolution preserves length")
        if self.conv not in ("depthwise", "full"):
            problems.append("conv must be 'depthwise' or 'full'")
        if self.pooling not in ("avg", "max"):
            problems.append("pooling must be 'avg' or 'max'")
        if self.traj_tokens not in ("time", "channel"):
            problems.append("traj_tokens must be 'time' or 'channel'")
        if self.ln_eps <= 0:
            problems.append("ln_eps must be positive")
        if any(f <= 0 for f in self.coord_freqs):
            problems.append("coord_freqs must be positive")
        if (self.traj_mean is None) != (self.traj_std is None):
            problems.append("traj_mean and traj_std must be given together")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    @property
    def scene_dim(self) -> int:
        return self.lambda_dim if self.lambda_dim is not None else scene_feature_dim(self.txt_dim)

    @property
    def traj_channels(self) -> int:
        """Rows entering the trajectory encoder: raw plan rows plus lifted coordinates."""
        return self.traj_dim + 4 * len(self.coord_freqs)

    def text_spec(self) -> ProviderSpec:
        return ProviderSpec("mock_text_hash", dim=self.txt_dim, seed=self.text_seed)

    def scene_spec(self) -> ProviderSpec:
        return ProviderSpec("synthetic_scene", dim=self.txt_dim, seed=self.text_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coord_freqs"] = [float(f) for f in self.coord_freqs]
        for k in ("traj_mean", "traj_std"):
            if d[k] is not None:
                d[k] = [float(v) for v in d[k]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kw = dict(d)
        if "coord_freqs" in kw:
            kw["coord_freqs"] = tuple(float(f) for f in kw["coord_freqs"])
        for k in ("traj_mean", "traj_std"):
            if kw.get(k) is not None:
                kw[k] = tuple(float(v) for v in kw[k])
        return cls(**kw)


class ModelParams:
    """Ordered name -> tensor mapping for every learnable array."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.tensors:
            out.setdefault(name.rsplit(".", 1)[0], []).append(name)
        return out

    def fingerprint(self) -> str:
        """Content hash of names, shapes and float32 bytes."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            t = self.tensors[name]
            h.update(name.encode())
            h.update(np.asarray(t.shape, dtype="<u4").tobytes())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]

    def astype(self, dtype, requires_grad: bool = True) -> "ModelParams":
        return ModelParams({k: Tensor(v.data, requires_grad=requires_grad, dtype=dtype) for k, v in self.tensors.items()})

    def frozen(self) -> "ModelParams":
        """Same arrays without gradient tracking, for inference."""
        return ModelParams({k: v.detach() for k, v in self.tensors.items()})

    def traj_encoder(self, config: ModelConfig) -> TrajEncoderParams:
        t = self.tensors
        return TrajEncoderParams(
            mode=config.traj_mode,
            d_trm=config.d_trm,
            kernel=t.get("traj.conv.weight"),
            bias=t.get("traj.conv.bias"),
            weight=t.get("traj.linear.weight"),
            weight_bias=t.get("traj.linear.bias"),
            activation=config.conv_activation,
            pooling=config.pooling,
            resample_len=config.resample_len,
            groups=config.traj_channels if config.conv == "depthwise" else 1,
        )


@dataclass(frozen=True)
class Prediction:
    probability: float
    decision: int
    episode_id: str
    fingerprint: str

    @property
    def label(self) -> str:
        return "success" if self.decision == 1 else "fail"


# -- initialisation -------------------------------------------------------------------


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter, in creation order."""
    c = config
    d, ff = c.d_model, c.d_ff
    shapes: list[tuple[str, tuple[int, ...], str]] = []

    def lin(prefix, n_in, n_out):
        shapes.append((f"{prefix}.weight", (n_in, n_out), "fan_in"))
        shapes.append((f"{prefix}.bias", (n_out,), "zeros"))

    def norm(prefix):
        shapes.append((f"{prefix}.gamma", (d,), "ones"))
        shapes.append((f"{prefix}.beta", (d,), "zeros"))

    def attn(prefix):
        for part in ("q", "k", "v", "o"):
            lin(f"{prefix}.{part}", d, d)

    def ffn(prefix):
        lin(f"{prefix}.fc1", d, ff)
        lin(f"{prefix}.fc2", ff, d)

    ch = c.traj_channels
    token_width = ch if c.traj_tokens == "time" else c.d_trm
    if c.traj_mode == "conv_pool":
        c_in = 1 if c.conv == "depthwise" else ch
        shapes.append(("traj.conv.weight", (ch, c_in, c.kernel_size), "fan_in"))
        shapes.append(("traj.conv.bias", (ch,), "zeros"))
        lin("proj.traj", token_width, d)
    elif c.traj_mode == "linear_baseline":
        lin("traj.linear", c.resample_len, c.d_trm)
        lin("proj.traj", token_width, d)
    else:
        shapes.append(("traj.null_token", (1, d), "fan_in"))
    lin("proj.lambda", c.scene_dim, d)
    lin("proj.txt", c.txt_dim, d)
    for i in range(c.n_layers):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.self_attn")
        norm(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ff")
    norm("enc.ln_f")
    for i in range(c.n_layers):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self_attn")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross_attn")
        norm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ff")
    norm("dec.ln_f")
    lin("head.fc1", d, d)
    lin("head.fc2", d, 1)
    return shapes


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Deterministic init: weights ~ N(0, 1/fan_in), biases zero, norms identity."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, kind in param_shapes(config):
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name == "traj.conv.weight" else shape[0]
            if name == "traj.null_token":
                fan_in = shape[1]
            arr = rng.normal(size=shape) / math.sqrt(fan_in)
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    return ModelParams(tensors)


# -- batching ------------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    lam: np.ndarray
    lam_valid: np.ndarray
    txt: np.ndarray
    txt_valid: np.ndarray
    traj: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _pad_tokens(mats: Sequence[np.ndarray], dtype) -> tuple[np.ndarray, np.ndarray]:
    k = max(m.shape[0] for m in mats)
    out = np.zeros((len(mats), k, mats[0].shape[1]), dtype=dtype)
    valid = np.zeros((len(mats), k), dtype=bool)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
        valid[i, : m.shape[0]] = True
    return out, valid


def collate(bundles: Sequence[FeatureBundle], config: ModelConfig, dtype=np.float32) -> Batch:
    if not bundles:
        raise DataError("cannot collate an empty batch")
    for b in bundles:
        if b.h_lambda.shape[0] < 1 or b.h_txt.shape[0] < 1:
            raise DataError(f"episode {b.episode_id}: empty token stream")
        if b.h_lambda.shape[1] != config.scene_dim:
            raise ConfigError(f"episode {b.episode_id}: scene features have width {b.h_lambda.shape[1]}, model expects {config.scene_dim}")
        if b.h_txt.shape[1] != config.txt_dim:
            raise ConfigError(f"episode {b.episode_id}: text features have width {b.h_txt.shape[1]}, model expects {config.txt_dim}")
        if b.trajectory.shape[0] != config.traj_dim:
            raise ConfigError(f"episode {b.episode_id}: trajectory has {b.trajectory.shape[0]} rows, model expects {config.traj_dim}")
    lam, lam_valid = _pad_tokens([b.h_lambda for b in bundles], dtype)
    txt, txt_valid = _pad_tokens([b.h_txt for b in bundles], dtype)
    trajs = []
    for b in bundles:
        t = b.trajectory
        if config.traj_mean is not None:
            t = normalize_trajectory(t, config.traj_mean, config.traj_std, b.episode_id)
        lifted = lift_trajectory(b.trajectory, config.coord_freqs)
        trajs.append(np.concatenate([t, lifted[config.traj_dim :]], axis=0))
    traj, lengths = pad_batch(trajs, dtype)
    return Batch([b.episode_id for b in bundles], lam, lam_valid, txt, txt_valid, traj, lengths)


# -- forward --------------------------------------------------------------------------


@lru_cache(maxsize=64)
def sinusoid(length: int, width: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.flags.writeable = False
    return pe


def _heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return x.reshape(B, L, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _attention(p: ModelParams, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray, n_heads: int, capture: list | None) -> Tensor:
    q = _heads(linear(xq, p[f"{prefix}.q.weight"], p[f"{prefix}.q.bias"]), n_heads)
    k = _heads(linear(xkv, p[f"{prefix}.k.weight"], p[f"{prefix}.k.bias"]), n_heads)
    v = _heads(linear(xkv, p[f"{prefix}.v.weight"], p[f"{prefix}.v.bias"]), n_heads)
    out, weights = scaled_dot_attention(q, k, v, mask=mask, return_weights=True)
    if capture is not None:
        capture.append((prefix, weights.data))
    B, _, Lq, _ = out.shape
    out = out.transpose(0, 2, 1, 3).reshape(B, Lq, xq.shape[-1])
    return linear(out, p[f"{prefix}.o.weight"], p[f"{prefix}.o.bias"])


def _ln(p: ModelParams, prefix: str, x: Tensor, eps: float) -> Tensor:
    return layer_norm(x, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], eps)


def _ffn(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = gelu(linear(x, p[f"{prefix}.fc1.weight"], p[f"{prefix}.fc1.bias"]))
    return linear(h, p[f"{prefix}.fc2.weight"], p[f"{prefix}.fc2.bias"])


def trajectory_tokens(params: ModelParams, config: ModelConfig, batch: Batch) -> Tensor:
    """``B x L_traj x d_model`` tokens standing for the trajectory."""
    B = len(batch)
    dtype = params["proj.lambda.weight"].dtype
    if config.traj_mode == "disabled":
        return as_tensor(np.zeros((B, 1, config.d_model), dtype=dtype)) + params["traj.null_token"]
    enc = params.traj_encoder(config)
    x = as_tensor(batch.traj, dtype)
    if config.traj_mode == "conv_pool":
        h = encode_trajectory(x, enc, lengths=batch.lengths)
    else:
        h = linear_trajectory_baseline(x, enc, lengths=batch.lengths)
    if config.traj_tokens == "time":
        h = h.transpose(0, 2, 1)
    tokens = linear(h, params["proj.traj.weight"], params["proj.traj.bias"])
    return tokens + as_tensor(sinusoid(tokens.shape[1], config.d_model).astype(dtype))


def forward_logits(
    params: ModelParams,
    config: ModelConfig,
    batch: Batch,
    rng: np.random.Generator | None = None,
    capture: list | None = None,
) -> Tensor:
    """Logit of p(success) for every sample; dropout is active only when ``rng`` is given."""
    c = config
    dtype = params["proj.lambda.weight"].dtype
    rate = c.dropout
    B = len(batch)

    lam = linear(as_tensor(batch.lam, dtype), params["proj.lambda.weight"], params["proj.lambda.bias"])
    if c.lambda_positional:
        lam = lam + as_tensor(sinusoid(lam.shape[1], c.d_model).astype(dtype))
    traj = trajectory_tokens(params, c, batch)
    memory = concat([lam, traj], axis=1)
    mem_valid = np.concatenate([batch.lam_valid, np.ones((B, traj.shape[1]), dtype=bool)], axis=1)
    mem_mask = key_padding_mask(mem_valid, dtype)
    txt_mask = key_padding_mask(batch.txt_valid, dtype)

    x = dropout(memory, rate, rng)
    for i in range(c.n_layers):
        pre = f"enc.{i}"
        h = _ln(params, f"{pre}.ln1", x, c.ln_eps)
        x = x + dropout(_attention(params, f"{pre}.self_attn", h, h, mem_mask, c.n_heads, capture), rate, rng)
        x = x + dropout(_ffn(params, f"{pre}.ff", _ln(params, f"{pre}.ln2", x, c.ln_eps)), rate, rng)
    memory = _ln(params, "enc.ln_f", x, c.ln_eps)

    y = linear(as_tensor(batch.txt, dtype), params["proj.txt.weight"], params["proj.txt.bias"])
    y = y + as_tensor(sinusoid(y.shape[1], c.d_model).astype(dtype))
    y = dropout(y, rate, rng)
    for i in range(c.n_layers):
        pre = f"dec.{i}"
        h = _ln(params, f"{pre}.ln1", y, c.ln_eps)
        y = y + dropout(_attention(params, f"{pre}.self_attn", h, h, txt_mask, c.n_heads, capture), rate, rng)
        h = _ln(params, f"{pre}.ln2", y, c.ln_eps)
        y = y + dropout(_attention(params, f"{pre}.cross_attn", h, memory, mem_mask, c.n_heads, capture), rate, rng)
        y = y + dropout(_ffn(params, f"{pre}.ff", _ln(params, f"{pre}.ln3", y, c.ln_eps)), rate, rng)
    y = _ln(params, "dec.ln_f", y, c.ln_eps)

    valid = batch.txt_valid.astype(dtype)
    weights = valid / valid.sum(axis=1, keepdims=True)
    pooled = tsum(y * as_tensor(weights[:, :, None]), axis=1)
    h = gelu(linear(pooled, params["head.fc1.weight"], params["head.fc1.bias"]))
    logits = linear(h, params["head.fc2.weight"], params["head.fc2.bias"])
    return logits.reshape(B)


def predict_proba(params: ModelParams, config: ModelConfig, bundles: Sequence[FeatureBundle], batch_size: int = 256) -> np.ndarray:
    frozen = params.frozen()
    dtype = params["proj.lambda.weight"].dtype
    out = []
    for s in range(0, len(bundles), batch_size):
        batch = collate(bundles[s : s + batch_size], config, dtype)
        out.append(sigmoid(forward_logits(frozen, config, batch)).data)
    return np.concatenate(out) if out else np.zeros(0)


def fuse_and_predict(bundle: FeatureBundle, params: ModelParams, config: ModelConfig) -> Prediction:
    p = float(predict_proba(params, config, [bundle])[0])
    return Prediction(p, int(p >= config.threshold), bundle.episode_id, params.fingerprint())


def check_labels(labels) -> np.ndarray:
    y = np.asarray(labels)
    bad = ~np.isin(y, (0, 1))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"label at index {i} is {y.reshape(-1)[i]!r}; labels must be 0 or 1")
    return y


def forward_loss(
    bundles: Sequence[FeatureBundle] | Batch,
    labels,
    params: ModelParams,
    config: ModelConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Mean BCE over the batch and the predicted probabilities.

    Pass the loss to :func:`tmsp.core.backward` (or use :func:`loss_and_grads`)
    to obtain gradients for every parameter.
    """
    y = check_labels(labels)
    dtype = params["proj.lambda.weight"].dtype
    batch = bundles if isinstance(bundles, Batch) else collate(bundles, config, dtype)
    if len(batch) == 0:
        raise DataError("empty batch")
    if len(y) != len(batch):
        raise DataError(f"{len(y)} labels for {len(batch)} samples")
    probs = sigmoid(forward_logits(params, config, batch, rng))
    return bce_loss(probs, y.astype(dtype)), probs.data


def loss_and_grads(batch, labels, params: ModelParams, config: ModelConfig, rng=None) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    loss, probs = forward_loss(batch, labels, params, config, rng)
    by_tensor = backward(loss)
    grads = {name: by_tensor.get(t, np.zeros_like(t.data)) for name, t in params.items()}
    return float(loss.data), grads, probs
