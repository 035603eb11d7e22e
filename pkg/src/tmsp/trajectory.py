"""Trajectory encoder: temporal convolution followed by temporal pooling.

A ``D x T`` plan becomes ``D x d_trm`` by a shape-preserving 1-D convolution
along time (depthwise by default, optional tanh) and adaptive pooling from
``T`` to ``d_trm`` steps. The linear baseline resamples to a fixed length and
applies one learned ``L_fix x d_trm`` map to every row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tmsp.core import Tensor, adaptive_avg_pool1d, adaptive_max_pool1d, as_tensor, concat, conv1d, linear_resample, tanh
from tmsp.core.tensor import matmul
from tmsp.errors import ArgumentError, DataError, DimensionError
from tmsp.world import GRIPPER_ROW, TRAJ_DIM

TRAJ_MODES = ("conv_pool", "linear_baseline", "disabled")
COORD_FREQS = (1.0, 2.0, 4.0, 8.0)
ZERO_STD = 1e-9  # relative; rows below this spread count as constant


@dataclass(frozen=True)
class TrajEncoderParams:
    mode: str
    d_trm: int
    kernel: Tensor | None = None
    bias: Tensor | None = None
    weight: Tensor | None = None  # linear baseline, L_fix x d_trm
    weight_bias: Tensor | None = None
    activation: bool = True
    pooling: str = "avg"
    resample_len: int = 64
    groups: int = 1

    def __post_init__(self):
        if self.mode not in TRAJ_MODES:
            raise ArgumentError(f"unknown trajectory mode {self.mode!r}")
        if self.d_trm < 1:
            raise ArgumentError(f"d_trm must be >= 1, got {self.d_trm}")
        if self.pooling not in ("avg", "max"):
            raise ArgumentError(f"pooling must be 'avg' or 'max', got {self.pooling!r}")
        if self.mode == "conv_pool" and (self.kernel is None or self.kernel.shape[-1] % 2 == 0):
            raise ArgumentError("conv_pool needs an odd-length kernel so the convolution preserves T")


def validate_trajectory(x: np.ndarray, episode_id: str | None = None) -> np.ndarray:
    where = f"episode {episode_id}: " if episode_id is not None else ""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != TRAJ_DIM or x.shape[1] < 1:
        raise DataError(f"{where}trajectory must be {TRAJ_DIM} x T with T >= 1, got {x.shape}")
    if not np.isfinite(x).all():
        raise DataError(f"{where}trajectory contains NaN or Inf")
    return x


def trajectory_stats(trajectories) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean and std over every timestep of every trajectory."""
    cat = np.concatenate([np.asarray(t) for t in trajectories], axis=1)
    return cat.mean(axis=1), cat.std(axis=1)


def normalize_trajectory(raw: np.ndarray, mean, std, episode_id: str | None = None) -> np.ndarray:
    """Standardise each row; zero-variance rows and the gripper row pass through unscaled."""
    raw = validate_trajectory(raw, episode_id)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    live = std > ZERO_STD * np.maximum(1.0, np.abs(mean))
    scale = np.where(live, std, 1.0)
    shift = np.where(live, mean, 0.0)
    scale[GRIPPER_ROW] = 1.0
    shift[GRIPPER_ROW] = 0.0
    return (raw - shift[:, None]) / scale[:, None]


def denormalize_trajectory(x: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    live = std > ZERO_STD * np.maximum(1.0, np.abs(mean))
    scale = np.where(live, std, 1.0)
    shift = np.where(live, mean, 0.0)
    scale[GRIPPER_ROW] = 1.0
    shift[GRIPPER_ROW] = 0.0
    return x * scale[:, None] + shift[:, None]


def coordinate_features(x, y, freqs=COORD_FREQS) -> np.ndarray:
    """Sin/cos features of planar coordinates, ``4 * len(freqs)`` rows.

    Both the scene provider and the trajectory lift use this map, so the
    dot product of two points' features is a sum of ``cos(pi f (a - b))``
    terms: a similarity that peaks when the points coincide.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rows = []
    for f in freqs:
        rows += [np.sin(np.pi * f * x), np.cos(np.pi * f * x), np.sin(np.pi * f * y), np.cos(np.pi * f * y)]
    return np.stack(rows) if rows else np.zeros((0,) + x.shape)


def lift_trajectory(x: np.ndarray, freqs=COORD_FREQS) -> np.ndarray:
    """Append coordinate features of the xy rows: ``D x T`` -> ``(D + 4F) x T``."""
    x = np.asarray(x)
    return np.concatenate([x, coordinate_features(x[0], x[1], freqs)], axis=0)


def _tile_single_step(x: Tensor) -> Tensor:
    return concat([x, x], axis=-1) if x.shape[-1] == 1 else x


def encode_trajectory(x, params: TrajEncoderParams, lengths=None) -> Tensor:
    """``(B x) D x T`` -> ``(B x) D x d_trm`` by conv then pooling.

    ``lengths`` gives each sample's valid prefix in a zero-padded batch. Zero
    padding past a sample's end is exactly the convolution's own padding, so
    batching does not change any sample's output.
    """
    if params.mode != "conv_pool":
        raise ArgumentError(f"encode_trajectory needs mode conv_pool, got {params.mode!r}")
    x = as_tensor(x)
    if x.shape[-2] != params.kernel.shape[1] * params.groups:
        raise DimensionError(f"trajectory has {x.shape[-2]} rows, kernel expects {params.kernel.shape[1] * params.groups}")
    if lengths is None:
        x = _tile_single_step(x)
    k = params.kernel.shape[-1]
    h = conv1d(x, params.kernel, params.bias, stride=1, padding=k // 2, groups=params.groups)
    if params.activation:
        h = tanh(h)
    pool = adaptive_avg_pool1d if params.pooling == "avg" else adaptive_max_pool1d
    return pool(h, params.d_trm, lengths=lengths)


def linear_trajectory_baseline(x, params: TrajEncoderParams, lengths=None) -> Tensor:
    """Resample to ``resample_len`` steps, then apply the learned map to each row."""
    if params.mode != "linear_baseline":
        raise ArgumentError(f"linear_trajectory_baseline needs mode linear_baseline, got {params.mode!r}")
    x = as_tensor(x)
    r = linear_resample(x, params.resample_len, lengths=lengths)
    out = matmul(r, params.weight)
    return out + params.weight_bias if params.weight_bias is not None else out


def pad_batch(trajectories, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad ``D x T_i`` plans into ``B x D x T_max``; single-step plans are tiled to two."""
    trajs = [t if t.shape[1] > 1 else np.repeat(t, 2, axis=1) for t in trajectories]
    lengths = np.array([t.shape[1] for t in trajs], dtype=np.int64)
    out = np.zeros((len(trajs), trajs[0].shape[0], int(lengths.max())), dtype=dtype)
    for i, t in enumerate(trajs):
        out[i, :, : t.shape[1]] = t
    return out, lengths
