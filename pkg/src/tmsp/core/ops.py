"""Neural-network operators built on :mod:`tmsp.core.tensor`.

Operators that appear many times per step (convolution, pooling, softmax,
layer norm, BCE) carry a fused backward; attention is composed from
primitives so its gradient is checked through them.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tmsp.core.tensor import Tensor, as_tensor, matmul, swapaxes
from tmsp.errors import ArgumentError, DataError, DimensionError

BCE_CLAMP = 1e-7
MASK_VALUE = -1e9


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


# -- convolution ------------------------------------------------------------


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation along the last axis.

    ``x`` is ``C x T`` or ``B x C x T``; ``kernel`` is ``C_out x C/groups x k``.
    Output length is ``floor((T + 2*padding - k) / stride) + 1``.
    """
    x = as_tensor(x)
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ArgumentError(f"padding must be >= 0, got {padding}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3:
        raise DimensionError(f"conv1d input must be C x T or B x C x T, got {x.shape}")
    wd = kernel.data
    B, C, T = xd.shape
    c_out, c_per_group, k = wd.shape
    if C % groups or c_out % groups or c_per_group != C // groups:
        raise DimensionError(f"conv1d: kernel {kernel.shape} incompatible with input {x.shape} and groups={groups}")
    if k > T + 2 * padding:
        raise DimensionError(f"conv1d: kernel length {k} exceeds padded input length {T + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1d: bias shape {bias.shape} does not match {c_out} output channels")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    t_out = (T + 2 * padding - k) // stride + 1
    win = sliding_window_view(xp, k, axis=-1)[:, :, : stride * (t_out - 1) + 1 : stride, :]
    o_per_group = c_out // groups
    win_g = win.reshape(B, groups, c_per_group, t_out, k)
    w_g = wd.reshape(groups, o_per_group, c_per_group, k)
    if c_per_group == 1 and o_per_group == 1:
        out = np.einsum("bgtj,gj->bgt", win_g[:, :, 0], w_g[:, 0, 0])
    else:
        out = np.einsum("bgctj,gocj->bgot", win_g, w_g, optimize=True)
    out = out.reshape(B, c_out, t_out)
    if bias is not None:
        out = out + bias.data[:, None]

    def back(g):
        g = g[None] if unbatched else g
        g_g = g.reshape(B, groups, o_per_group, t_out)
        gw = np.einsum("bgot,bgctj->gocj", g_g, win_g, optimize=True).reshape(wd.shape) if kernel.requires_grad else None
        gb = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.einsum("bgot,gocj->bgctj", g_g, w_g, optimize=True).reshape(B, C, t_out, k)
            gxp = np.zeros(xp.shape, dtype=xd.dtype)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                gxp[:, :, j : j + span : stride] += gwin[..., j]
            gx = gxp[:, :, padding : padding + T] if padding else gxp
            if unbatched:
                gx = gx[0]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return Tensor._make(out[0] if unbatched else out, parents, back, "conv1d")


# -- temporal pooling ---------------------------------------------------------


def pool_segments(length: int, out_len: int) -> list[tuple[int, int]]:
    """Half-open segments ``[floor(i*T/n), ceil((i+1)*T/n))`` covering ``[0, T)``."""
    if out_len < 1:
        raise ArgumentError(f"out_len must be >= 1, got {out_len}")
    if length < 1:
        raise ArgumentError(f"input length must be >= 1, got {length}")
    return [((i * length) // out_len, -((-(i + 1) * length) // out_len)) for i in range(out_len)]


def pooling_matrix(length: int, out_len: int, rows: int | None = None, dtype=np.float64) -> np.ndarray:
    """``rows x out_len`` averaging matrix; rows past ``length`` stay zero."""
    rows = length if rows is None else rows
    P = np.zeros((rows, out_len), dtype=dtype)
    for i, (s, e) in enumerate(pool_segments(length, out_len)):
        P[s:e, i] = 1.0 / (e - s)
    return P


def _lengths(x: Tensor, lengths) -> np.ndarray | None:
    if lengths is None:
        return None
    lengths = np.asarray(lengths, dtype=np.int64)
    if x.ndim != 3 or lengths.shape != (x.shape[0],):
        raise DimensionError(f"lengths {lengths.shape} need a B x C x T input, got {x.shape}")
    if lengths.min() < 1 or lengths.max() > x.shape[-1]:
        raise ArgumentError("lengths must lie in [1, T]")
    return lengths


def adaptive_avg_pool1d(x: Tensor, out_len: int, lengths=None) -> Tensor:
    """Average over ``out_len`` segments of the last axis.

    With ``lengths`` (batched input only) each sample is pooled over its own
    valid prefix; padded steps receive zero gradient.
    """
    x = as_tensor(x)
    lengths = _lengths(x, lengths)
    T = x.shape[-1]
    if lengths is None:
        P = pooling_matrix(T, out_len, dtype=x.dtype)
    else:
        P = np.stack([pooling_matrix(int(n), out_len, rows=T, dtype=x.dtype) for n in lengths])
    out = x.data @ P
    return Tensor._make(out, (x,), lambda g: (g @ np.swapaxes(P, -1, -2),), "adaptive_avg_pool1d")


def adaptive_max_pool1d(x: Tensor, out_len: int, lengths=None) -> Tensor:
    x = as_tensor(x)
    lengths = _lengths(x, lengths)
    xd = x.data
    T = xd.shape[-1]
    per_sample = [T] * (xd.shape[0] if xd.ndim == 3 else 1) if lengths is None else lengths.tolist()
    member = np.zeros((len(per_sample), out_len, T), dtype=bool)
    for b, n in enumerate(per_sample):
        for i, (s, e) in enumerate(pool_segments(int(n), out_len)):
            member[b, i, s:e] = True
    if xd.ndim != 3:
        member = member[0]
        masked = np.where(member[None, :, :], xd[..., None, :], -np.inf)
    else:
        masked = np.where(member[:, None, :, :], xd[..., None, :], -np.inf)
    idx = masked.argmax(axis=-1)
    out = np.take_along_axis(masked, idx[..., None], axis=-1)[..., 0]

    def back(g):
        full = np.zeros(xd.shape[:-1] + (out_len, T), dtype=xd.dtype)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full.sum(axis=-2),)

    return Tensor._make(out, (x,), back, "adaptive_max_pool1d")


def resample_matrix(length: int, out_len: int, rows: int | None = None, dtype=np.float64) -> np.ndarray:
    """Linear-interpolation matrix taking ``length`` samples to ``out_len`` samples."""
    if out_len < 1 or length < 1:
        raise ArgumentError("resample lengths must be >= 1")
    rows = length if rows is None else rows
    R = np.zeros((rows, out_len), dtype=dtype)
    if out_len == 1:
        pos = np.array([(length - 1) / 2.0])
    else:
        pos = np.arange(out_len) * ((length - 1) / (out_len - 1))
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, length - 1)
    w = pos - lo
    cols = np.arange(out_len)
    np.add.at(R, (lo, cols), 1.0 - w)
    np.add.at(R, (hi, cols), w)
    return R


def linear_resample(x: Tensor, out_len: int, lengths=None) -> Tensor:
    """Resample the last axis to ``out_len`` points by linear interpolation."""
    x = as_tensor(x)
    lengths = _lengths(x, lengths)
    T = x.shape[-1]
    if lengths is None:
        R = resample_matrix(T, out_len, dtype=x.dtype)
    else:
        R = np.stack([resample_matrix(int(n), out_len, rows=T, dtype=x.dtype) for n in lengths])
    return Tensor._make(x.data @ R, (x,), lambda g: (g @ np.swapaxes(R, -1, -2),), "linear_resample")


# -- normalisation and attention ----------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ArgumentError(f"axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise ArgumentError(f"eps must be positive, got {eps}")
    x = as_tensor(x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} do not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), back, "layer_norm")


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d) + mask) V``.

    ``mask`` is an additive array broadcastable to the score shape, holding 0
    for visible keys and a large negative value for hidden ones.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"attention: query width {Q.shape[-1]} differs from key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    scores = matmul(Q, swapaxes(K, -1, -2)) * (1.0 / math.sqrt(Q.shape[-1]))
    if mask is not None:
        scores = scores + as_tensor(mask, scores.dtype)
    weights = softmax(scores, axis=-1)
    out = matmul(weights, V)
    return (out, weights) if return_weights else out


def key_padding_mask(valid: np.ndarray, dtype=np.float32) -> np.ndarray:
    """``B x L`` boolean validity -> additive ``B x 1 x 1 x L`` attention mask."""
    valid = np.asarray(valid, dtype=bool)
    return np.where(valid, 0.0, MASK_VALUE).astype(dtype)[:, None, None, :]


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * as_tensor(keep, x.dtype)


# -- loss ---------------------------------------------------------------------


def bce_loss(p: Tensor, y, eps: float = BCE_CLAMP) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against 0/1 targets.

    ``p`` is clamped to ``[eps, 1 - eps]`` before the logs. The gradient is
    evaluated at the clamped value and passed straight through the clamp, so
    saturated wrong predictions still receive signal.
    """
    p = as_tensor(p)
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.dtype)
    if yd.shape != p.shape:
        raise DimensionError(f"bce_loss: targets {yd.shape} do not match probabilities {p.shape}")
    bad = ~((yd == 0) | (yd == 1))
    if bad.any():
        raise ArgumentError(f"bce_loss: targets must be 0 or 1, found {yd[bad][0]!r} at index {int(np.flatnonzero(bad)[0])}")
    pc = np.clip(p.data, eps, 1.0 - eps)
    n = p.size
    loss = -(yd * np.log(pc) + (1.0 - yd) * np.log(1.0 - pc)).mean()

    def back(g):
        return (g * (-(yd / pc) + (1.0 - yd) / (1.0 - pc)) / n,)

    return Tensor._make(np.asarray(loss, dtype=p.dtype), (p,), back, "bce_loss")


def check_finite(t: Tensor, what: str) -> None:
    if not np.isfinite(t.data).all():
        raise DataError(f"{what} contains NaN or Inf")
