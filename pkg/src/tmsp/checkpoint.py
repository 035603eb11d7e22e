"""Binary checkpoint: magic, version, JSON config blob, then named float32 tensors."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from tmsp.core import Tensor
from tmsp.errors import ConfigError, FormatError
from tmsp.model import ModelConfig, ModelParams, param_shapes

CHECKPOINT_MAGIC = b"TMSPCKPT"
CHECKPOINT_VERSION = 1


def encode_checkpoint(params: ModelParams, config: ModelConfig, extra: dict | None = None) -> bytes:
    blob = json.dumps({"model": config.to_dict(), "extra": extra or {}}, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob, struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(buf: bytes, source: str = "<bytes>") -> tuple[ModelParams, ModelConfig, dict]:
    """Parse and validate the whole buffer before building any model state."""
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic bytes, not a checkpoint")
    try:
        version, blob_len = struct.unpack_from("<HI", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version}")
        off = 14
        if off + blob_len > len(buf):
            raise FormatError(f"{source}: truncated config blob")
        header = json.loads(buf[off : off + blob_len].decode("utf-8"))
        off += blob_len
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            if off + nlen > len(buf):
                raise FormatError(f"{source}: truncated tensor name")
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            shape = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            n = int(np.prod(shape))
            if off + 4 * n > len(buf):
                raise FormatError(f"{source}: truncated payload for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
            off += 4 * n
    except struct.error:
        raise FormatError(f"{source}: truncated checkpoint") from None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header ({exc})") from None
    if off != len(buf):
        raise FormatError(f"{source}: {len(buf) - off} trailing bytes")
    try:
        config = ModelConfig.from_dict(header["model"]).validate()
    except (ConfigError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: invalid model config in checkpoint ({exc})") from None
    expected = {name: shape for name, shape, _ in param_shapes(config)}
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise FormatError(f"{source}: tensor set does not match config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].shape != tuple(shape):
            raise FormatError(f"{source}: tensor {name!r} has shape {arrays[name].shape}, config implies {tuple(shape)}")
    if not all(np.isfinite(a).all() for a in arrays.values()):
        raise FormatError(f"{source}: checkpoint contains non-finite values")
    params = ModelParams({name: Tensor(arrays[name], requires_grad=True, dtype=np.float32) for name in expected})
    return params, config, header.get("extra", {})


def save_checkpoint(params: ModelParams, config: ModelConfig, path, extra: dict | None = None) -> None:
    data = encode_checkpoint(params, config, extra)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    params, config, _ = decode_checkpoint(Path(path).read_bytes(), str(path))
    return params, config


def load_checkpoint_with_meta(path) -> tuple[ModelParams, ModelConfig, dict]:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
