"""Feature providers for the scene stream and the instruction stream.

The visual/narrative encoder stack is replaced by a provider boundary: a
feature file of precomputed matrices keyed by episode id, a seeded hash
embedding for instruction tokens, and an exact encoding of synthetic scenes.
"""

from __future__ import annotations

import hashlib
import string
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np

from tmsp.errors import ConfigError, DataError, EpisodeLookupError, FormatError
from tmsp.trajectory import COORD_FREQS, coordinate_features
from tmsp.world import Episode, SceneState

FEATURE_MAGIC = b"TMSPFEAT"
FEATURE_VERSION = 1

# scene row = [class embedding (dim) | x, y, container, global, goal x0 y0 x1 y1 | coordinate features]
SCENE_SCALARS = 8
SCENE_COORD_DIM = 4 * len(COORD_FREQS)


def scene_feature_dim(dim: int) -> int:
    return dim + SCENE_SCALARS + SCENE_COORD_DIM

PROVIDER_KINDS = ("precomputed_file", "mock_text_hash", "synthetic_scene")


@dataclass(frozen=True)
class ProviderSpec:
    kind: str
    source: str | None = None
    dim: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PROVIDER_KINDS:
            raise ConfigError(f"unknown provider kind {self.kind!r}; expected one of {PROVIDER_KINDS}")
        if self.kind == "precomputed_file":
            if not self.source or not Path(self.source).is_file():
                raise ConfigError(f"precomputed feature file not found: {self.source!r}")


@dataclass(frozen=True)
class FeatureBundle:
    """Inputs of one episode, ready for the fusion model.

    ``h_lambda`` and ``h_txt`` are provider outputs at their native widths;
    the model's input projections take them to ``d_model``. ``trajectory`` is
    the raw ``D x T`` plan that the trajectory encoder turns into ``h_traj``.
    """

    episode_id: str
    h_lambda: np.ndarray
    h_txt: np.ndarray
    trajectory: np.ndarray

    def __post_init__(self):
        for name in ("h_lambda", "h_txt"):
            m = getattr(self, name)
            if m.ndim != 2 or m.shape[0] < 1:
                raise DataError(f"episode {self.episode_id}: {name} needs at least one token, got shape {m.shape}")


# -- text ------------------------------------------------------------------------


_STRIP = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_STRIP).split()


@lru_cache(maxsize=4096)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.normal(size=dim)
    v /= np.linalg.norm(v)
    v.flags.writeable = False
    return v


def embed_text(instruction: str, spec: ProviderSpec | None = None) -> np.ndarray:
    """One unit-norm row per token, in sentence order (``mock_text_hash``)."""
    spec = spec or ProviderSpec("mock_text_hash")
    if spec.kind != "mock_text_hash":
        raise ConfigError(f"embed_text needs a mock_text_hash provider, got {spec.kind!r}")
    tokens = tokenize(instruction)
    if not tokens:
        raise DataError("instruction is empty after tokenisation")
    return np.stack([_token_vector(t, spec.dim, spec.seed) for t in tokens])


# -- scenes ----------------------------------------------------------------------


def mock_scene_features(scene: SceneState, spec: ProviderSpec | None = None) -> np.ndarray:
    """One row per object plus a trailing global row describing the goal.

    Object classes are encoded with the text provider's vector for the class
    name, so scene rows are aligned with instruction tokens the way
    language-grounded visual features would be. The remaining columns hold
    x, y, a container flag, a global-row marker, the goal corners and
    coordinate features of the position (the goal centre for the global row).
    """
    spec = spec or ProviderSpec("synthetic_scene")
    if not scene.objects:
        raise DataError("scene has no objects")
    d = spec.dim
    rows = np.zeros((len(scene.objects) + 1, scene_feature_dim(d)))
    for i, obj in enumerate(scene.objects):
        rows[i, :d] = _token_vector(obj.cls, d, spec.seed)
        rows[i, d : d + 3] = (obj.x, obj.y, float(obj.container))
    g = scene.goal
    rows[-1, d + 3] = 1.0
    rows[-1, d + 4 : d + 8] = (g.x0, g.y0, g.x1, g.y1)
    xs = np.array([o.x for o in scene.objects] + [(g.x0 + g.x1) / 2])
    ys = np.array([o.y for o in scene.objects] + [(g.y0 + g.y1) / 2])
    rows[:, d + SCENE_SCALARS :] = coordinate_features(xs, ys).T
    return rows


# -- feature files -------------------------------------------------------------------


def write_feature_file(path, records: Mapping[str, np.ndarray]) -> None:
    chunks = [FEATURE_MAGIC, struct.pack("<HI", FEATURE_VERSION, len(records))]
    for key, mat in records.items():
        mat = np.asarray(mat)
        if mat.ndim != 2:
            raise DataError(f"feature record {key!r} must be a matrix, got shape {mat.shape}")
        kb = key.encode("utf-8")
        chunks.append(struct.pack("<H", len(kb)))
        chunks.append(kb)
        chunks.append(struct.pack("<II", *mat.shape))
        chunks.append(np.ascontiguousarray(mat, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_feature_file(path) -> dict[str, np.ndarray]:
    """Parse a whole feature file; nothing is returned unless every record is valid."""
    buf = Path(path).read_bytes()
    if buf[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    try:
        version, count = struct.unpack_from("<HI", buf, 8)
        if version != FEATURE_VERSION:
            raise FormatError(f"{path}: unsupported feature file version {version}")
        off = 14
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", buf, off)
            off += 2
            if off + klen > len(buf):
                raise FormatError(f"{path}: truncated record id")
            key = buf[off : off + klen].decode("utf-8")
            off += klen
            rows, cols = struct.unpack_from("<II", buf, off)
            off += 8
            nbytes = rows * cols * 4
            if off + nbytes > len(buf):
                raise FormatError(f"{path}: truncated payload for {key!r}")
            mat = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols).astype(np.float32)
            off += nbytes
            out[key] = mat
    except struct.error:
        raise FormatError(f"{path}: truncated feature file") from None
    except UnicodeDecodeError:
        raise FormatError(f"{path}: record id is not UTF-8") from None
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return out


class FeatureStore:
    """In-memory index over one feature file, loaded once."""

    def __init__(self, path):
        self.path = str(path)
        self._records = read_feature_file(path)

    def __contains__(self, episode_id: str) -> bool:
        return episode_id in self._records

    def __len__(self) -> int:
        return len(self._records)

    def get(self, episode_id: str) -> np.ndarray:
        try:
            return self._records[episode_id]
        except KeyError:
            raise EpisodeLookupError(f"episode id {episode_id!r} not found in {self.path}") from None


_stores: dict[str, FeatureStore] = {}


def load_precomputed_features(path, episode_id: str) -> np.ndarray:
    key = str(Path(path).resolve())
    if key not in _stores:
        _stores[key] = FeatureStore(path)
    return _stores[key].get(episode_id)


# -- bundles ---------------------------------------------------------------------------


def featurize(
    episode: Episode,
    text_spec: ProviderSpec | None = None,
    scene_spec: ProviderSpec | None = None,
) -> FeatureBundle:
    text_spec = text_spec or ProviderSpec("mock_text_hash")
    scene_spec = scene_spec or ProviderSpec("synthetic_scene")
    if text_spec.kind == "precomputed_file":
        h_txt = load_precomputed_features(text_spec.source, episode.id)
    else:
        if not episode.instruction.strip():
            raise DataError(f"episode {episode.id}: empty instruction")
        h_txt = embed_text(episode.instruction, text_spec)
    if scene_spec.kind == "precomputed_file":
        h_lambda = load_precomputed_features(scene_spec.source, episode.id)
    elif scene_spec.kind == "synthetic_scene":
        h_lambda = mock_scene_features(episode.scene, scene_spec)
    else:
        raise ConfigError(f"provider kind {scene_spec.kind!r} cannot supply scene features")
    return FeatureBundle(episode.id, h_lambda, h_txt, episode.trajectory)
