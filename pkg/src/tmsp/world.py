"""Planar pick-and-place world with an analytic success labeler.

Each episode places 2-5 objects of distinct classes on a unit table, names a
target through a templated instruction, and plans an 8-channel end-effector
trajectory (rows: x, y, z, roll, pitch, yaw, spare, gripper closure). Failure
episodes come from perturbing a successful plan; the label is always whatever
:func:`success_oracle` says about the stored (rounded) trajectory.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import os
import re
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from tmsp.errors import ArgumentError, ConfigError, DataError, GenerationError

VOCAB = (
    "apple",
    "orange",
    "banana",
    "lemon",
    "can",
    "bottle",
    "sponge",
    "rxbar",
    "chips",
    "bowl",
    "drawer",
    "basket",
)
CONTAINERS = frozenset({"bowl", "drawer", "basket"})
ITEMS = tuple(c for c in VOCAB if c not in CONTAINERS)

TRAJ_DIM = 8
GRIPPER_ROW = 7
GRASP_EPS = 0.03
CLOSE_THRESHOLD = 0.5
MIN_SEPARATION = 0.05
DECIMALS = 5

TASK_KINDS = ("pick", "pick_from", "move_near")
FAILURE_MODES = ("miss_grasp", "wrong_object", "early_release", "no_close")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SceneObject:
    cls: str
    x: float
    y: float
    container: bool


@dataclass(frozen=True)
class GoalRegion:
    x0: float
    y0: float
    x1: float
    y1: float

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1


@dataclass(frozen=True)
class SceneState:
    objects: tuple[SceneObject, ...]
    goal: GoalRegion
    target: int

    @property
    def distractor_count(self) -> int:
        return len(self.objects) - 1

    @property
    def target_object(self) -> SceneObject:
        return self.objects[self.target]

    def index_of(self, cls: str) -> int:
        for i, obj in enumerate(self.objects):
            if obj.cls == cls:
                return i
        raise DataError(f"scene has no object of class {cls!r}")


@dataclass(frozen=True)
class Task:
    kind: str
    target: str
    reference: str | None = None


@dataclass(frozen=True)
class Episode:
    id: str
    instruction: str
    scene: SceneState
    trajectory: np.ndarray  # D x T
    label: int
    split: str

    @property
    def length(self) -> int:
        return self.trajectory.shape[1]


@dataclass(frozen=True)
class WorldConfig:
    n_objects: tuple[int, int] = (2, 5)
    t_range: tuple[int, int] = (40, 200)
    positive_rate: float = 0.5
    failure_mix: dict = field(
        default_factory=lambda: {"miss_grasp": 0.35, "wrong_object": 0.30, "early_release": 0.20, "no_close": 0.15}
    )
    task_mix: dict = field(default_factory=lambda: {"pick": 0.4, "pick_from": 0.3, "move_near": 0.3})
    separation: float = 0.12
    goal_side: tuple[float, float] = (0.1, 0.2)
    grasp_noise: float = 0.012
    miss_radius: tuple[float, float] = (0.06, 0.15)
    position_noise: float = 0.002
    split_ratios: tuple[float, float, float] = (0.85, 0.075, 0.075)

    def validate(self) -> None:
        problems = []
        lo, hi = self.n_objects
        if not 2 <= lo <= hi <= len(VOCAB):
            problems.append(f"n_objects must satisfy 2 <= lo <= hi <= {len(VOCAB)}")
        if not 1 <= self.t_range[0] <= self.t_range[1]:
            problems.append("t_range must satisfy 1 <= lo <= hi")
        if not 0.0 <= self.positive_rate <= 1.0:
            problems.append("positive_rate must lie in [0, 1]")
        if set(self.failure_mix) - set(FAILURE_MODES) or sum(self.failure_mix.values()) <= 0:
            problems.append(f"failure_mix keys must be among {FAILURE_MODES} with positive total")
        if set(self.task_mix) - set(TASK_KINDS) or sum(self.task_mix.values()) <= 0:
            problems.append(f"task_mix keys must be among {TASK_KINDS} with positive total")
        if self.separation < MIN_SEPARATION:
            problems.append(f"separation must be >= {MIN_SEPARATION}")
        if self.grasp_noise >= GRASP_EPS - 3 * self.position_noise:
            problems.append("grasp_noise leaves no margin below the grasp tolerance")
        if self.miss_radius[0] <= GRASP_EPS + 3 * self.position_noise:
            problems.append("miss_radius must start beyond the grasp tolerance")
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0 or not math.isclose(sum(self.split_ratios), 1.0):
            problems.append("split_ratios must be three non-negative numbers summing to 1")
        if problems:
            raise ConfigError("invalid world config: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown world config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# -- instructions -----------------------------------------------------------------

_PATTERNS = (
    ("pick_from", re.compile(r"^pick (\w+) from (\w+)$")),
    ("move_near", re.compile(r"^move (\w+) near (\w+)$")),
    ("pick", re.compile(r"^pick (\w+)$")),
)


def render_instruction(scene: SceneState, task: Task) -> str:
    if task.target != scene.target_object.cls:
        raise ArgumentError(f"task target {task.target!r} is not the scene target")
    if task.kind == "pick":
        return f"pick {task.target}"
    if task.kind == "pick_from":
        return f"pick {task.target} from {task.reference}"
    if task.kind == "move_near":
        return f"move {task.target} near {task.reference}"
    raise ArgumentError(f"unknown task kind {task.kind!r}")


def parse_instruction(text: str) -> Task:
    """Invert :func:`render_instruction`."""
    normalized = " ".join(text.strip().lower().split())
    for kind, pattern in _PATTERNS:
        m = pattern.match(normalized)
        if m and all(g in VOCAB for g in m.groups()):
            return Task(kind, m.group(1), m.group(2) if kind != "pick" else None)
    raise DataError(f"instruction does not match the template grammar: {text!r}")


# -- success oracle ------------------------------------------------------------------


def success_oracle(scene: SceneState, trajectory: np.ndarray) -> int:
    """1 iff the plan grasps the target and releases it inside the goal.

    The first step with gripper closure >= CLOSE_THRESHOLD must put the end
    effector within GRASP_EPS (inclusive, xy plane) of the target. The first
    later step with closure below the threshold is the release; its xy must
    lie in the goal box (inclusive). No close or no release means failure.
    """
    traj = np.asarray(trajectory)
    g = traj[GRIPPER_ROW]
    closed = g >= CLOSE_THRESHOLD
    if not closed.any():
        return 0
    t_close = int(np.argmax(closed))
    target = scene.target_object
    dist = math.hypot(float(traj[0, t_close]) - target.x, float(traj[1, t_close]) - target.y)
    if not dist <= GRASP_EPS:
        return 0
    released = ~closed[t_close + 1 :]
    if not released.any():
        return 0
    t_open = t_close + 1 + int(np.argmax(released))
    return int(scene.goal.contains(float(traj[0, t_open]), float(traj[1, t_open])))


# -- sampling --------------------------------------------------------------------------


def _weighted_choice(rng: np.random.Generator, mix: dict) -> str:
    keys = sorted(mix)
    w = np.array([mix[k] for k in keys], dtype=float)
    return keys[int(rng.choice(len(keys), p=w / w.sum()))]


def _sample_scene(rng: np.random.Generator, cfg: WorldConfig) -> tuple[SceneState, Task]:
    kind = _weighted_choice(rng, cfg.task_mix)
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    target_cls = ITEMS[int(rng.integers(len(ITEMS)))]
    classes = [target_cls]
    reference = None
    if kind == "pick_from":
        reference = sorted(CONTAINERS)[int(rng.integers(len(CONTAINERS)))]
        classes.append(reference)
    rest = [c for c in VOCAB if c not in classes]
    order = rng.permutation(len(rest))
    classes += [rest[i] for i in order[: n - len(classes)]]
    if kind == "move_near":
        reference = classes[1]

    for _ in range(100):
        pos: list[tuple[float, float]] = []
        ok = True
        for i in range(n):
            for _ in range(100):
                if i == 0 and kind == "pick_from":
                    p = tuple(rng.uniform(0.1, 0.9, size=2))
                elif i == 1 and kind == "pick_from":
                    ang = rng.uniform(0, 2 * np.pi)
                    r = rng.uniform(cfg.separation, cfg.separation + 0.04)
                    p = (pos[0][0] + r * math.cos(ang), pos[0][1] + r * math.sin(ang))
                    if not (0.05 <= p[0] <= 0.95 and 0.05 <= p[1] <= 0.95):
                        continue
                else:
                    p = tuple(rng.uniform(0.1, 0.9, size=2))
                if all(math.hypot(p[0] - q[0], p[1] - q[1]) >= cfg.separation for q in pos):
                    pos.append((float(p[0]), float(p[1])))
                    break
            else:
                ok = False
                break
        if not ok:
            continue
        goal = _sample_goal(rng, cfg, kind, pos, classes, reference)
        if goal is None:
            continue
        objects = tuple(SceneObject(c, round(x, DECIMALS), round(y, DECIMALS), c in CONTAINERS) for c, (x, y) in zip(classes, pos))
        # shuffle so the target is not always first
        perm = rng.permutation(n)
        objects = tuple(objects[i] for i in perm)
        target = int(np.flatnonzero(perm == 0)[0])
        return SceneState(objects, goal, target), Task(kind, target_cls, reference)
    raise GenerationError("could not place a feasible scene after 100 attempts")


def _sample_goal(rng, cfg, kind, pos, classes, reference) -> GoalRegion | None:
    side = float(rng.uniform(*cfg.goal_side))
    half = side / 2
    for _ in range(20):
        if kind == "move_near":
            ref = pos[classes.index(reference)]
            ang = rng.uniform(0, 2 * np.pi)
            r = half + cfg.separation / 2 + 0.02
            cx, cy = ref[0] + r * math.cos(ang), ref[1] + r * math.sin(ang)
        else:
            cx, cy = rng.uniform(half, 1 - half, size=2)
        cx = min(max(cx, half), 1 - half)
        cy = min(max(cy, half), 1 - half)
        goal = GoalRegion(*(round(float(v), DECIMALS) for v in (cx - half, cy - half, cx + half, cy + half)))
        tx, ty = pos[0]
        # target must start well outside the goal so placing is a real move
        if tx < goal.x0 - 0.08 or tx > goal.x1 + 0.08 or ty < goal.y0 - 0.08 or ty > goal.y1 + 0.08:
            return goal
    return None


def _unit(rng) -> tuple[float, float]:
    a = rng.uniform(0, 2 * np.pi)
    return math.cos(a), math.sin(a)


def _plan(rng: np.random.Generator, cfg: WorldConfig, scene: SceneState, mode: str | None, T: int) -> np.ndarray:
    target = scene.target_object
    goal = scene.goal
    if mode == "miss_grasp":
        r = rng.uniform(*cfg.miss_radius)
        ux, uy = _unit(rng)
        gx, gy = target.x + r * ux, target.y + r * uy
    elif mode == "wrong_object":
        others = [o for i, o in enumerate(scene.objects) if i != scene.target]
        other = others[int(rng.integers(len(others)))]
        r = rng.uniform(0, cfg.grasp_noise)
        ux, uy = _unit(rng)
        gx, gy = other.x + r * ux, other.y + r * uy
    else:
        r = rng.uniform(0, cfg.grasp_noise)
        ux, uy = _unit(rng)
        gx, gy = target.x + r * ux, target.y + r * uy
    gx, gy = float(np.clip(gx, 0.0, 1.0)), float(np.clip(gy, 0.0, 1.0))

    margin = 0.02
    px = rng.uniform(goal.x0 + margin, goal.x1 - margin)
    py = rng.uniform(goal.y0 + margin, goal.y1 - margin)
    sx, sy = rng.uniform(0.1, 0.9, size=2)
    hold = 1.0 if mode != "no_close" else float(rng.uniform(0.0, 0.35))

    fa = rng.uniform(0.25, 0.35)
    fb = rng.uniform(0.68, 0.78)
    keys = [
        (0.0, sx, sy, 0.25, 0.0),
        (fa - 0.08, gx, gy, 0.15, 0.0),
        (fa, gx, gy, 0.02, 0.0),
        (fa + 0.04, gx, gy, 0.02, hold),
        (fa + 0.08, gx, gy, 0.02, hold),
    ]
    if mode == "early_release":
        s = rng.uniform(0.3, 0.6)
        rx, ry = gx + s * (px - gx), gy + s * (py - gy)
        fm = (fa + 0.08 + fb - 0.08) / 2
        keys += [
            (fm, rx, ry, 0.15, hold),
            (fm + 0.04, rx, ry, 0.15, 0.0),
            (fb - 0.08, px, py, 0.15, 0.0),
            (fb, px, py, 0.04, 0.0),
        ]
    else:
        keys += [(fb - 0.08, px, py, 0.15, hold), (fb, px, py, 0.04, hold)]
    dx, dy = _unit(rng)
    keys += [
        (fb + 0.04, px, py, 0.04, 0.0),
        (fb + 0.08, px, py, 0.04, 0.0),
        (1.0, px + 0.1 * dx, py + 0.1 * dy, 0.25, 0.0),
    ]
    kt = np.array([k[0] for k in keys])
    kv = np.array([k[1:] for k in keys])
    tt = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    xyzg = np.stack([np.interp(tt, kt, kv[:, j]) for j in range(4)])
    noise = np.clip(rng.normal(0.0, cfg.position_noise, size=(3, T)), -3 * cfg.position_noise, 3 * cfg.position_noise)
    xyzg[:3] += noise
    traj = np.zeros((TRAJ_DIM, T))
    traj[0] = np.clip(xyzg[0], 0.0, 1.0)
    traj[1] = np.clip(xyzg[1], 0.0, 1.0)
    traj[2] = np.clip(xyzg[2], 0.0, 1.0)
    base = rng.normal(0.0, 0.05, size=3)
    traj[3:6] = np.clip(base[:, None] + rng.normal(0.0, 0.005, size=(3, T)), -1.0, 1.0)
    traj[GRIPPER_ROW] = np.clip(xyzg[3], 0.0, 1.0)
    return np.round(traj, DECIMALS) + 0.0  # +0.0 folds -0.0


def sample_episode(
    seed,
    cfg: WorldConfig | None = None,
    episode_id: str = "ep0",
    split: str = "train",
    want_success: bool | None = None,
) -> tuple[Episode, str]:
    """Draw one labelled episode. Returns the episode and the mode used ("success" or a failure mode).

    The outcome is drawn at ``cfg.positive_rate`` unless ``want_success`` fixes it.
    """
    cfg = cfg or WorldConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    draw = bool(rng.random() < cfg.positive_rate)
    want_success = draw if want_success is None else bool(want_success)
    mode = None if want_success else _weighted_choice(rng, cfg.failure_mix)
    scene, task = _sample_scene(rng, cfg)
    instruction = render_instruction(scene, task)
    for _ in range(100):
        T = int(rng.integers(cfg.t_range[0], cfg.t_range[1] + 1))
        traj = _plan(rng, cfg, scene, mode, T)
        label = success_oracle(scene, traj)
        if label == int(want_success):
            return Episode(episode_id, instruction, scene, traj, label, split), mode or "success"
    raise GenerationError(f"episode {episode_id}: could not realise mode {mode or 'success'} in 100 attempts")


# -- symmetries ---------------------------------------------------------------------------


def reflect_episode(ep: Episode, k: int) -> Episode:
    """Apply element ``k`` (0..7) of the square's symmetry group to scene and plan.

    Bit 0 mirrors x, bit 1 mirrors y, bit 2 swaps the axes. Distances and
    axis-aligned boxes map onto themselves, so the oracle label is preserved
    up to floating-point rounding; callers should re-check it.
    """
    if not 0 <= k < 8:
        raise ArgumentError(f"symmetry index must be in 0..7, got {k}")

    def m(x, y):
        if k & 1:
            x = 1.0 - x
        if k & 2:
            y = 1.0 - y
        return (y, x) if k & 4 else (x, y)

    objects = tuple(SceneObject(o.cls, *m(o.x, o.y), o.container) for o in ep.scene.objects)
    g = ep.scene.goal
    (ax, ay), (bx, by) = m(g.x0, g.y0), m(g.x1, g.y1)
    goal = GoalRegion(min(ax, bx), min(ay, by), max(ax, bx), max(ay, by))
    traj = np.array(ep.trajectory, dtype=np.float64)
    traj[0], traj[1] = m(traj[0].copy(), traj[1].copy())
    scene = SceneState(objects, goal, ep.scene.target)
    return Episode(ep.id, ep.instruction, scene, traj, ep.label, ep.split)


def symmetric_variants(ep: Episode) -> list[Episode]:
    """All label-preserving reflections of ``ep`` (the identity included)."""
    out = [ep]
    for k in range(1, 8):
        v = reflect_episode(ep, k)
        if success_oracle(v.scene, v.trajectory) == ep.label:
            out.append(v)
    return out


# -- dataset files ------------------------------------------------------------------------


def split_for(seed: int, episode_id: str, ratios=(0.85, 0.075, 0.075)) -> str:
    digest = hashlib.sha256(f"{seed}:{episode_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0**64
    if u < ratios[0]:
        return "train"
    if u < ratios[0] + ratios[1]:
        return "val"
    return "test"


def episode_to_record(ep: Episode) -> dict:
    return {
        "id": ep.id,
        "instruction": ep.instruction,
        "scene": {
            "objects": [{"class": o.cls, "x": o.x, "y": o.y, "container": o.container} for o in ep.scene.objects],
            "goal": {"x0": ep.scene.goal.x0, "y0": ep.scene.goal.y0, "x1": ep.scene.goal.x1, "y1": ep.scene.goal.y1},
        },
        "trajectory": ep.trajectory.T.tolist(),
        "label": ep.label,
        "split": ep.split,
    }


def episode_from_record(rec: dict) -> Episode:
    try:
        eid = str(rec["id"])
    except (KeyError, TypeError):
        raise DataError("episode record has no id") from None
    try:
        objects = tuple(
            SceneObject(str(o["class"]), float(o["x"]), float(o["y"]), bool(o["container"])) for o in rec["scene"]["objects"]
        )
        g = rec["scene"]["goal"]
        goal = GoalRegion(float(g["x0"]), float(g["y0"]), float(g["x1"]), float(g["y1"]))
        instruction = str(rec["instruction"])
        traj = np.asarray(rec["trajectory"], dtype=np.float64)
        label = rec["label"]
        split = rec["split"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"episode {eid}: malformed record ({exc})") from None
    if traj.ndim != 2 or traj.shape[1] != TRAJ_DIM or traj.shape[0] < 1:
        raise DataError(f"episode {eid}: trajectory must be T x {TRAJ_DIM}, got {traj.shape}")
    if not np.isfinite(traj).all():
        raise DataError(f"episode {eid}: trajectory contains NaN or Inf")
    if label not in (0, 1):
        raise DataError(f"episode {eid}: label must be 0 or 1, got {label!r}")
    if split not in SPLITS:
        raise DataError(f"episode {eid}: unknown split {split!r}")
    if not objects:
        raise DataError(f"episode {eid}: scene has no objects")
    task = parse_instruction(instruction)
    scene = SceneState(objects, goal, 0)
    scene = SceneState(objects, goal, scene.index_of(task.target))
    return Episode(eid, instruction, scene, traj.T.copy(), int(label), split)


def iter_episodes(path) -> Iterator[Episode]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid record ({exc.msg})") from None
            yield episode_from_record(rec)


def load_episodes(path, split: str | None = None) -> list[Episode]:
    eps = list(iter_episodes(path))
    return [e for e in eps if e.split == split] if split else eps


def _dumps(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"), ensure_ascii=False)


def write_episodes(episodes: Iterable[Episode], path) -> None:
    """Write records atomically; on failure no partial file is left behind."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for ep in episodes:
                fh.write(_dumps(episode_to_record(ep)))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def generate_episodes(n: int, seed: int, cfg: WorldConfig | None = None) -> tuple[list[Episode], Counter]:
    cfg = cfg or WorldConfig()
    cfg.validate()
    if n < 1:
        raise ArgumentError(f"n must be >= 1, got {n}")
    # exactly round(n * rate) successes in a seeded random order, so the label
    # balance of a file does not carry binomial noise
    outcomes = np.zeros(n, dtype=bool)
    outcomes[: int(round(n * cfg.positive_rate))] = True
    outcomes = np.random.default_rng([seed, n]).permutation(outcomes)
    episodes, modes = [], Counter()
    for i in range(n):
        eid = f"ep{i:06d}"
        ep, mode = sample_episode([seed, i], cfg, eid, split_for(seed, eid, cfg.split_ratios), bool(outcomes[i]))
        episodes.append(ep)
        modes[mode] += 1
    return episodes, modes


def dataset_stats(episodes: list[Episode], modes: Counter | None = None) -> dict:
    stats: dict = {"n": len(episodes), "positive_rate": _rate(episodes), "splits": {}}
    for s in SPLITS:
        sub = [e for e in episodes if e.split == s]
        stats["splits"][s] = {"count": len(sub), "positive_rate": _rate(sub)}
    if modes is not None:
        stats["modes"] = dict(sorted(modes.items()))
    stats["length"] = {"min": min(e.length for e in episodes), "max": max(e.length for e in episodes)}
    return stats


def _rate(eps: list[Episode]) -> float | None:
    return sum(e.label for e in eps) / len(eps) if eps else None


def generate_dataset(n: int, seed: int, cfg: WorldConfig | None, out_path) -> dict:
    """Write ``n`` episodes to ``out_path`` (JSON lines) and return a stats report."""
    cfg = cfg or WorldConfig()
    episodes, modes = generate_episodes(n, seed, cfg)
    write_episodes(episodes, out_path)
    stats = dataset_stats(episodes, modes)
    stats["seed"] = seed
    return stats
