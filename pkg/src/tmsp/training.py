"""Training and evaluation loop, multi-seed aggregation and the trajectory ablation."""

from __future__ import annotations

import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from tmsp.checkpoint import load_checkpoint, save_checkpoint
from tmsp.core import OptimizerState, adam_step, clip_grad_norm
from tmsp.errors import ConfigError, DataError, DivergenceError
from tmsp.features import FeatureBundle, featurize
from tmsp.model import ModelConfig, ModelParams, collate, init_params, loss_and_grads, predict_proba
from tmsp.trajectory import trajectory_stats
from tmsp.world import Episode, load_episodes, symmetric_variants

log = logging.getLogger(__name__)

VARIANTS = (("full", "conv_pool"), ("linear", "linear_baseline"), ("disabled", "disabled"))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 3e-4
    schedule: str = "constant"
    warmup_steps: int = 0
    seeds: tuple = (0, 1, 2, 3, 4)
    patience: int = 0
    clip_norm: float = 1.0
    max_steps: int | None = None
    normalize: bool = False
    augment: bool = False
    train_split: str = "train"
    val_split: str = "val"
    eval_split: str = "test"

    def validate(self) -> "TrainConfig":
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.seeds:
            problems.append("at least one seed is required")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if self.schedule not in ("constant", "cosine"):
            problems.append("schedule must be 'constant' or 'cosine'")
        if self.patience < 0 or self.warmup_steps < 0:
            problems.append("patience and warmup_steps must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            problems.append("max_steps must be >= 1")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        kw = dict(d)
        if "seeds" in kw:
            kw["seeds"] = tuple(int(s) for s in (kw["seeds"] if isinstance(kw["seeds"], (list, tuple)) else [kw["seeds"]]))
        return cls(**kw)


@dataclass
class Confusion:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else float("nan")

    @classmethod
    def count(cls, decisions: np.ndarray, labels: np.ndarray) -> "Confusion":
        d = np.asarray(decisions, dtype=bool)
        y = np.asarray(labels, dtype=bool)
        return cls(int(np.sum(d & y)), int(np.sum(~d & ~y)), int(np.sum(d & ~y)), int(np.sum(~d & y)))


@dataclass
class SeedRun:
    seed: int
    accuracy: float
    confusion: Confusion
    train_loss: list[float]
    val_accuracy: list[float]
    best_epoch: int
    epoch_seconds: list[float]
    latency_ms: float
    checkpoint: str | None = None


@dataclass
class MetricsReport:
    variant: str
    split: str
    runs: list[SeedRun] = field(default_factory=list)

    @property
    def accuracies(self) -> list[float]:
        return [r.accuracy for r in self.runs]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        acc = self.accuracies
        return statistics.stdev(acc) if len(acc) > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "split": self.split,
            "mean_accuracy": self.mean,
            "std_accuracy": self.std,
            "runs": [asdict(r) for r in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# -- data ----------------------------------------------------------------------------


@dataclass
class SplitData:
    bundles: list[FeatureBundle]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.bundles)


def prepare(episodes: Sequence[Episode], config: ModelConfig | None = None) -> SplitData:
    """Featurize episodes with the providers matching ``config``'s input widths."""
    config = config or ModelConfig()
    text, scene = config.text_spec(), config.scene_spec()
    bundles = [featurize(e, text, scene) for e in episodes]
    return SplitData(bundles, np.array([e.label for e in episodes], dtype=np.int64))


def load_split(path, split: str, config: ModelConfig | None = None, augment: bool = False) -> SplitData:
    """Featurize one split; ``augment`` adds every label-preserving reflection of each episode."""
    episodes = load_episodes(path, split=split)
    if not episodes:
        raise DataError(f"{path}: split {split!r} is empty")
    if augment:
        episodes = [v for ep in episodes for v in symmetric_variants(ep)]
    return prepare(episodes, config)


# -- training -------------------------------------------------------------------------


def lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "cosine" and total > 1:
        frac = (step - cfg.warmup_steps) / max(1, total - cfg.warmup_steps)
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * min(1.0, frac)))
    return cfg.lr


def accuracy_of(params: ModelParams, config: ModelConfig, data: SplitData) -> tuple[float, Confusion, np.ndarray]:
    probs = predict_proba(params, config, data.bundles)
    conf = Confusion.count(probs >= config.threshold, data.labels)
    return conf.accuracy, conf, probs


@dataclass
class FitResult:
    params: ModelParams
    config: ModelConfig
    train_loss: list[float]
    val_accuracy: list[float]
    best_epoch: int
    epoch_seconds: list[float]
    steps: int


def fit(train: SplitData, val: SplitData | None, model_config: ModelConfig, cfg: TrainConfig, seed: int) -> FitResult:
    """Train one model; keeps the parameters with the best validation accuracy."""
    cfg.validate()
    if len(train) == 0:
        raise DataError("training split is empty")
    if cfg.normalize and model_config.traj_mean is None:
        mean, std = trajectory_stats(b.trajectory for b in train.bundles)
        model_config = replace(model_config, traj_mean=tuple(map(float, mean)), traj_std=tuple(map(float, std)))
    model_config.validate()
    params = init_params(model_config, seed)
    state = OptimizerState(lr=cfg.lr)
    order_rng = np.random.default_rng([seed, 1])
    drop_rng = np.random.default_rng([seed, 2])
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    best_params, best_acc, best_epoch = params, -1.0, 0
    losses, val_accs, epoch_secs = [], [], []
    step, since_best = 0, 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = order_rng.permutation(n)
        epoch_loss, seen = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            if step >= total:
                break
            idx = perm[s : s + cfg.batch_size]
            batch = collate([train.bundles[i] for i in idx], model_config)
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                loss, grads, _ = loss_and_grads(batch, train.labels[idx], params, model_config, drop_rng)
            lr = lr_at(step, total, cfg)
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became {loss} at step {step} (epoch {epoch}, lr {lr:g})")
            grads, _ = clip_grad_norm(grads, cfg.clip_norm)
            new, state = adam_step(params.tensors, grads, state, lr=lr)
            params = ModelParams(new)
            epoch_loss += loss * len(idx)
            seen += len(idx)
            step += 1
        if seen == 0:
            break
        losses.append(epoch_loss / seen)
        if val is not None and len(val):
            acc = accuracy_of(params, model_config, val)[0]
        else:
            acc = accuracy_of(params, model_config, train)[0]
        val_accs.append(acc)
        epoch_secs.append(time.perf_counter() - t0)
        log.info("seed %d epoch %d loss %.4f val_acc %.4f (%.1fs)", seed, epoch, losses[-1], acc, epoch_secs[-1])
        if acc > best_acc:
            best_params, best_acc, best_epoch, since_best = params, acc, epoch, 0
        else:
            since_best += 1
            if cfg.patience and since_best >= cfg.patience:
                break
    if not losses:
        best_params = params
    return FitResult(best_params, model_config, losses, val_accs, best_epoch, epoch_secs, step)


def evaluate_params(params: ModelParams, config: ModelConfig, data: SplitData) -> tuple[float, Confusion, float]:
    if len(data) == 0:
        raise DataError("evaluation split is empty")
    t0 = time.perf_counter()
    acc, conf, _ = accuracy_of(params, config, data)
    latency = (time.perf_counter() - t0) * 1000.0 / len(data)
    return acc, conf, latency


def _train_seed(args) -> SeedRun:
    path, model_config, cfg, seed, out_dir, variant = args
    train = load_split(path, cfg.train_split, model_config, augment=cfg.augment)
    val = load_split(path, cfg.val_split, model_config) if cfg.val_split else None
    test = load_split(path, cfg.eval_split, model_config)
    res = fit(train, val, model_config, cfg, seed)
    acc, conf, latency = evaluate_params(res.params, res.config, test)
    ckpt = None
    if out_dir is not None:
        ckpt = str(Path(out_dir) / f"{variant}_seed{seed}.ckpt")
        save_checkpoint(res.params, res.config, ckpt, extra={"seed": seed, "variant": variant})
    return SeedRun(seed, acc, conf, res.train_loss, res.val_accuracy, res.best_epoch, res.epoch_seconds, latency, ckpt)


def worker_count(n_jobs: int) -> int:
    try:
        cap = int(os.environ.get("TMSP_THREADS", "1"))
    except ValueError:
        raise ConfigError("TMSP_THREADS must be an integer") from None
    return max(1, min(cap, n_jobs))


def _map(jobs: list) -> list[SeedRun]:
    workers = worker_count(len(jobs))
    if workers == 1:
        return [_train_seed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_seed, jobs))


def train(dataset_path, model_config: ModelConfig, cfg: TrainConfig, out_dir=None, variant: str = "model") -> MetricsReport:
    """Train one model per seed; each best-validation checkpoint is written under ``out_dir``."""
    model_config.validate()
    cfg.validate()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(str(dataset_path), model_config, cfg, seed, out_dir, variant) for seed in cfg.seeds]
    return MetricsReport(variant, cfg.eval_split, _map(jobs))


def evaluate(checkpoint, dataset_path, split: str = "test") -> MetricsReport:
    params, config = load_checkpoint(checkpoint)
    data = load_split(dataset_path, split, config)
    acc, conf, latency = evaluate_params(params, config, data)
    return MetricsReport("checkpoint", split, [SeedRun(-1, acc, conf, [], [], -1, [], latency, str(checkpoint))])


@dataclass
class AblationReport:
    reports: dict[str, MetricsReport]

    def rows(self) -> list[tuple[str, float, float]]:
        return [(name, 100 * r.mean, 100 * r.std) for name, r in self.reports.items()]

    def table(self) -> str:
        lines = ["| Variant  | Accuracy [%]   |", "|----------|----------------|"]
        for name, mean, std in self.rows():
            lines.append(f"| {name:<8} | {mean:5.1f} ± {std:4.2f}   |")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {name: r.to_dict() for name, r in self.reports.items()}


def run_ablation(dataset_path, base_config: ModelConfig, cfg: TrainConfig, out_dir=None) -> AblationReport:
    """Train the full, linear-baseline and trajectory-disabled variants over every seed."""
    base_config.validate()
    cfg.validate()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    jobs, owners = [], []
    for name, mode in VARIANTS:
        mc = replace(base_config, traj_mode=mode)
        for seed in cfg.seeds:
            jobs.append((str(dataset_path), mc, cfg, seed, out_dir, name))
            owners.append(name)
    runs = _map(jobs)
    reports = {name: MetricsReport(name, cfg.eval_split) for name, _ in VARIANTS}
    for name, run in zip(owners, runs):
        reports[name].runs.append(run)
    return AblationReport(reports)
