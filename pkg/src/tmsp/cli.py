"""``tmsp`` command line: gen-data, train, eval, ablate, predict, gradcheck.

Exit codes: 0 success, 1 gradient check failure, 2 usage/config/data error,
3 I/O error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from tmsp.checkpoint import load_checkpoint
from tmsp.core import corrupt_op
from tmsp.errors import ConfigError, DataError, DivergenceError, EpisodeLookupError, TMSPError
from tmsp.features import featurize
from tmsp.model import ModelConfig, predict_proba
from tmsp.training import TrainConfig, evaluate, run_ablation, train
from tmsp.world import WorldConfig, generate_dataset, load_episodes

log = logging.getLogger("tmsp")

EXIT_OK, EXIT_GRADCHECK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4
SECTIONS = ("world", "model", "train")


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)?(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"world": self.world.to_dict(), "model": self.model.to_dict(), "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            cfg = cls(
                WorldConfig.from_dict(d.get("world") or {}),
                ModelConfig.from_dict(d.get("model") or {}),
                TrainConfig.from_dict(d.get("train") or {}),
            )
            cfg.world.validate()
            cfg.model.validate()
            cfg.train.validate()
        except TypeError as exc:
            raise ConfigError(f"bad config value: {exc}") from None
        return cfg


def parse_override(text: str) -> tuple[str, str, object]:
    key, sep, raw = text.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"override {text!r}: unknown section {section!r}")
    return section, name, _yaml(raw)


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    """File values first, then ``section.key=value`` overrides; unknown keys are rejected."""
    data: dict = {}
    if path:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = _yaml(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        section, name, value = parse_override(item)
        data.setdefault(section, {})
        if data[section] is None:
            data[section] = {}
        data[section][name] = value
    return RunConfig.from_dict(data)


def write_snapshot(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    write_snapshot(cfg, out)
    stats = generate_dataset(args.n, args.seed, cfg.world, out / "episodes.jsonl")
    _write_json(out / "stats.json", stats)
    print(json.dumps(stats, sort_keys=True))
    return EXIT_OK


def _seeded(cfg: RunConfig, seed: int | None) -> RunConfig:
    return cfg if seed is None else replace(cfg, train=replace(cfg.train, seeds=(seed,)))


def cmd_train(args, cfg: RunConfig) -> int:
    cfg = _seeded(cfg, args.seed)
    out = Path(args.out)
    write_snapshot(cfg, out)
    report = train(args.data, cfg.model, cfg.train, out_dir=out, variant="model")
    _write_json(out / "metrics.json", report.to_dict())
    for run in report.runs:
        print(f"seed {run.seed}: {cfg.train.eval_split} accuracy {run.accuracy:.4f}  checkpoint {run.checkpoint}")
    print(f"mean {report.mean:.4f} ± {report.std:.4f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    write_snapshot(cfg, out)
    report = evaluate(args.checkpoint, args.data, args.split)
    _write_json(out / "metrics.json", report.to_dict())
    run = report.runs[0]
    c = run.confusion
    print(f"{args.split}: accuracy {run.accuracy:.4f}  TP {c.tp} TN {c.tn} FP {c.fp} FN {c.fn}  latency {run.latency_ms:.3f} ms")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    cfg = _seeded(cfg, args.seed)
    out = Path(args.out)
    write_snapshot(cfg, out)
    report = run_ablation(args.data, cfg.model, cfg.train, out_dir=out)
    _write_json(out / "ablation.json", report.to_dict())
    table = report.table()
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    params, model_cfg = load_checkpoint(args.checkpoint)
    episodes = {e.id: e for e in load_episodes(args.episode_file)}
    ids = [i for chunk in (args.ids or []) for i in chunk.split(",") if i] or list(episodes)
    missing = [i for i in ids if i not in episodes]
    if missing:
        raise EpisodeLookupError(f"unknown episode ids: {', '.join(missing)}")
    text, scene = model_cfg.text_spec(), model_cfg.scene_spec()
    bundles = [featurize(episodes[i], text, scene) for i in ids]
    probs = predict_proba(params, model_cfg, bundles)
    for i, p in zip(ids, probs):
        p = min(max(float(p), 0.0), 1.0)
        print(f"{i}\t{p:.6f}\t{'success' if p >= model_cfg.threshold else 'fail'}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from tmsp.gradsuite import TINY_CONFIG, model_checks, op_checks

    model_cfg = TINY_CONFIG if args.config is None and not args.overrides else cfg.model
    if args.out:
        write_snapshot(replace(cfg, model=model_cfg), Path(args.out))
    corrupt = corrupt_op(args.corrupt_op) if args.corrupt_op else contextlib.nullcontext()
    with corrupt:
        ops = op_checks(args.seed)
        groups = model_checks(model_cfg, args.seed)
    failed = []
    for kind, checks in (("op", ops), ("group", groups)):
        for c in checks:
            status = "ok" if c.ok else "FAIL"
            print(f"{kind:<5} {c.name:<28} max_rel_err {c.error:.3e}  tol {c.tol:.0e}  {status}")
            if not c.ok:
                failed.append(c.name)
    if failed:
        print(f"gradient check failed: {', '.join(failed)}")
        return EXIT_GRADCHECK
    print(f"all {len(ops)} ops and {len(groups)} parameter groups pass")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tmsp", description="Trajectory-conditioned manipulation success prediction.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML file with world/model/train sections")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("overrides", nargs="*", metavar="section.key=value")

    g = sub.add_parser("gen-data", help="generate a synthetic episode file")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    common(g)

    for name, fn_help in (("train", "train one model per seed"), ("ablate", "train full, linear and disabled variants")):
        t = sub.add_parser(name, help=fn_help)
        t.add_argument("--data", required=True, help="episode file")
        t.add_argument("--seed", type=int, help="train this seed only")
        common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    common(e)

    pr = sub.add_parser("predict", help="print probabilities for episode ids")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--episode-file", required=True)
    pr.add_argument("--ids", nargs="*", help="episode ids (space or comma separated); default all")

    gc = sub.add_parser("gradcheck", help="float64 finite-difference check of ops and parameter groups")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--corrupt-op", help=argparse.SUPPRESS)
    common(gc, out_required=False)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(getattr(args, "config", None), getattr(args, "overrides", []) or [])
        return COMMANDS[args.command](args, cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TMSPError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
