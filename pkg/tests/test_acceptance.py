"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` to watch the lines as they
are produced; they are printed even under capture. The synthetic benchmark
(criteria 5 and 8) trains 15 models and takes roughly 20 minutes.
"""

import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import resimulate
from tmsp.checkpoint import decode_checkpoint, load_checkpoint, save_checkpoint
from tmsp.cli import load_config
from tmsp.core import Tensor, precision
from tmsp.errors import FormatError
from tmsp.features import read_feature_file, write_feature_file
from tmsp.gradsuite import TINY_CONFIG, model_checks, op_checks
from tmsp.model import init_params
from tmsp.trajectory import TrajEncoderParams, encode_trajectory
from tmsp.world import episode_from_record, sample_episode, success_oracle

ROOT = Path(__file__).resolve().parents[1]
BENCHMARK = ROOT / "configs" / "benchmark.yaml"
TOL = 3.0  # percentage points on 5(a) and 5(b)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return emit


def cli(*args, cwd=None):
    proc = subprocess.run(
        [sys.executable, "-m", "tmsp.cli", *map(str, args)], capture_output=True, text=True, cwd=cwd
    )
    assert proc.returncode == 0, proc.stderr
    return proc.stdout


# -- 1: gradients --------------------------------------------------------------------------


def test_criterion_1_gradient_suite(report):
    t0 = time.perf_counter()
    ops = op_checks(0)
    groups = model_checks(TINY_CONFIG, 0)
    elapsed = time.perf_counter() - t0
    bad = [c.name for c in ops + groups if not c.ok or c.tol > 1e-3]
    worst = max(c.error for c in ops + groups)
    ok = not bad and elapsed < 120
    report(1, ok, f"{len(ops)} ops, {len(groups)} groups, worst rel err {worst:.2e}, failing {bad}, {elapsed:.1f}s")


# -- 2: shape contract ---------------------------------------------------------------------


def test_criterion_2_shape_contract(report):
    rng = np.random.default_rng(0)
    with precision(np.float64):
        kernel = Tensor(rng.normal(size=(8, 1, 5)), dtype=np.float64)
        p = TrajEncoderParams("conv_pool", 16, kernel=kernel, bias=Tensor(np.zeros(8), dtype=np.float64), groups=8)
        shapes = {T: encode_trajectory(rng.normal(size=(8, T)), p).shape for T in (1, 2, 15, 16, 17, 1000)}
        delta = np.zeros((8, 1, 5))
        delta[:, 0, 2] = 1.0
        ident = TrajEncoderParams(
            "conv_pool", 16, kernel=Tensor(delta, dtype=np.float64), bias=Tensor(np.zeros(8), dtype=np.float64),
            activation=False, groups=8,
        )
        x = rng.normal(size=(8, 16))
        err = float(np.abs(encode_trajectory(x, ident).data - x).max())
    ok = all(s == (8, 16) for s in shapes.values()) and err < 1e-12
    report(2, ok, f"shapes {sorted(set(shapes.values()))}, delta identity max err {err:.1e}")


# -- 3: oracle equivalence -----------------------------------------------------------------


def test_criterion_3_oracle_equivalence(report, tmp_path):
    agree = 0
    for i in range(200):
        ep, _ = sample_episode([2024, i])
        agree += success_oracle(ep.scene, ep.trajectory) == resimulate(ep.scene, ep.trajectory) == ep.label
    cli("gen-data", "--n", 300, "--seed", 5, "--out", tmp_path)
    lines = (tmp_path / "episodes.jsonl").read_text(encoding="utf-8").splitlines()
    bad = 0
    for line in lines:
        rec = json.loads(line)
        ep = episode_from_record(rec)
        bad += not (rec["label"] == success_oracle(ep.scene, ep.trajectory) == resimulate(ep.scene, ep.trajectory))
    report(3, agree == 200 and bad == 0 and len(lines) == 300, f"{agree}/200 agree, {bad}/{len(lines)} records invalid")


# -- 4: overfit ------------------------------------------------------------------------------


def test_criterion_4_overfit(report):
    from tmsp.model import ModelConfig
    from tmsp.training import TrainConfig, accuracy_of, fit, prepare
    from tmsp.world import WorldConfig, generate_episodes

    mc = ModelConfig(d_model=32, n_layers=2, n_heads=4, d_ff=64, d_trm=16, dropout=0.0, txt_dim=32)
    episodes, _ = generate_episodes(32, 11, WorldConfig(t_range=(40, 80)))
    data = prepare(episodes, mc)
    t0 = time.perf_counter()
    res = fit(data, None, mc, TrainConfig(epochs=300, batch_size=32, lr=1e-3, seeds=(0,), max_steps=300), seed=0)
    elapsed = time.perf_counter() - t0
    acc = accuracy_of(res.params, res.config, data)[0]
    ok = len(episodes) == 32 and res.steps <= 300 and acc >= 0.95 and elapsed < 60
    report(4, ok, f"train accuracy {acc:.3f} after {res.steps} steps in {elapsed:.1f}s")


# -- 5 and 8: synthetic benchmark ----------------------------------------------------------------


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("benchmark")
    load_config(str(BENCHMARK), [])  # fail fast on a broken config
    t0 = time.perf_counter()
    stats = json.loads(cli("gen-data", "--n", 5000, "--seed", 0, "--config", BENCHMARK, "--out", out / "data"))
    cli("ablate", "--data", out / "data" / "episodes.jsonl", "--config", BENCHMARK, "--out", out / "ablate")
    elapsed = time.perf_counter() - t0
    results = json.loads((out / "ablate" / "ablation.json").read_text(encoding="utf-8"))
    table = (out / "ablate" / "ablation.txt").read_text(encoding="utf-8")
    return stats, results, table, elapsed


def pct(results, name):
    return 100 * results[name]["mean_accuracy"], 100 * results[name]["std_accuracy"]


def test_criterion_5a_disabled_near_chance(report, benchmark):
    stats, results, _, _ = benchmark
    mean, std = pct(results, "disabled")
    counts = {k: v["count"] for k, v in stats["splits"].items()}
    report("5a", mean <= 55 + TOL, f"disabled {mean:.1f} ± {std:.2f} (limit {55 + TOL:.0f}); splits {counts}")


def test_criterion_5b_full_model(report, benchmark):
    _, results, _, _ = benchmark
    mean, std = pct(results, "full")
    report("5b", mean >= 85 - TOL, f"full {mean:.1f} ± {std:.2f} (limit {85 - TOL:.0f})")


def test_criterion_5c_full_vs_linear(report, benchmark):
    _, results, _, _ = benchmark
    full, lin = pct(results, "full")[0], pct(results, "linear")[0]
    report("5c", full >= lin - 2, f"full {full:.1f} vs linear {lin:.1f}")


def test_criterion_5_runtime(report, benchmark):
    stats, _, _, elapsed = benchmark
    ok = elapsed < 1800 and stats["n"] == 5000 and stats["positive_rate"] == 0.5
    report("5 runtime", ok, f"gen-data + ablate {elapsed:.0f}s (limit 1800s), positive rate {stats['positive_rate']}")


def test_criterion_8_ablation_table(report, benchmark):
    _, results, table, _ = benchmark
    lines = table.strip().splitlines()
    rows = [[c.strip() for c in line.strip("|").split("|")] for line in lines[2:]]
    ok = (
        [c.strip() for c in lines[0].strip("|").split("|")] == ["Variant", "Accuracy [%]"]
        and [r[0] for r in rows] == ["full", "linear", "disabled"]
        and all(len(results[r[0]]["runs"]) == 5 for r in rows)
        and all(r[1] == "{:.1f} ± {:.2f}".format(*pct(results, r[0])) for r in rows)
    )
    report(8, ok, " / ".join(f"{r[0]} {r[1]}" for r in rows))


# -- 6: determinism --------------------------------------------------------------------------


def test_criterion_6_determinism(report, tmp_path):
    small = ["model.d_model=16", "model.n_heads=2", "model.d_ff=32", "model.txt_dim=16", "model.d_trm=8",
             "train.epochs=2", "train.max_steps=8", "train.seeds=[3]"]
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        cli("gen-data", "--n", 80, "--seed", 9, "--out", d / "data", "world.split_ratios=[0.6,0.2,0.2]")
        cli("train", "--data", d / "data" / "episodes.jsonl", "--out", d / "train", *small)
        ckpt = d / "train" / "model_seed3.ckpt"
        pred = cli("predict", "--checkpoint", ckpt, "--episode-file", d / "data" / "episodes.jsonl")
        metrics = json.loads((d / "train" / "metrics.json").read_text(encoding="utf-8"))["runs"][0]
        outs.append(((d / "data" / "episodes.jsonl").read_bytes(), metrics["train_loss"], metrics["val_accuracy"],
                     ckpt.read_bytes(), pred))
    same = [x == y for x, y in zip(*outs)]
    report(6, all(same), f"dataset/loss/val curve/checkpoint/predictions identical: {same}")


# -- 7: format round trips -------------------------------------------------------------------


def test_criterion_7_format_round_trips(report, tmp_path):
    rng = np.random.default_rng(7)
    recs = {f"ep{i}": rng.normal(size=(i + 1, 12)).astype(np.float32) for i in range(4)}
    fpath = tmp_path / "f.bin"
    write_feature_file(fpath, recs)
    back = read_feature_file(fpath)
    feat_ok = list(back) == list(recs) and all(back[k].tobytes() == recs[k].tobytes() for k in recs)

    params = init_params(TINY_CONFIG, 3)
    cpath = tmp_path / "m.ckpt"
    save_checkpoint(params, TINY_CONFIG, cpath)
    loaded, cfg = load_checkpoint(cpath)
    ckpt_ok = cfg == TINY_CONFIG and all(loaded[k].data.tobytes() == params[k].data.tobytes() for k in params)

    rejected = 0
    fbuf, cbuf = fpath.read_bytes(), cpath.read_bytes()
    bad_inputs = [b"XXXXXXXX" + fbuf[8:], fbuf[:-3], fbuf[:20]]
    for buf in bad_inputs:
        fpath.write_bytes(buf)
        try:
            read_feature_file(fpath)
        except FormatError:
            rejected += 1
    bad_ckpts = [b"XXXXXXXX" + cbuf[8:], cbuf[:-3], cbuf[: len(cbuf) // 2]]
    for buf in bad_ckpts:
        try:
            decode_checkpoint(buf)
        except FormatError:
            rejected += 1
    total = len(bad_inputs) + len(bad_ckpts)
    ok = feat_ok and ckpt_ok and rejected == total
    report(7, ok, f"feature file exact {feat_ok}, checkpoint exact {ckpt_ok}, corrupt inputs rejected {rejected}/{total}")
