"""The desk-scale end-to-end run, driven through the CLI so every artifact is reproducible.

Layout of ``out_dir`` after :func:`run_desk_pipeline`::

    source/                 gen-data, source domain
    target_s{seed}/         gen-data, target domain, one per target seed
    seg.ckpt, seg.ckpt.csv  train-seg
    energy.ckpt, energy.ckpt.csv
    eval_source.csv, eval_target_s{seed}.csv
    adapt_{method}_b{B}_s{seed}.csv
    timings.csv             wall-clock seconds per stage (kept out of the metric CSVs)
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

from .cli import main as cli_main


@dataclass
class DeskConfig:
    source_n: int = 334  # 60/20/20 -> 200 train, 66 val, 68 test
    target_n: int = 200  # 40 test samples per target stream
    source_seed: int = 1
    target_seeds: tuple[int, ...] = (2, 3, 4)
    size: int = 64
    seg_epochs: int = 30
    seg_seed: int = 0
    energy_epochs: int = 40
    energy_lr: float = 1e-3
    energy_warmup: int = 50
    delta: float = 0.1
    temperature_min: float = 0.5
    temperature_max: float = 8.0
    energy_seed: int = 0
    adapt_lr: float = 1e-3
    iters: int = 10
    batch_sizes: tuple[int, ...] = (4, 1)
    methods: tuple[str, ...] = ("energy", "tent")


def _run(*argv) -> None:
    code = cli_main([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"etta {' '.join(map(str, argv))} exited with {code}")


def adapt_csv(out_dir, method: str, batch: int, seed: int) -> Path:
    return Path(out_dir) / f"adapt_{method}_b{batch}_s{seed}.csv"


def run_desk_pipeline(out_dir, cfg: DeskConfig | None = None, log=print) -> dict[str, float]:
    """Run (or resume) every stage; stages that completed before are skipped.

    Returns stage timings in seconds for the stages that ran.
    """
    cfg = cfg or DeskConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    def stage(name: str, target: Path, *argv) -> None:
        done = out / ".done" / name
        if done.exists() and target.exists():
            return
        log(f"[desk] {name}")
        start = time.perf_counter()
        _run(*argv)
        timings[name] = time.perf_counter() - start
        _record_timing(out, name, timings[name])
        done.parent.mkdir(exist_ok=True)
        done.touch()

    size = ["--h", cfg.size, "--w", cfg.size]
    stage("gen-source", out / "source" / "manifest.txt", "gen-data", "--out", out / "source", "--n", cfg.source_n,
          "--domain", "source", "--seed", cfg.source_seed, "--force", *size)
    for s in cfg.target_seeds:
        stage(f"gen-target-s{s}", out / f"target_s{s}" / "manifest.txt", "gen-data", "--out", out / f"target_s{s}",
              "--n", cfg.target_n, "--domain", "target", "--seed", s, "--force", *size)
    stage("train-seg", out / "seg.ckpt", "train-seg", "--data", out / "source", "--out", out / "seg.ckpt",
          "--epochs", cfg.seg_epochs, "--seed", cfg.seg_seed)
    stage("train-energy", out / "energy.ckpt", "train-energy", "--data", out / "source", "--seg", out / "seg.ckpt",
          "--out", out / "energy.ckpt", "--epochs", cfg.energy_epochs, "--lr", cfg.energy_lr,
          "--warmup", cfg.energy_warmup, "--delta", cfg.delta, "--temperature-min", cfg.temperature_min,
          "--temperature-max", cfg.temperature_max, "--seed", cfg.energy_seed)
    models = ["--seg", out / "seg.ckpt", "--energy", out / "energy.ckpt"]
    stage("eval-source", out / "eval_source.csv", "eval", "--data", out / "source", *models,
          "--out-csv", out / "eval_source.csv")
    for s in cfg.target_seeds:
        data = ["--data", out / f"target_s{s}", *models]
        stage(f"eval-target-s{s}", out / f"eval_target_s{s}.csv", "eval", *data,
              "--out-csv", out / f"eval_target_s{s}.csv")
        for b in cfg.batch_sizes:
            for method in cfg.methods:
                path = adapt_csv(out, method, b, s)
                stage(f"adapt-{method}-b{b}-s{s}", path, "adapt", *data, "--method", method, "--batch", b,
                      "--iters", cfg.iters, "--lr", cfg.adapt_lr, "--out-csv", path)
            # BatchNorm re-estimation alone (no parameter update): context for the adaptation gains
            path = adapt_csv(out, "bnstats", b, s)
            stage(f"adapt-bnstats-b{b}-s{s}", path, "adapt", *data, "--method", "tent", "--batch", b,
                  "--iters", 1, "--lr", 0.0, "--out-csv", path)
    return timings


def _record_timing(out: Path, name: str, seconds: float) -> None:
    timings = read_timings(out)
    timings[name] = seconds
    with open(out / "timings.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "seconds"])
        writer.writerows([k, f"{v:.1f}"] for k, v in timings.items())


def read_timings(out_dir) -> dict[str, float]:
    path = Path(out_dir) / "timings.csv"
    if not path.exists():
        return {}
    return {row["stage"]: float(row["seconds"]) for row in csv.DictReader(open(path))}
