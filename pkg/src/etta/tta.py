"""Episodic test-time adaptation of the BatchNorm affine parameters.

For each incoming batch the segmentation model is snapshotted, its BN
gamma/beta are updated for ``iters`` Adam steps (normalizing with the
current batch statistics), the adapted prediction is recorded, and the
snapshot is restored so the next batch starts from the source weights.
"""
from __future__ import annotations

import csv
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .losses import energy_adaptation_loss, entropy_loss
from .metrics import asd_sentinel, average_surface_distance, dice_score
from .networks import EnergyModel, SegModel, frozen, full_hash, ood_score, param_hash
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

METHODS = ("energy", "tent", "none")
CSV_COLUMNS = ("batch_idx", "method", "pre_dice_c1", "pre_dice_c2", "post_dice_c1", "post_dice_c2",
               "pre_asd", "post_asd", "energy_0", "energy_final", "ms")


@dataclass
class AdaptConfig:
    iters: int = 10
    lr: float = 1e-3
    batch: int = 4
    method: str = "energy"
    restore: bool = True

    def __post_init__(self):
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")


@dataclass
class AdaptationReport:
    batch_idx: int
    method: str
    n_samples: int
    pre_dice: np.ndarray  # [n_samples, C-1]
    post_dice: np.ndarray
    pre_asd: np.ndarray
    post_asd: np.ndarray
    energy_trace: list[float] = field(default_factory=list)
    ms: float = 0.0

    def csv_row(self) -> list[str]:
        pre, post = self.pre_dice.mean(axis=0), self.post_dice.mean(axis=0)
        e0 = _fmt(self.energy_trace[0]) if self.energy_trace else ""
        e1 = _fmt(self.energy_trace[-1]) if self.energy_trace else ""
        return [str(self.batch_idx), self.method, _fmt(pre[0]), _fmt(pre[1]), _fmt(post[0]), _fmt(post[1]),
                _fmt(_mean_finite(self.pre_asd)), _fmt(_mean_finite(self.post_asd)), e0, e1, f"{self.ms:.1f}"]


def _fmt(x) -> str:
    return repr(float(x))


def _mean_finite(values: np.ndarray) -> float:
    vals = values[np.isfinite(values)]
    return float(vals.mean()) if vals.size else float("nan")


class Snapshot:
    """Copy of every parameter and BN buffer; :meth:`restore` writes it back in place."""

    def __init__(self, model: SegModel):
        self.model = model
        self.state = {k: v.copy() for k, v in model.state().items()}
        self.hash = full_hash(model)

    def restore(self) -> None:
        self.model.load_state(self.state)
        self.model.zero_grad()


def snapshot_restore(model: SegModel) -> Snapshot:
    return Snapshot(model)


def _score(labels: np.ndarray, masks: np.ndarray | None, num_classes: int):
    """Per-sample Dice and ASD for classes 1..C-1; ASD sentinels become NaN."""
    n = len(labels)
    if masks is None:
        nan = np.full((n, num_classes - 1), np.nan)
        return nan, nan.copy()
    dice = np.array([[dice_score(p, m, c) for c in range(1, num_classes)] for p, m in zip(labels, masks)])
    asd = np.array([[average_surface_distance(p, m, c) for c in range(1, num_classes)]
                    for p, m in zip(labels, masks)])
    sentinel = asd == asd_sentinel(labels.shape)
    if sentinel.any():
        log.info("%d ASD values hit the one-empty sentinel and are excluded from means", int(sentinel.sum()))
    asd[sentinel] = np.nan
    return dice, asd


def _mean_ood(g: EnergyModel | None, probs) -> float:
    if g is None:
        return float("nan")
    return float(ood_score(g(probs if isinstance(probs, T.Tensor) else T.Tensor(probs))).mean())


def adapt_batch(f: SegModel, g: EnergyModel | None, images: np.ndarray, cfg: AdaptConfig,
                masks: np.ndarray | None = None, batch_idx: int = 0,
                on_iteration=None) -> tuple[np.ndarray, AdaptationReport]:
    """Adapt on one batch and return ``(final probs, report)``.

    ``on_iteration(it, energy_logits)`` receives the raw patch logits of every
    iteration (``iters + 1`` calls) when given.
    """
    start = time.perf_counter()
    if cfg.method == "energy" and g is None:
        raise ValueError("energy adaptation needs an energy model")
    g_hash = param_hash(g) if g is not None else None
    if g is not None:
        g.set_mode("eval")
    x = T.Tensor(images)

    # unadapted reference: the pretrained model as deployed (running statistics)
    f.set_mode("eval")
    with frozen(f):
        pre_logits = f(x)
    pre_probs = T.softmax(pre_logits, axis=1)
    pre_labels = np.argmax(pre_logits.data, axis=1)

    if cfg.method == "none":
        trace = [_mean_ood(g, pre_probs)] * (cfg.iters + 1) if g is not None else []
        if on_iteration is not None and g is not None:
            logits = g(pre_probs).data
            for it in range(cfg.iters + 1):
                on_iteration(it, logits)
        probs, post_labels = pre_probs.data, pre_labels
    else:
        probs, post_labels, trace = _adapt(f, g, x, cfg, on_iteration)

    if g is not None and param_hash(g) != g_hash:
        raise RuntimeError("energy model parameters changed during adaptation")
    pre_dice, pre_asd = _score(pre_labels, masks, f.num_classes)
    post_dice, post_asd = _score(post_labels, masks, f.num_classes)
    report = AdaptationReport(batch_idx, cfg.method, len(images), pre_dice, post_dice, pre_asd, post_asd,
                              trace, 1000.0 * (time.perf_counter() - start))
    return probs, report


def _adapt(f: SegModel, g: EnergyModel | None, x: T.Tensor, cfg: AdaptConfig, on_iteration):
    snap = Snapshot(f)
    bn_names = f.bn_param_names
    others = [n for n in f.named_params() if n not in set(bn_names)]
    other_hash = param_hash(f, others)
    flags = {n: p.requires_grad for n, p in f.named_params().items()}
    f.requires_grad_(True, names=bn_names)
    f.set_mode("adapt")
    params = f.bn_parameters()
    opt = AdamState(lr=cfg.lr)
    trace: list[float] = []
    named = f.named_params()
    try:
        with frozen(g) if g is not None else nullcontext():
            for it in range(cfg.iters + 1):
                logits = f(x)
                probs = T.softmax(logits, axis=1)
                energy = g(probs) if g is not None else None
                if energy is not None:
                    trace.append(float(ood_score(energy).mean()))
                    if on_iteration is not None:
                        on_iteration(it, energy.data)
                if it == cfg.iters:
                    break
                loss = energy_adaptation_loss(energy) if cfg.method == "energy" else entropy_loss(logits)
                f.zero_grad()
                loss.backward()
                stray = [n for n in others if named[n].grad is not None]
                if stray:
                    raise RuntimeError(f"non-BatchNorm parameters received gradients: {stray[:3]}")
                adam_step(params, opt)
                if param_hash(f, others) != other_hash:
                    raise RuntimeError("non-BatchNorm parameters changed during adaptation")
    finally:
        f.zero_grad()
        for n, p in f.named_params().items():
            p.requires_grad = flags[n]
        f.set_mode("eval")
        if cfg.restore:
            snap.restore()
    return probs.data, np.argmax(logits.data, axis=1), trace


def energy_adapt_batch(f, g, images, cfg: AdaptConfig, masks=None, **kw):
    cfg = AdaptConfig(cfg.iters, cfg.lr, cfg.batch, "energy", cfg.restore)
    return adapt_batch(f, g, images, cfg, masks, **kw)


def tent_adapt_batch(f, images, cfg: AdaptConfig, masks=None, g=None, **kw):
    cfg = AdaptConfig(cfg.iters, cfg.lr, cfg.batch, "tent", cfg.restore)
    return adapt_batch(f, g, images, cfg, masks, **kw)


def write_pgm(path, scores: np.ndarray, size: tuple[int, int]) -> None:
    """8-bit binary PGM of a ``[K,K]`` score grid in [0,1], nearest-upsampled to ``size``."""
    k_h, k_w = scores.shape
    h, w = size
    up = np.repeat(np.repeat(scores, h // k_h, axis=0), w // k_w, axis=1)
    pixels = np.clip(np.rint(up * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(raw[-w * h:], np.uint8).reshape(h, w)


def _pgm_writer(out_dir: Path, batch_idx: int, size: tuple[int, int]):
    def hook(it, logits):
        for s, grid in enumerate(ood_score(logits)[:, 0]):
            write_pgm(out_dir / f"batch{batch_idx:04d}_s{s}_it{it:02d}.pgm", grid, size)
    return hook


def run_stream(f: SegModel, g: EnergyModel | None, images: np.ndarray, masks: np.ndarray | None,
               cfg: AdaptConfig, out_csv=None, energy_map_dir=None) -> tuple[list[AdaptationReport], dict]:
    """Process the samples once, in order, in batches of ``cfg.batch`` (last batch may be short)."""
    reports = []
    size = images.shape[-2:]
    if energy_map_dir is not None:
        Path(energy_map_dir).mkdir(parents=True, exist_ok=True)
    for b, start in enumerate(range(0, len(images), cfg.batch)):
        sl = slice(start, start + cfg.batch)
        hook = _pgm_writer(Path(energy_map_dir), b, size) if energy_map_dir is not None and g is not None else None
        _, report = adapt_batch(f, g, images[sl], cfg, None if masks is None else masks[sl], b, hook)
        reports.append(report)
    summary = summarize(reports)
    if out_csv is not None:
        write_csv(out_csv, reports)
    return reports, summary


def summarize(reports: list[AdaptationReport]) -> dict[str, float]:
    pre = np.concatenate([r.pre_dice for r in reports])
    post = np.concatenate([r.post_dice for r in reports])
    out = {"pre_dice": float(pre.mean()), "post_dice": float(post.mean()),
           "pre_asd": _mean_finite(np.concatenate([r.pre_asd for r in reports]).ravel()),
           "post_asd": _mean_finite(np.concatenate([r.post_asd for r in reports]).ravel())}
    for c in range(pre.shape[1]):
        out[f"pre_dice_c{c + 1}"] = float(pre[:, c].mean())
        out[f"post_dice_c{c + 1}"] = float(post[:, c].mean())
    traced = [r for r in reports if r.energy_trace]
    if traced:
        out["energy_decrease_fraction"] = float(np.mean([r.energy_trace[-1] < r.energy_trace[0] for r in traced]))
    return out


def write_csv(path, reports: list[AdaptationReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow(r.csv_row())
