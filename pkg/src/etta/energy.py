"""Curating out-of-distribution segmentation maps and training the patch energy model.

Negatives come from probing the frozen source model with FGSM-perturbed
inputs and from hand-made spatial corruptions of its predictions.  Patch
labels compare the curated map with the ground truth: a 16x16 patch is
out of distribution (y=1) when at least ``tau`` of its pixels disagree.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .losses import dice_loss, energy_bce_loss, one_hot
from .metrics import energy_accuracy
from .networks import EnergyModel, SegModel, frozen, param_hash, save_checkpoint
from .optim import AdamState, adam_step, warmup_cosine_lr
from .train_seg import predict, write_log

log = logging.getLogger(__name__)


@dataclass
class PerturbConfig:
    delta: float = 0.1
    spatial_p: float = 0.5
    max_translate: float = 6.0
    max_rotate: float = 20.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    pixel_noise_sigma: float = 0.05
    patch_dropout_rate: float = 0.15
    patch: int = 16
    temperature_range: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        for name in ("spatial_p", "patch_dropout_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


@dataclass
class EnergyTrainConfig:
    epochs: int = 150
    batch: int = 8
    lr: float = 1e-4
    warmup_steps: int = 1000
    tau: int = 50
    patch: int = 16
    seed: int = 0
    perturb: PerturbConfig = field(default_factory=PerturbConfig)


def fgsm_perturb(model: SegModel, images: np.ndarray, masks: np.ndarray, delta: float,
                 batch: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """One signed-gradient step on the Dice loss; returns ``(perturbed images, probs)``.

    The model runs in eval mode with its parameters frozen, so only the
    input receives a gradient.
    """
    if delta < 0:
        raise ValueError(f"FGSM magnitude must be >= 0, got {delta}")
    model.set_mode("eval")
    if delta == 0:
        return images.copy(), predict(model, images, batch)[0]
    adv = np.empty_like(images)
    with frozen(model):
        for i in range(0, len(images), batch):
            x = T.Tensor(images[i:i + batch], requires_grad=True)
            probs = T.softmax(model(x), axis=1)
            dice_loss(probs, one_hot(masks[i:i + batch], probs.shape[1])).backward()
            step = delta * T.sign(x.grad).data
            adv[i:i + batch] = np.clip(images[i:i + batch] + step, 0.0, 1.0)
    return adv, predict(model, adv, batch)[0]


def _affine_warp(probs: np.ndarray, rng: np.random.Generator, cfg: PerturbConfig) -> np.ndarray:
    c, h, w = probs.shape
    angle = math.radians(rng.uniform(-cfg.max_rotate, cfg.max_rotate))
    scale = rng.uniform(*cfg.scale_range)
    shift = rng.uniform(-cfg.max_translate, cfg.max_translate, 2)
    cos, sin = math.cos(angle), math.sin(angle)
    # output->input coordinate map: rotate and scale about the image centre, then shift
    matrix = np.array([[cos, -sin], [sin, cos]]) / scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ (centre + shift)
    out = np.empty_like(probs)
    for k in range(c):
        out[k] = ndimage.affine_transform(probs[k], matrix, offset, order=1, mode="constant",
                                          cval=1.0 if k == 0 else 0.0)
    return out


def spatial_perturb(probs: np.ndarray, cfg: PerturbConfig, rng: np.random.Generator) -> np.ndarray:
    """Affine warp and pixel noise (each map with probability ``spatial_p``), then patch dropout.

    Dropped patches are replaced by the background one-hot.  ``probs`` is
    ``[N,C,H,W]`` and the output keeps every pixel a distribution over classes.
    """
    out = probs.astype(np.float32, copy=True)
    n, c, h, w = out.shape
    p = cfg.patch
    for i in range(n):
        touched = False
        if rng.random() < cfg.spatial_p:
            out[i] = _affine_warp(out[i], rng, cfg)
            if cfg.pixel_noise_sigma > 0:
                out[i] += rng.normal(0.0, cfg.pixel_noise_sigma, out[i].shape).astype(np.float32)
            touched = True
        if cfg.patch_dropout_rate > 0:
            drop = rng.random((h // p, w // p)) < cfg.patch_dropout_rate
            for r, q in zip(*np.nonzero(drop)):
                out[i, :, r * p:(r + 1) * p, q * p:(q + 1) * p] = 0.0
                out[i, 0, r * p:(r + 1) * p, q * p:(q + 1) * p] = 1.0
            touched = touched or bool(drop.any())
        if touched:
            np.clip(out[i], 1e-6, None, out=out[i])
            out[i] /= out[i].sum(axis=0, keepdims=True)
    return out


def temperature_jitter(maps: np.ndarray, low: float, high: float, rng: np.random.Generator,
                       floor: float = 1e-6) -> np.ndarray:
    """Re-temper every map with a log-uniform temperature in ``[low, high]``.

    Works on ``log(max(p, floor))`` so one-hot masks soften too; the argmax of
    every pixel (and hence every curated label) is unchanged.
    """
    if low == high == 1.0:
        return maps
    temps = np.exp(rng.uniform(math.log(low), math.log(high), len(maps))).astype(np.float32)
    logits = np.log(np.maximum(maps, floor)) / temps[:, None, None, None]
    logits -= logits.max(axis=1, keepdims=True)
    out = np.exp(logits)
    return out / out.sum(axis=1, keepdims=True)


def curate_labels(pred, masks: np.ndarray, tau: int = 50, patch: int = 16) -> np.ndarray:
    """Per-patch OOD labels ``[N,1,K,K]``: 1 iff the mismatch count is >= ``tau``.

    ``pred`` is either class probabilities ``[N,C,H,W]`` or a label map ``[N,H,W]``.
    """
    pred = np.asarray(pred)
    if pred.ndim == 4:
        pred = np.argmax(pred, axis=1)
    n, h, w = pred.shape
    if h % patch or w % patch:
        raise ValueError(f"map {h}x{w} not divisible by patch size {patch}")
    wrong = (pred != masks).reshape(n, h // patch, patch, w // patch, patch)
    counts = wrong.sum(axis=(2, 4))
    return (counts >= tau).astype(np.uint8)[:, None]


def _energy_batch(clean: np.ndarray, adv: np.ndarray, masks: np.ndarray, idx: np.ndarray,
                  cfg: EnergyTrainConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Assemble one discriminator batch: GT one-hots, predictions, altered predictions."""
    b = len(idx)
    use_adv = np.zeros(b, bool)
    use_adv[rng.permutation(b)[: b // 2]] = True
    preds = np.where(use_adv[:, None, None, None], adv[idx], clean[idx])
    altered = spatial_perturb(preds, cfg.perturb, rng)
    gt = one_hot(masks[idx], clean.shape[1])
    maps = np.concatenate([gt, preds, altered])
    maps = temperature_jitter(maps, *cfg.perturb.temperature_range, rng)
    labels = np.concatenate([
        np.zeros((b, 1, *[s // cfg.patch for s in masks.shape[1:]]), np.uint8),
        curate_labels(preds, masks[idx], cfg.tau, cfg.patch),
        curate_labels(altered, masks[idx], cfg.tau, cfg.patch),
    ])
    return maps, labels


def energy_logits(g: EnergyModel, maps: np.ndarray, batch: int = 32) -> np.ndarray:
    g.set_mode("eval")
    return np.concatenate([g(T.Tensor(maps[i:i + batch])).data for i in range(0, len(maps), batch)])


def heldout_pool(f: SegModel, images: np.ndarray, masks: np.ndarray, cfg: EnergyTrainConfig,
                 seed: int = 12345) -> tuple[np.ndarray, np.ndarray]:
    """Clean, FGSM and FGSM+spatially perturbed predictions with their curated labels."""
    rng = np.random.default_rng(seed)
    clean = predict(f, images)[0]
    adv = fgsm_perturb(f, images, masks, cfg.perturb.delta)[1]
    altered = spatial_perturb(adv, cfg.perturb, rng)
    maps = np.concatenate([clean, adv, altered])
    labels = np.concatenate([curate_labels(m, masks, cfg.tau, cfg.patch) for m in (clean, adv, altered)])
    return maps, labels


def evaluate_energy(g: EnergyModel, f: SegModel, images: np.ndarray, masks: np.ndarray,
                    cfg: EnergyTrainConfig, seed: int = 12345) -> dict[str, float]:
    maps, labels = heldout_pool(f, images, masks, cfg, seed)
    return energy_accuracy(energy_logits(g, maps), labels)


def train_energy(g: EnergyModel, f: SegModel, images: np.ndarray, masks: np.ndarray,
                 cfg: EnergyTrainConfig, val: tuple[np.ndarray, np.ndarray] | None = None,
                 checkpoint: str | Path | None = None, log_csv: str | Path | None = None,
                 ) -> tuple[EnergyModel, list[dict]]:
    """Fit the patch discriminator with the patchwise BCE objective.

    ``f`` must stay frozen: its parameter hash is checked after every epoch.
    Returns the trained model and one log row per optimizer step.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    f_hash = param_hash(f)
    rng = np.random.default_rng(cfg.seed)
    # f is frozen and deterministic, so its clean and FGSM outputs are fixed per image
    clean = predict(f, images)[0]
    adv = fgsm_perturb(f, images, masks, cfg.perturb.delta)[1]
    val_pool = heldout_pool(f, *val, cfg) if val is not None else None

    params = g.parameters()
    opt = AdamState(lr=cfg.lr)
    steps_per_epoch = math.ceil(len(images) / cfg.batch)
    total = cfg.epochs * steps_per_epoch
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        g.set_mode("train")
        order = rng.permutation(len(images))
        epoch_pos = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            maps, labels = _energy_batch(clean, adv, masks, idx, cfg, rng)
            logits = g(T.Tensor(maps))
            loss = energy_bce_loss(logits, labels)
            g.zero_grad()
            loss.backward()
            adam_step(params, opt, lr=warmup_cosine_lr(step, cfg.lr, total, cfg.warmup_steps))
            acc = energy_accuracy(logits.data, labels)
            history.append({"step": step, "loss": loss.item(), "patch_accuracy": acc["accuracy"],
                            "pos_fraction": acc["pos_fraction"]})
            epoch_pos.append(acc["pos_fraction"])
            step += 1
        pos = float(np.mean(epoch_pos))
        if param_hash(f) != f_hash:
            raise RuntimeError("segmentation model changed during energy training; it must stay frozen")
        if not 0.01 <= pos <= 0.99:
            log.warning("degenerate label curation: %.4f of patches are out of distribution", pos)
            raise RuntimeError(f"degenerate label curation (positive fraction {pos:.4f})")
        msg = f"epoch {epoch} loss {np.mean([r['loss'] for r in history[-len(epoch_pos):]]):.4f} pos {pos:.3f}"
        if val_pool is not None:
            msg += f" val_acc {energy_accuracy(energy_logits(g, val_pool[0]), val_pool[1])['accuracy']:.4f}"
        log.info(msg)
        if log_csv is not None:
            write_log(log_csv, history, ("step", "loss", "patch_accuracy", "pos_fraction"))
    g.set_mode("eval")
    g.zero_grad()
    if checkpoint is not None:
        save_checkpoint(checkpoint, g)
    return g, history
