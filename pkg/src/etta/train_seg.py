"""Source pretraining of the segmentation UNet with the Dice + cross-entropy loss."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Sample, augment
from .losses import hybrid_seg_loss
from .metrics import mean_foreground_dice
from .networks import SegModel, save_checkpoint
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch: int = 8
    lr: float = 1e-4
    augment_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.lr < 0 or not 0 <= self.augment_p <= 1:
            raise ValueError(f"invalid TrainConfig {self}")


def predict(model: SegModel, images: np.ndarray, batch: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode ``(probs, argmax)`` for a stack of images ``[N,1,H,W]``."""
    model.set_mode("eval")
    probs, labels = [], []
    for i in range(0, len(images), batch):
        logits = model(T.Tensor(images[i:i + batch]))
        probs.append(T.softmax(logits, axis=1).data)
        labels.append(np.argmax(logits.data, axis=1).astype(np.uint8))
    return np.concatenate(probs), np.concatenate(labels)


def evaluate(model: SegModel, images: np.ndarray, masks: np.ndarray) -> float:
    """Mean foreground Dice over samples."""
    _, pred = predict(model, images)
    return float(np.mean([mean_foreground_dice(p, m, model.num_classes) for p, m in zip(pred, masks)]))


def train_source(model: SegModel, images: np.ndarray, masks: np.ndarray, val_images: np.ndarray,
                 val_masks: np.ndarray, cfg: TrainConfig, checkpoint: str | Path | None = None,
                 log_csv: str | Path | None = None) -> tuple[SegModel, list[dict]]:
    """Train on the source split, keeping the parameters with the best validation Dice.

    Returns the model loaded with the best-validation state and one log row per epoch.
    """
    if len(images) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamState(lr=cfg.lr)
    history: list[dict] = []
    best_dice, best_state = -1.0, None

    for epoch in range(cfg.epochs):
        model.set_mode("train")
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            batch = [augment(Sample(images[i, 0], masks[i], "source", int(i)), cfg.augment_p, rng) for i in idx]
            x = np.stack([s.image for s in batch])[:, None]
            y = np.stack([s.mask for s in batch])
            loss = hybrid_seg_loss(model(T.Tensor(x)), y)
            model.zero_grad()
            loss.backward()
            adam_step(params, opt)
            losses.append(loss.item())
        val_dice = evaluate(model, val_images, val_masks) if len(val_images) else float("nan")
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val_dice}
        history.append(row)
        log.info("epoch %d loss %.4f val_dice %.4f", epoch, row["train_loss"], val_dice)
        if best_state is None or val_dice > best_dice:
            best_dice = val_dice
            best_state = {k: v.copy() for k, v in model.state().items()}
            if checkpoint is not None:
                save_checkpoint(checkpoint, best_state)
        if log_csv is not None:
            write_log(log_csv, history, ("epoch", "train_loss", "val_dice"))

    model.load_state(best_state)
    model.zero_grad()
    model.set_mode("eval")
    return model, history


def write_log(path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)
