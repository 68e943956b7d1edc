"""Segmentation, energy-discriminator and test-time objectives."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

DICE_EPS = 1e-5


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``[N,H,W]`` class indices -> ``[N,C,H,W]`` one-hot array."""
    labels = np.asarray(labels)
    if labels.size and labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} out of range for {num_classes} classes")
    return (labels[:, None] == np.arange(num_classes).reshape(1, -1, 1, 1)).astype(dtype)


def dice_loss(probs: Tensor, onehot, eps: float = DICE_EPS) -> Tensor:
    """1 - mean soft Dice over the batch and the foreground classes 1..C-1."""
    y = onehot if isinstance(onehot, Tensor) else Tensor(np.asarray(onehot, dtype=probs.dtype))
    p = T.reshape(probs, (*probs.shape[:2], -1))
    y = T.reshape(y, (*y.shape[:2], -1))
    fg = np.zeros((1, probs.shape[1], 1), dtype=probs.dtype)
    fg[:, 1:] = 1.0
    inter = T.tsum(p * y, axis=2)
    denom = T.tsum(p, axis=2) + T.tsum(y, axis=2)
    dice = (inter * 2.0 + eps) / (denom + eps)
    n_terms = probs.shape[0] * (probs.shape[1] - 1)
    return 1.0 - T.tsum(dice * Tensor(fg[:, :, 0])) * (1.0 / n_terms)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-softmax of the true class."""
    onehot = one_hot(labels, logits.shape[1], logits.dtype)
    logp = T.log_softmax(logits, axis=1)
    n_pix = logits.size // logits.shape[1]
    return -T.tsum(logp * Tensor(onehot)) * (1.0 / n_pix)


def hybrid_seg_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    probs = T.softmax(logits, axis=1)
    return dice_loss(probs, one_hot(labels, logits.shape[1], logits.dtype)) + cross_entropy_loss(logits, labels)


def energy_bce_loss(energy_logits: Tensor, labels) -> Tensor:
    """Patchwise BCE with P(y=1 | patch) = sigmoid(-g).

    Written on logits: ``-log sigmoid(-g) = softplus(g)`` and
    ``-log(1 - sigmoid(-g)) = softplus(-g)``.
    """
    y = np.asarray(labels, dtype=energy_logits.dtype).reshape(energy_logits.shape)
    per_patch = T.softplus(energy_logits) * Tensor(y) + T.softplus(-energy_logits) * Tensor(1.0 - y)
    return T.mean(per_patch)


def energy_adaptation_loss(energy_logits: Tensor) -> Tensor:
    """Mean of ``-log(1 - sigmoid(-g))`` over all patches of the batch (zero-energy target)."""
    return T.mean(T.softplus(-energy_logits))


def entropy_loss(logits: Tensor) -> Tensor:
    """Mean per-pixel Shannon entropy of the channel softmax."""
    logp = T.log_softmax(logits, axis=1)
    n_pix = logits.size // logits.shape[1]
    return -T.tsum(T.exp(logp) * logp) * (1.0 / n_pix)
