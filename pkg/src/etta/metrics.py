"""Dice, average surface distance and patch-energy accuracy."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """2|A&B| / (|A|+|B|) for one class; 1.0 when both masks are empty."""
    a, b = np.asarray(pred) == class_id, np.asarray(gt) == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or on the image border."""
    mask = np.asarray(mask, bool)
    eroded = ndimage.binary_erosion(mask, _FOUR_NEIGHBOURS, border_value=0)
    return mask & ~eroded


def boundary_points(mask: np.ndarray) -> np.ndarray:
    return np.argwhere(boundary(mask)).astype(np.float64)


def average_surface_distance(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Symmetric mean nearest-boundary distance in pixels.

    Both empty -> 0.0.  Exactly one empty -> image diagonal (a sentinel that
    callers can detect with :func:`is_asd_sentinel`).
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    bp, bg = boundary_points(pred == class_id), boundary_points(gt == class_id)
    if len(bp) == 0 and len(bg) == 0:
        return 0.0
    if len(bp) == 0 or len(bg) == 0:
        return asd_sentinel(pred.shape)
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return float((d_pg.sum() + d_gp.sum()) / (len(bp) + len(bg)))


def asd_sentinel(shape) -> float:
    return math.hypot(shape[-2], shape[-1])


def is_asd_sentinel(value: float, shape) -> bool:
    return value == asd_sentinel(shape)


def mean_foreground_dice(pred: np.ndarray, gt: np.ndarray, num_classes: int = 3) -> float:
    return float(np.mean([dice_score(pred, gt, c) for c in range(1, num_classes)]))


def per_class_scores(preds: np.ndarray, gts: np.ndarray, num_classes: int = 3) -> dict[str, np.ndarray]:
    """Per-sample Dice and ASD for each foreground class, arrays of shape ``[N]``."""
    out: dict[str, np.ndarray] = {}
    for c in range(1, num_classes):
        out[f"dice_c{c}"] = np.array([dice_score(p, g, c) for p, g in zip(preds, gts)])
        out[f"asd_c{c}"] = np.array([average_surface_distance(p, g, c) for p, g in zip(preds, gts)])
    return out


def energy_accuracy(energy_logits: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Agreement between thresholded OOD scores and curated patch labels.

    A patch is predicted out of distribution (y=1) when ``sigmoid(-g) >= 0.5``,
    i.e. when ``g <= 0``.
    """
    g = np.asarray(energy_logits, np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    pred = g <= 0.0
    correct = pred == y
    out = {"accuracy": float(correct.mean()) if correct.size else float("nan"),
           "pos_fraction": float(y.mean()) if y.size else float("nan")}
    out["accuracy_y0"] = float(correct[~y].mean()) if (~y).any() else float("nan")
    out["accuracy_y1"] = float(correct[y].mean()) if y.any() else float("nan")
    return out
