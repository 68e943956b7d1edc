"""Central finite-difference checks for every differentiable primitive and loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from . import tensor as T
from .tensor import Tensor

FD_STEP = 1e-6
REL_TOL = 1e-4


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[..., Tensor], arrays: list[np.ndarray], rng: np.random.Generator,
                    probes: int = 10, h: float = FD_STEP) -> float:
    """Max relative error between backprop and central differences over random probes.

    ``fn`` maps f64 Tensors to a scalar Tensor.  Each input gets ``probes``
    randomly chosen elements perturbed by ``+-h``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    inputs = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    fn(*inputs).backward()
    worst = 0.0
    for k, (arr, inp) in enumerate(zip(arrays, inputs)):
        flat = arr.reshape(-1)
        picks = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + h
            up = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item()
            flat[idx] = orig - h
            down = fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(inp.grad.reshape(-1)[idx])
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def _projected(op: Callable[..., Tensor], out_shape, rng) -> Callable[..., Tensor]:
    """Reduce an op's output to a scalar through a fixed random projection."""
    weights = rng.standard_normal(out_shape)
    return lambda *xs: T.tsum(op(*xs) * Tensor(weights, dtype=np.float64))


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    n = rng.standard_normal
    labels = rng.integers(0, 3, size=(2, 4, 4))
    onehot = losses.one_hot(labels, 3, np.float64)
    patch_labels = rng.integers(0, 2, size=(2, 1, 2, 2)).astype(np.float64)
    rm, rv = np.zeros(3), np.ones(3)
    rmv, rvv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)

    def away_from_zero(shape):
        x = n(shape)
        return x + 0.1 * np.sign(x)

    cases = {
        "add": (_projected(T.add, (3, 4), rng), [n((3, 4)), n((1, 4))]),
        "sub": (_projected(T.sub, (3, 4), rng), [n((3, 4)), n((3, 1))]),
        "mul": (_projected(T.mul, (3, 4), rng), [n((3, 4)), n((3, 4))]),
        "div": (_projected(T.div, (3, 4), rng), [n((3, 4)), rng.uniform(0.5, 2.0, (3, 4))]),
        "exp": (_projected(T.exp, (3, 4), rng), [n((3, 4))]),
        "log": (_projected(T.log, (3, 4), rng), [rng.uniform(0.5, 2.0, (3, 4))]),
        "sum_axis": (_projected(lambda x: T.tsum(x, axis=1), (3, 5), rng), [n((3, 4, 5))]),
        "mean": (lambda x: T.mean(x * x), [n((3, 4))]),
        "reshape": (_projected(lambda x: T.reshape(x, (4, 3)), (4, 3), rng), [n((3, 4))]),
        "concat": (_projected(lambda a, b: T.concat([a, b], axis=1), (2, 5, 3, 3), rng),
                   [n((2, 2, 3, 3)), n((2, 3, 3, 3))]),
        "relu": (_projected(T.relu, (4, 5), rng), [away_from_zero((4, 5))]),
        "leaky_relu": (_projected(lambda x: T.leaky_relu(x, 0.2), (4, 5), rng), [away_from_zero((4, 5))]),
        "sigmoid": (_projected(T.sigmoid, (4, 5), rng), [3 * n((4, 5))]),
        "softplus": (_projected(T.softplus, (4, 5), rng), [3 * n((4, 5))]),
        "softmax": (_projected(lambda x: T.softmax(x, 1), (2, 3, 4, 4), rng), [n((2, 3, 4, 4))]),
        "log_softmax": (_projected(lambda x: T.log_softmax(x, 1), (2, 3, 4, 4), rng), [n((2, 3, 4, 4))]),
        "conv2d": (_projected(lambda x, w, b: T.conv2d(x, w, b, 1, 1), (2, 3, 6, 6), rng),
                   [n((2, 2, 6, 6)), n((3, 2, 3, 3)), n(3)]),
        "conv2d_stride2": (_projected(lambda x, w, b: T.conv2d(x, w, b, 2, 2), (1, 3, 4, 4), rng),
                           [n((1, 2, 8, 8)), n((3, 2, 5, 5)), n(3)]),
        "max_pool2d": (_projected(lambda x: T.max_pool2d(x, 2), (2, 2, 3, 3), rng), [n((2, 2, 6, 6))]),
        "upsample_nearest2d": (_projected(lambda x: T.upsample_nearest2d(x, 2), (2, 2, 6, 6), rng),
                               [n((2, 2, 3, 3))]),
        "batch_norm_train": (_projected(lambda x, g, b: T.batch_norm(x, g, b, rm.copy(), rv.copy(), "train"),
                                        (2, 3, 4, 4), rng), [n((2, 3, 4, 4)), n(3), n(3)]),
        "batch_norm_adapt": (_projected(lambda x, g, b: T.batch_norm(x, g, b, rm, rv, "adapt"),
                                        (2, 3, 4, 4), rng), [n((2, 3, 4, 4)), n(3), n(3)]),
        "batch_norm_eval": (_projected(lambda x, g, b: T.batch_norm(x, g, b, rmv, rvv, "eval"),
                                       (2, 3, 4, 4), rng), [n((2, 3, 4, 4)), n(3), n(3)]),
        "dice_loss": (lambda z: losses.dice_loss(T.softmax(z, 1), onehot), [n((2, 3, 4, 4))]),
        "cross_entropy_loss": (lambda z: losses.cross_entropy_loss(z, labels), [n((2, 3, 4, 4))]),
        "energy_bce_loss": (lambda g: losses.energy_bce_loss(g, patch_labels), [2 * n((2, 1, 2, 2))]),
        "energy_adaptation_loss": (losses.energy_adaptation_loss, [2 * n((2, 1, 2, 2))]),
        "entropy_loss": (losses.entropy_loss, [n((2, 3, 4, 4))]),
    }
    return cases


def run_suite(seed: int = 0, probes: int = 10, tol: float = REL_TOL) -> list[GradcheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, arrays) in _cases(rng).items():
        err = check_gradients(fn, arrays, rng, probes)
        results.append(GradcheckResult(name, err, err < tol))
    return results


def main(seed: int = 0) -> int:
    start = time.perf_counter()
    results = run_suite(seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24s} max_rel_err={r.max_rel_error:.3e}")
    print(f"{sum(r.passed for r in results)}/{len(results)} passed in {time.perf_counter() - start:.1f}s")
    return 0 if all(r.passed for r in results) else 1
