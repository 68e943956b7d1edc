"""Synthetic disk + ring "anatomy" with a source domain and a covariate-shifted target.

The mask depends only on the seed; the intensity model (class means, bias
field, gamma, noise) is the only thing a :class:`DomainSpec` changes.
"""
from __future__ import annotations

import math
import shutil
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import Tensor

NUM_CLASSES = 3


@dataclass(frozen=True)
class DomainSpec:
    name: str
    intensity_means: tuple[float, float, float]
    noise_sigma: float
    gamma: float = 1.0
    bias_field_amplitude: float = 0.0
    bias_field_scale: float = 2.0  # period of the bias field in image widths


SOURCE = DomainSpec("source", (0.2, 0.8, 0.5), noise_sigma=0.02, gamma=1.0, bias_field_amplitude=0.0)
TARGET = DomainSpec("target", (0.3, 0.6, 0.45), noise_sigma=0.08, gamma=1.6, bias_field_amplitude=0.15)
DOMAINS = {"source": SOURCE, "target": TARGET}


@dataclass(frozen=True)
class ShapeParams:
    center: tuple[float, float]  # (row, col)
    inner_radius: tuple[float, float]
    ring_thickness: float
    rotation: float


@dataclass
class Sample:
    image: np.ndarray  # float32 [H,W] in [0,1]
    mask: np.ndarray  # uint8 [H,W] in {0,1,2}
    domain: str
    seed: int


def sample_shape(rng: np.random.Generator, h: int, w: int, max_tries: int = 100) -> ShapeParams:
    size = min(h, w)
    for _ in range(max_tries):
        a, b = rng.uniform(0.09 * size, 0.2 * size, 2)
        t = rng.uniform(max(2.0, 0.05 * size), max(2.0, 0.1 * size))
        rot = rng.uniform(0.0, math.pi)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        reach = max(a, b) + t + 1.0
        if min(a, b) >= 4.0 and reach <= cy <= h - 1 - reach and reach <= cx <= w - 1 - reach:
            return ShapeParams((cy, cx), (a, b), t, rot)
    raise ValueError(f"could not place a shape in a {h}x{w} image after {max_tries} tries")


def rasterize(shape: ShapeParams, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - shape.center[0], xx - shape.center[1]
    c, s = math.cos(shape.rotation), math.sin(shape.rotation)
    u, v = dx * c + dy * s, -dx * s + dy * c
    a, b = shape.inner_radius
    t = shape.ring_thickness
    inner = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    outer = (u / (a + t)) ** 2 + (v / (b + t)) ** 2 <= 1.0
    mask = np.zeros((h, w), np.uint8)
    mask[outer] = 2
    mask[inner] = 1
    return mask


def bias_field(rng: np.random.Generator, h: int, w: int, amplitude: float, scale: float) -> np.ndarray:
    """Smooth multiplicative field: a random-direction plane wave around 1."""
    angle = rng.uniform(0, 2 * math.pi)
    phase = rng.uniform(0, 2 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    proj = (xx * math.cos(angle) + yy * math.sin(angle)) / (scale * max(h, w))
    return 1.0 + amplitude * np.cos(2 * math.pi * proj + phase)


def generate_sample(seed: int, h: int = 64, w: int = 64, domain: DomainSpec = SOURCE) -> Sample:
    if h % 16 or w % 16:
        raise ValueError(f"image size {h}x{w} must be divisible by 16")
    shape_rng = np.random.default_rng([seed, 0])
    intensity_rng = np.random.default_rng([seed, 1])
    mask = rasterize(sample_shape(shape_rng, h, w), h, w)

    img = np.asarray(domain.intensity_means, np.float64)[mask]
    if domain.bias_field_amplitude:
        img = img * bias_field(intensity_rng, h, w, domain.bias_field_amplitude, domain.bias_field_scale)
    img = np.clip(img, 0.0, 1.0) ** domain.gamma
    if domain.noise_sigma:
        img = img + intensity_rng.normal(0.0, domain.noise_sigma, (h, w))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img, mask, domain.name, seed)


# -- augmentation ------------------------------------------------------------
def flip(sample: Sample, axis: int) -> Sample:
    return replace(sample, image=np.flip(sample.image, axis).copy(), mask=np.flip(sample.mask, axis).copy())


def _shift(arr: np.ndarray, dy: int, dx: int, fill) -> np.ndarray:
    out = np.full_like(arr, fill)
    h, w = arr.shape
    src = arr[max(0, -dy):h - max(0, dy), max(0, -dx):w - max(0, dx)]
    out[max(0, dy):max(0, dy) + src.shape[0], max(0, dx):max(0, dx) + src.shape[1]] = src
    return out


def translate(sample: Sample, dy: int, dx: int) -> Sample:
    """Integer shift; uncovered pixels become background (mask 0, image median)."""
    fill = float(np.median(sample.image))
    return replace(sample, image=_shift(sample.image, dy, dx, fill), mask=_shift(sample.mask, dy, dx, 0))


def rotate(sample: Sample, degrees: float) -> Sample:
    img = ndimage.rotate(sample.image, degrees, reshape=False, order=1, mode="nearest")
    mask = ndimage.rotate(sample.mask, degrees, reshape=False, order=0, mode="constant", cval=0)
    return replace(sample, image=np.clip(img, 0, 1).astype(np.float32), mask=mask.astype(np.uint8))


def augment(sample: Sample, p: float, rng: np.random.Generator, max_shift: int = 8,
            max_degrees: float = 15.0) -> Sample:
    """With probability ``p``: random flip, integer translation, small rotation."""
    if rng.random() >= p:
        return sample
    out = flip(sample, int(rng.integers(0, 2)))
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, 2))
    out = translate(out, dy, dx)
    return rotate(out, float(rng.uniform(-max_degrees, max_degrees)))


# -- tensor files --------------------------------------------------------------
TENSOR_MAGIC = b"ETT1"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype(np.uint8)}


def save_tensor(path, array) -> None:
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    if arr.dtype not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or uint8")
    header = TENSOR_MAGIC + struct.pack(f"<BI{arr.ndim}I", _DTYPE_CODES[arr.dtype], arr.ndim, *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=_CODE_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != TENSOR_MAGIC:
        raise ValueError(f"{path}: bad magic at byte offset 0")
    if len(buf) < 9:
        raise ValueError(f"{path}: truncated header at byte offset {len(buf)}")
    code, rank = struct.unpack_from("<BI", buf, 4)
    if code not in _CODE_DTYPES:
        raise ValueError(f"{path}: unknown dtype code {code} at byte offset 4")
    if len(buf) < 9 + 4 * rank:
        raise ValueError(f"{path}: truncated dims at byte offset {len(buf)}")
    dims = struct.unpack_from(f"<{rank}I", buf, 9)
    start = 9 + 4 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - start != count * dtype.itemsize:
        raise ValueError(f"{path}: payload size mismatch at byte offset {start}: "
                         f"expected {count * dtype.itemsize} bytes, found {len(buf) - start}")
    return np.frombuffer(buf, dtype, count, start).reshape(dims).astype(dtype.newbyteorder("="))


# -- datasets --------------------------------------------------------------------
SPLITS = ("train", "val", "test")


def split_counts(n: int) -> tuple[int, int, int]:
    """60/20/20 split; rounding leftovers go to the test split."""
    n_train, n_val = n * 60 // 100, n * 20 // 100
    return n_train, n_val, n - n_train - n_val


def build_dataset(out_dir, n: int, domain: DomainSpec | str = SOURCE, seed0: int = 0,
                  h: int = 64, w: int = 64, force: bool = False) -> list[tuple[int, int, str]]:
    """Write ``images/NNNN.t``, ``masks/NNNN.t``, ``manifest.txt`` and split lists."""
    domain = DOMAINS[domain] if isinstance(domain, str) else domain
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    manifest = []
    for i in range(n):
        seed = seed0 * 100_000 + i
        s = generate_sample(seed, h, w, domain)
        save_tensor(out / "images" / f"{i:04d}.t", s.image)
        save_tensor(out / "masks" / f"{i:04d}.t", s.mask)
        manifest.append((i, seed, domain.name))
    (out / "manifest.txt").write_text("".join(f"{i} {seed} {tag}\n" for i, seed, tag in manifest))
    bounds = np.cumsum((0, *split_counts(n)))
    for name, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
        (out / f"{name}.txt").write_text("".join(f"{i}\n" for i in range(lo, hi)))
    return manifest


def read_manifest(data_dir) -> list[tuple[int, int, str]]:
    path = Path(data_dir) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path}: manifest not found")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'index seed domain', got {line!r}")
        rows.append((int(parts[0]), int(parts[1]), parts[2]))
    return rows


def load_split(data_dir, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Return ``images[N,1,H,W]`` float32 and ``masks[N,H,W]`` uint8 for a split ("all" for everything)."""
    root = Path(data_dir)
    if split == "all":
        indices = [row[0] for row in read_manifest(root)]
    else:
        path = root / f"{split}.txt"
        if not path.exists():
            raise FileNotFoundError(f"{path}: split file not found")
        indices = [int(tok) for tok in path.read_text().split()]
    if not indices:
        return np.zeros((0, 1, 0, 0), np.float32), np.zeros((0, 0, 0), np.uint8)
    images = np.stack([load_tensor(root / "images" / f"{i:04d}.t") for i in indices])[:, None]
    masks = np.stack([load_tensor(root / "masks" / f"{i:04d}.t") for i in indices])
    return images.astype(np.float32), masks.astype(np.uint8)
