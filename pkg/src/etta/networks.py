"""Segmentation UNet and region-based energy discriminator built on :mod:`etta.tensor`."""
from __future__ import annotations

import hashlib
import struct
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Conv2d:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        bound = np.sqrt(6.0 / (cin * k * k))  # He-uniform
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None

    def params(self) -> dict[str, Tensor]:
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.mode = "train"

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.mode)


class Model:
    """Shared parameter registry: layers are attributes listed in ``self.layers``."""

    layers: dict[str, Conv2d | BatchNorm2d]

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for lname, layer in self.layers.items():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.layers.items():
            if isinstance(layer, BatchNorm2d):
                for bname, b in layer.buffers().items():
                    out[f"{lname}.{bname}"] = b
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Every array that defines the model: parameters then BN buffers."""
        out = {name: p.data for name, p in self.named_params().items()}
        out.update(self.named_buffers())
        return out

    @property
    def bn_param_names(self) -> list[str]:
        return [f"{lname}.{pname}" for lname, layer in self.layers.items()
                if isinstance(layer, BatchNorm2d) for pname in layer.params()]

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def bn_parameters(self) -> list[Tensor]:
        params = self.named_params()
        return [params[n] for n in self.bn_param_names]

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval", "adapt"):
            raise ValueError(f"unknown BatchNorm mode {mode!r}")
        for layer in self.layers.values():
            if isinstance(layer, BatchNorm2d):
                layer.mode = mode

    def requires_grad_(self, flag: bool = True, names: list[str] | None = None) -> None:
        chosen = None if names is None else set(names)
        for name, p in self.named_params().items():
            p.requires_grad = flag if chosen is None or name in chosen else not flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_params(), self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]


def state_hash(arrays: dict[str, np.ndarray], names: list[str] | None = None) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays if names is None else names):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def param_hash(model: Model, names: list[str] | None = None) -> str:
    return state_hash({n: p.data for n, p in model.named_params().items()}, names)


def full_hash(model: Model) -> str:
    return state_hash(model.state())


class SegModel(Model):
    """UNet with ``depth`` resolution levels; each block is (conv3x3, BN, ReLU) x 2.

    The decoder upsamples by nearest neighbour, projects with a 1x1 conv, and
    concatenates the matching encoder features.
    """

    def __init__(self, num_classes: int = 3, base_channels: int = 16, depth: int = 3,
                 in_channels: int = 1, seed: int = 0):
        if num_classes < 2:
            raise ValueError("SegModel needs at least 2 classes")
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.depth = depth
        self.layers = {}
        widths = [base_channels * 2 ** i for i in range(depth)]
        cin = in_channels
        for lvl, width in enumerate(widths):
            self._block(f"enc{lvl}", cin, width, rng)
            cin = width
        for lvl in reversed(range(depth - 1)):
            width = widths[lvl]
            self.layers[f"up{lvl}"] = Conv2d(cin, width, 1, rng)
            self._block(f"dec{lvl}", 2 * width, width, rng)
            cin = width
        self.layers["head"] = Conv2d(cin, num_classes, 1, rng)

    def _block(self, name: str, cin: int, cout: int, rng) -> None:
        self.layers[f"{name}.conv1"] = Conv2d(cin, cout, 3, rng, bias=False)
        self.layers[f"{name}.bn1"] = BatchNorm2d(cout)
        self.layers[f"{name}.conv2"] = Conv2d(cout, cout, 3, rng, bias=False)
        self.layers[f"{name}.bn2"] = BatchNorm2d(cout)

    def _run_block(self, name: str, x: Tensor) -> Tensor:
        L = self.layers
        x = T.relu(L[f"{name}.bn1"](L[f"{name}.conv1"](x)))
        return T.relu(L[f"{name}.bn2"](L[f"{name}.conv2"](x)))

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        factor = 2 ** (self.depth - 1)
        if h % factor or w % factor:
            raise ValueError(f"SegModel input {h}x{w} not divisible by {factor}")
        skips = []
        for lvl in range(self.depth):
            if lvl:
                x = T.max_pool2d(x, 2)
            x = self._run_block(f"enc{lvl}", x)
            skips.append(x)
        for lvl in reversed(range(self.depth - 1)):
            x = self.layers[f"up{lvl}"](T.upsample_nearest2d(x, 2))
            x = self._run_block(f"dec{lvl}", T.concat([x, skips[lvl]], axis=1))
        return self.layers["head"](x)


class EnergyModel(Model):
    """Four stride-2 5x5 convs (each followed by LeakyReLU(0.2) then BN) and a 1x1 head.

    Maps a ``[N,C,H,W]`` class-probability map to ``[N,1,H/16,W/16]`` raw
    patch logits ``g``.
    """

    def __init__(self, num_classes: int = 3, widths=(32, 64, 128, 256), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.layers = {}
        cin = num_classes
        for i, width in enumerate(widths):
            self.layers[f"conv{i}"] = Conv2d(cin, width, 5, rng, stride=2, padding=2)
            self.layers[f"bn{i}"] = BatchNorm2d(width)
            cin = width
        self.layers["head"] = Conv2d(cin, 1, 1, rng)
        self.n_down = len(widths)

    @property
    def patch(self) -> int:
        return 2 ** self.n_down

    def __call__(self, p: Tensor) -> Tensor:
        h, w = p.shape[-2:]
        if h % self.patch or w % self.patch:
            raise ValueError(f"EnergyModel input {h}x{w} not divisible by patch {self.patch}")
        x = p
        for i in range(self.n_down):
            x = self.layers[f"bn{i}"](T.leaky_relu(self.layers[f"conv{i}"](x), 0.2))
        return self.layers["head"](x)


def build_seg_model(num_classes: int = 3, base_channels: int = 16, seed: int = 0, depth: int = 3) -> SegModel:
    return SegModel(num_classes, base_channels, depth, seed=seed)


def build_energy_model(num_classes: int = 3, seed: int = 0) -> EnergyModel:
    return EnergyModel(num_classes, seed=seed)


def seg_predict(model: SegModel, images) -> tuple[Tensor, Tensor, np.ndarray]:
    """Return ``(logits, probs, argmax)``; argmax ties go to the lower class index."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    logits = model(x)
    probs = T.softmax(logits, axis=1)
    return logits, probs, np.argmax(logits.data, axis=1).astype(np.uint8)


def energy_map(model: EnergyModel, probs) -> Tensor:
    x = probs if isinstance(probs, Tensor) else Tensor(probs)
    return model(x)


def ood_score(energy_logits) -> np.ndarray:
    """Per-patch probability of being out of distribution, ``sigmoid(-g)``."""
    g = energy_logits.data if isinstance(energy_logits, Tensor) else np.asarray(energy_logits)
    return T._stable_sigmoid(-g)


# -- checkpoint I/O --------------------------------------------------------
CKPT_MAGIC = b"ETTM"
CKPT_VERSION = 1


def save_checkpoint(path, model_or_state, meta: dict[str, float] | None = None) -> None:
    """Write ``ETTM | u16 version | u32 count | entries``; entries are f32 little-endian."""
    state = model_or_state.state() if isinstance(model_or_state, Model) else dict(model_or_state)
    if meta:
        for key, value in meta.items():
            state[f"meta.{key}"] = np.asarray([value], np.float32)
    chunks = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic at byte offset 0")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ValueError(f"{path}: truncated at byte offset {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<HI")
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (nlen,) = take("<H")
        if pos + nlen > len(buf):
            raise ValueError(f"{path}: truncated at byte offset {pos}")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise ValueError(f"{path}: truncated at byte offset {pos}")
        state[name] = np.frombuffer(buf, "<f4", int(nbytes // 4), pos).reshape(dims).astype(np.float32)
        pos += nbytes
    return state


def load_seg_model(path, num_classes: int = 3, base_channels: int = 16, depth: int = 3) -> SegModel:
    model = SegModel(num_classes, base_channels, depth)
    model.load_state(load_checkpoint(path))
    model.set_mode("eval")
    return model


def load_energy_model(path, num_classes: int = 3) -> EnergyModel:
    model = EnergyModel(num_classes)
    model.load_state(load_checkpoint(path))
    model.set_mode("eval")
    return model


@contextmanager
def frozen(model: Model):
    """Temporarily stop gradients to every parameter of ``model``."""
    flags = {name: p.requires_grad for name, p in model.named_params().items()}
    for p in model.parameters():
        p.requires_grad = False
    try:
        yield model
    finally:
        for name, p in model.named_params().items():
            p.requires_grad = flags[name]
