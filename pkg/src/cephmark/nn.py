"""Heatmap regressors: a plain encoder-decoder FCN and a U-Net.

Both share one layer plan.  Each encoder level runs two ``k x k`` convs with
ReLU and a 2x2 max-pool; the bottleneck runs two more convs; each decoder
level upsamples by two and runs two convs.  The U-Net additionally
concatenates the matching encoder activation before the first decoder conv.
A final 1x1 conv maps to one channel per landmark, with identity output.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (ShapeError, Tensor, concat_channels, conv2d, maxpool2d,
                     relu, upsample2x)

ARCHES = ("fcn", "unet")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "unet"
    input_hw: tuple[int, int] = (64, 64)
    in_channels: int = 1
    out_channels: int = 27
    base_channels: int = 8
    depth: int = 2
    kernel_size: int = 3
    seed: int = 0
    upsample: str = "nearest"

    def validate(self) -> None:
        problems = []
        if self.arch not in ARCHES:
            problems.append(f"arch must be one of {ARCHES}, got {self.arch!r}")
        if self.depth < 1:
            problems.append(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            problems.append(f"base_channels must be >= 1, got {self.base_channels}")
        if self.out_channels < 1:
            problems.append(f"out_channels must be >= 1, got {self.out_channels}")
        if self.in_channels < 1:
            problems.append(f"in_channels must be >= 1, got {self.in_channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            problems.append(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.upsample not in ("nearest", "bilinear"):
            problems.append(f"upsample must be nearest or bilinear, got {self.upsample!r}")
        if not (0 <= self.seed < 2**64):
            problems.append("seed must be an unsigned 64-bit integer")
        h, w = self.input_hw
        if self.depth >= 1 and (h % 2**self.depth or w % 2**self.depth or h < 1 or w < 1):
            problems.append(f"input_hw {h}x{w} must be divisible by 2**depth = {2**self.depth}")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    k: int

    @property
    def n_params(self) -> int:
        return self.cin * self.cout * self.k * self.k + self.cout


def layer_plan(cfg: ModelConfig) -> list[ConvSpec]:
    """Every conv of the network, in forward order."""
    k, skip = cfg.kernel_size, cfg.arch == "unet"
    ch = [cfg.base_channels * 2**lvl for lvl in range(cfg.depth + 1)]
    plan = []
    cin = cfg.in_channels
    for lvl in range(cfg.depth):
        plan += [ConvSpec(f"enc{lvl}.conv1", cin, ch[lvl], k),
                 ConvSpec(f"enc{lvl}.conv2", ch[lvl], ch[lvl], k)]
        cin = ch[lvl]
    plan += [ConvSpec("bottleneck.conv1", cin, ch[cfg.depth], k),
             ConvSpec("bottleneck.conv2", ch[cfg.depth], ch[cfg.depth], k)]
    cin = ch[cfg.depth]
    for lvl in reversed(range(cfg.depth)):
        first_in = cin + ch[lvl] if skip else cin
        plan += [ConvSpec(f"dec{lvl}.conv1", first_in, ch[lvl], k),
                 ConvSpec(f"dec{lvl}.conv2", ch[lvl], ch[lvl], k)]
        cin = ch[lvl]
    plan.append(ConvSpec("head", cin, cfg.out_channels, 1))
    return plan


@dataclass
class Model:
    config: ModelConfig
    layers: list[ConvSpec] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names do not match: {sorted(missing)}")
        for name, arr in state.items():
            if tuple(arr.shape) != self.params[name].shape:
                raise ShapeError(f"{name}: expected {self.params[name].shape}, got {arr.shape}")
            self.params[name] = Tensor(arr, requires_grad=True)

    def __call__(self, batch: Tensor) -> Tensor:
        return forward(self, batch)


def _init_params(cfg: ModelConfig, plan: list[ConvSpec]) -> dict[str, Tensor]:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for spec in plan:
        # fan-in uniform for weights and biases alike; zero biases with a
        # He-normal scale stalls these sparse-target nets at the all-zero output
        bound = 1.0 / np.sqrt(spec.cin * spec.k * spec.k)
        w = rng.uniform(-bound, bound, (spec.cout, spec.cin, spec.k, spec.k))
        b = rng.uniform(-bound, bound, spec.cout)
        params[f"{spec.name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{spec.name}.bias"] = Tensor(b, requires_grad=True)
    return params


def _build(cfg: ModelConfig, arch: str) -> Model:
    if cfg.arch != arch:
        raise ConfigError(f"config arch is {cfg.arch!r}, builder expects {arch!r}")
    cfg.validate()
    plan = layer_plan(cfg)
    return Model(cfg, plan, _init_params(cfg, plan))


def build_fcn(config: ModelConfig) -> Model:
    return _build(config, "fcn")


def build_unet(config: ModelConfig) -> Model:
    return _build(config, "unet")


def build_model(config: ModelConfig) -> Model:
    return _build(config, config.arch)


def param_count(model: Model) -> int:
    return sum(p.size for p in model.params.values())


def _conv(model: Model, name: str, x: Tensor, act: bool = True) -> Tensor:
    k = model.params[f"{name}.weight"].shape[-1]
    y = conv2d(x, model.params[f"{name}.weight"], model.params[f"{name}.bias"], padding=k // 2)
    return relu(y) if act else y


def forward(model: Model, batch: Tensor) -> Tensor:
    """Map ``[N, in_channels, H, W]`` images to ``[N, out_channels, H, W]`` heatmaps."""
    cfg = model.config
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    expected = (cfg.in_channels, *cfg.input_hw)
    if batch.data.ndim != 4 or batch.shape[1:] != expected:
        raise ShapeError(f"forward: expected batch of shape (N, {expected[0]}, "
                         f"{expected[1]}, {expected[2]}), got {batch.shape}")
    x = batch
    skips = []
    for lvl in range(cfg.depth):
        x = _conv(model, f"enc{lvl}.conv1", x)
        x = _conv(model, f"enc{lvl}.conv2", x)
        skips.append(x)
        x, _ = maxpool2d(x, 2)
    x = _conv(model, "bottleneck.conv1", x)
    x = _conv(model, "bottleneck.conv2", x)
    for lvl in reversed(range(cfg.depth)):
        x = upsample2x(x, cfg.upsample)
        if cfg.arch == "unet":
            x = concat_channels(x, skips[lvl])
        x = _conv(model, f"dec{lvl}.conv1", x)
        x = _conv(model, f"dec{lvl}.conv2", x)
    return _conv(model, "head", x, act=False)


# weight container ------------------------------------------------------------
#
# header: b"CPHW" magic, u32 version, u32 parameter count
# per parameter: u32 name length, utf-8 name, u32 rank, u64 dims..., f64 values
# all integers and floats little-endian

MAGIC = b"CPHW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps_weights(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(state)))
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.astype("<f8").tobytes(order="C"))
    return buf.getvalue()


def loads_weights(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated weight file at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a weight file (bad magic)")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported weight file version {version}")
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(8 * n)), dtype="<f8").astype(np.float64)
        state[name] = arr.reshape(dims)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last parameter")
    return state


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_weights(path, state: dict[str, np.ndarray]) -> None:
    atomic_write(path, dumps_weights(state))


def load_weights(path) -> dict[str, np.ndarray]:
    return loads_weights(Path(path).read_bytes())
