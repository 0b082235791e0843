"""Cloak generator, residual discriminator, and checkpoint serialization.

The generator maps a perturbed image to its predicted cloak (bounded by a
final tanh); cleaning subtracts that cloak and clamps back into range. The
discriminator scores a residual image with a stack of strided convolutions
whose patch map is averaged to a single realness scalar.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from glean.ffc import (
    LEAKY_SLOPE,
    FfcConfig,
    derive_param_shapes,
    ffc_forward,
)
from glean.tensor import (
    ContractError,
    ShapeError,
    Tensor,
    clamp,
    conv2d,
    leaky_relu,
    mul,
    pointwise,
    sub,
    tanh,
    tmean_over,
)

CHECKPOINT_MAGIC = b"GLEANCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or unsupported checkpoint files."""


@dataclass(frozen=True)
class GeneratorConfig:
    input_channels: int = 3
    stem_channels: int = 32
    num_ffc_blocks: int = 4
    output_scale: float = 0.25
    ffc_alpha: float = 0.5
    kernel_size: int = 3
    activation: str = "leaky_relu"
    blocks: tuple[FfcConfig, ...] = ()

    def __post_init__(self):
        if self.output_scale <= 0:
            raise ContractError("output_scale must be positive")
        if self.stem_channels < 2 or self.num_ffc_blocks < 0:
            raise ContractError("bad generator dimensions")
        if not self.blocks:
            default = tuple(
                FfcConfig(self.stem_channels, self.stem_channels,
                          self.ffc_alpha, self.ffc_alpha, self.kernel_size,
                          self.activation)
                for _ in range(self.num_ffc_blocks))
            object.__setattr__(self, "blocks", default)
        if len(self.blocks) != self.num_ffc_blocks:
            raise ContractError("blocks list does not match num_ffc_blocks")
        if self.blocks and self.blocks[0].in_channels != self.stem_channels:
            raise ContractError("first block must accept stem_channels")

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "stem_channels": self.stem_channels,
            "num_ffc_blocks": self.num_ffc_blocks,
            "output_scale": self.output_scale,
            "ffc_alpha": self.ffc_alpha,
            "kernel_size": self.kernel_size,
            "activation": self.activation,
            "blocks": [asdict(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        blocks = tuple(FfcConfig(**b) for b in d.get("blocks", []))
        return cls(
            input_channels=d["input_channels"],
            stem_channels=d["stem_channels"],
            num_ffc_blocks=d["num_ffc_blocks"],
            output_scale=d["output_scale"],
            ffc_alpha=d["ffc_alpha"],
            kernel_size=d["kernel_size"],
            activation=d.get("activation", "leaky_relu"),
            blocks=blocks,
        )


@dataclass(frozen=True)
class DiscriminatorConfig:
    input_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 1)
    kernel_size: int = 3
    strides: tuple[int, ...] = (2, 2, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "strides", tuple(self.strides))
        if len(self.channels) != len(self.strides) or not self.channels:
            raise ContractError("channels and strides must align and be nonempty")
        if self.kernel_size % 2 == 0:
            raise ContractError("discriminator kernel_size must be odd")

    @property
    def downsample_factor(self) -> int:
        f = 1
        for s in self.strides:
            f *= s
        return f

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "strides": list(self.strides),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        return cls(input_channels=d["input_channels"], channels=tuple(d["channels"]),
                   kernel_size=d["kernel_size"], strides=tuple(d["strides"]))


def generator_param_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, ...]]:
    k = cfg.kernel_size
    shapes: dict[str, tuple[int, ...]] = {
        "gen.stem.w": (cfg.stem_channels, cfg.input_channels, k, k),
        "gen.stem.b": (cfg.stem_channels,),
    }
    for i, block in enumerate(cfg.blocks):
        for name, shape in derive_param_shapes(block).items():
            shapes[f"gen.block{i}.{name}"] = shape
    last = cfg.blocks[-1].out_channels if cfg.blocks else cfg.stem_channels
    shapes["gen.final.w"] = (cfg.input_channels, last, k, k)
    shapes["gen.final.b"] = (cfg.input_channels,)
    return shapes


def discriminator_param_shapes(cfg: DiscriminatorConfig) -> dict[str, tuple[int, ...]]:
    k = cfg.kernel_size
    shapes = {}
    prev = cfg.input_channels
    for i, c in enumerate(cfg.channels):
        shapes[f"disc.conv{i}.w"] = (c, prev, k, k)
        shapes[f"disc.conv{i}.b"] = (c,)
        prev = c
    return shapes


def param_count(cfg) -> int:
    """Exact trainable scalar count implied by a generator or discriminator config."""
    if isinstance(cfg, GeneratorConfig):
        shapes = generator_param_shapes(cfg)
    elif isinstance(cfg, DiscriminatorConfig):
        shapes = discriminator_param_shapes(cfg)
    else:
        raise ContractError(f"param_count expects a model config, got {type(cfg)!r}")
    return int(sum(int(np.prod(s)) for s in shapes.values()))


@dataclass
class ModelParams:
    """Named parameter tensors for generator + discriminator, checkpointable."""

    generator: GeneratorConfig
    discriminator: DiscriminatorConfig
    tensors: dict[str, Tensor]
    step: int = 0

    def validate(self) -> None:
        expected = generator_param_shapes(self.generator) | \
            discriminator_param_shapes(self.discriminator)
        if set(expected) != set(self.tensors):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ContractError(f"parameter names mismatch: missing={sorted(missing)}, "
                                f"unexpected={sorted(extra)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ContractError(
                    f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def init_model_params(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig,
                      seed: int, weight_std: float = 0.02) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC10A]))
    tensors: dict[str, Tensor] = {}
    shapes = generator_param_shapes(gen_cfg) | discriminator_param_shapes(disc_cfg)
    for name, shape in shapes.items():
        if name.endswith(".b"):
            tensors[name] = Tensor.zeros(shape, name)
        else:
            tensors[name] = Tensor(rng.normal(0.0, weight_std, size=shape).astype(np.float32),
                                   name)
    model = ModelParams(gen_cfg, disc_cfg, tensors)
    model.validate()
    return model


def _check_image(x: Tensor, channels: int, multiple: int, what: str) -> None:
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"{what} must be (C,H,W) or (N,C,H,W), got {list(x.shape)}")
    c, h, w = x.data.shape[-3:]
    if c != channels:
        raise ShapeError(f"{what} needs {channels} channels, got {c}")
    if h % multiple or w % multiple:
        raise ShapeError(f"{what} spatial dims must be multiples of {multiple}, got {h}x{w}")


def generator_forward(glazed: Tensor, cfg: GeneratorConfig,
                      params: Mapping[str, Tensor]) -> Tensor:
    """Predicted cloak for a perturbed image in [-1,1] space.

    Output has the input's shape and is bounded by +-output_scale through
    the final tanh.
    """
    _check_image(glazed, cfg.input_channels, 8, "generator input")
    if np.max(np.abs(glazed.data)) > 1.0 + 1e-4:
        raise ContractError("generator input must be normalized to [-1, 1]")
    x = conv2d(glazed, params["gen.stem.w"], params["gen.stem.b"], 1, "same")
    x = pointwise(cfg.activation, x, LEAKY_SLOPE)
    for i, block in enumerate(cfg.blocks):
        sub_params = {k.split(".", 2)[2]: v for k, v in params.items()
                      if k.startswith(f"gen.block{i}.")}
        x = ffc_forward(x, block, sub_params)
    x = conv2d(x, params["gen.final.w"], params["gen.final.b"], 1, "same")
    return mul(tanh(x), cfg.output_scale)


def clean(glazed: Tensor, predicted_cloak: Tensor) -> Tensor:
    """Subtract the cloak and clamp back into [-1, 1]."""
    if glazed.shape != predicted_cloak.shape:
        raise ShapeError(
            f"shape mismatch: image {list(glazed.shape)} vs cloak {list(predicted_cloak.shape)}")
    return clamp(sub(glazed, predicted_cloak), -1.0, 1.0)


def discriminator_forward(residual: Tensor, cfg: DiscriminatorConfig,
                          params: Mapping[str, Tensor]) -> Tensor:
    """Realness score: strided conv stack, then global mean over the patch map.

    Returns a scalar for a single image, or an (N,) tensor for a batch.
    The score is pre-activation; the loss layer interprets it.
    """
    _check_image(residual, cfg.input_channels, cfg.downsample_factor, "discriminator input")
    squeezed = residual.data.ndim == 3
    x = residual
    n_layers = len(cfg.channels)
    for i, stride in enumerate(cfg.strides):
        x = conv2d(x, params[f"disc.conv{i}.w"], params[f"disc.conv{i}.b"], stride, "same")
        if i < n_layers - 1:
            x = leaky_relu(x, LEAKY_SLOPE)
    if squeezed:
        return tmean_over(x, (0, 1, 2))
    return tmean_over(x, (1, 2, 3))


# ---------------------------------------------------------------------------
# checkpoint container: magic, version u32 LE, length-prefixed JSON metadata,
# then per-parameter records (name, rank u32, dims u32[], f32[] LE)

def checkpoint_bytes(model: ModelParams) -> bytes:
    meta = json.dumps(
        {"generator": model.generator.to_dict(),
         "discriminator": model.discriminator.to_dict(),
         "step": model.step},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    for name, t in model.tensors.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        dims = t.data.shape
        buf.write(struct.pack("<I", len(dims)))
        buf.write(struct.pack(f"<{len(dims)}I", *dims))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: ModelParams, path: str | Path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


def checkpoint_from_bytes(raw: bytes) -> ModelParams:
    view = io.BytesIO(raw)

    def take(n: int, what: str) -> bytes:
        b = view.read(n)
        if len(b) != n:
            raise CheckpointError(f"corrupt checkpoint: truncated while reading {what}")
        return b

    if take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_len = struct.unpack("<I", take(4, "metadata length"))[0]
    try:
        meta = json.loads(take(meta_len, "metadata").decode("utf-8"))
        gen_cfg = GeneratorConfig.from_dict(meta["generator"])
        disc_cfg = DiscriminatorConfig.from_dict(meta["discriminator"])
        step = int(meta["step"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: bad metadata ({exc})") from exc

    tensors: dict[str, Tensor] = {}
    while True:
        head = view.read(4)
        if not head:
            break
        if len(head) != 4:
            raise CheckpointError("corrupt checkpoint: truncated parameter record")
        name_len = struct.unpack("<I", head)[0]
        name = take(name_len, "parameter name").decode("utf-8")
        rank = struct.unpack("<I", take(4, f"{name} rank"))[0]
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * count, f"{name} values"), dtype="<f4")
        if name in tensors:
            raise CheckpointError(f"corrupt checkpoint: duplicate parameter {name!r}")
        tensors[name] = Tensor(values.reshape(dims).copy(), name)

    model = ModelParams(gen_cfg, disc_cfg, tensors, step)
    try:
        model.validate()
    except ContractError as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return model


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())
