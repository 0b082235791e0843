"""Fourier-convolution block: local/global channel split with spectral mixing.

The block routes a fraction of channels through a spectral transform
(FFT -> 1x1 conv on stacked real/imag channels -> inverse FFT) that gives
them an image-wide, per-frequency receptive field, while the remaining
channels see ordinary 3x3 convolutions. Four cross paths mix the branches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from glean.tensor import (
    ContractError,
    GradTape,
    ShapeError,
    Tensor,
    add,
    concat_channels,
    conv2d,
    irfft2_stack,
    pointwise,
    rfft2_stack,
    slice_channels,
    POINTWISE_OPS,
)

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class FfcConfig:
    in_channels: int
    out_channels: int
    alpha_in: float = 0.5
    alpha_out: float = 0.5
    kernel_size: int = 3
    activation: str = "leaky_relu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ContractError("channel counts must be positive")
        if not (0.0 <= self.alpha_in < 1.0 and 0.0 <= self.alpha_out < 1.0):
            raise ContractError("alpha_in/alpha_out must lie in [0, 1)")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ContractError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.activation not in POINTWISE_OPS:
            raise ContractError(f"unknown activation {self.activation!r}")

    @property
    def split_in(self) -> tuple[int, int]:
        return split_channels(self.in_channels, self.alpha_in)

    @property
    def split_out(self) -> tuple[int, int]:
        return split_channels(self.out_channels, self.alpha_out)


def split_channels(total: int, alpha: float) -> tuple[int, int]:
    """(local, global) counts: round(alpha*total) with ties toward local,
    global clamped to [0, total-1] so the local branch is never empty."""
    g = math.ceil(alpha * total - 0.5)
    g = min(max(g, 0), total - 1)
    return total - g, g


def derive_param_shapes(cfg: FfcConfig) -> dict[str, tuple[int, ...]]:
    """Every weight shape the config implies, keyed by path name."""
    local_in, global_in = cfg.split_in
    local_out, global_out = cfg.split_out
    k = cfg.kernel_size
    shapes: dict[str, tuple[int, ...]] = {
        "ll.w": (local_out, local_in, k, k),
        "ll.b": (local_out,),
    }
    if global_in > 0:
        shapes["gl.w"] = (local_out, global_in, k, k)
        shapes["gl.b"] = (local_out,)
    if global_out > 0:
        shapes["lg.w"] = (global_out, local_in, k, k)
        shapes["lg.b"] = (global_out,)
    if global_in > 0 and global_out > 0:
        shapes["gg.w"] = (2 * global_out, 2 * global_in, 1, 1)
        shapes["gg.b"] = (2 * global_out,)
    return shapes


def init_ffc_params(cfg: FfcConfig, rng: np.random.Generator,
                    weight_std: float = 0.02) -> dict[str, Tensor]:
    """Normal(0, weight_std) weights, zero biases."""
    params = {}
    for name, shape in derive_param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = Tensor.zeros(shape)
        else:
            params[name] = Tensor(rng.normal(0.0, weight_std, size=shape).astype(np.float32))
    return params


def spectral_transform(x_g: Tensor, weight: Tensor, bias: Tensor | None = None,
                       activation: str = "leaky_relu") -> Tensor:
    """Per-frequency mixing of the global branch.

    rfft2 per channel -> real/imag stacked as 2*C channels -> 1x1 conv ->
    activation -> reassembled complex bins -> inverse rfft2. Spatial shape
    is preserved; the 1x1 conv weight is (2*C_out, 2*C_in, 1, 1).
    """
    squeezed = x_g.data.ndim == 3
    x4 = _lift_to_batch(x_g) if squeezed else x_g
    if x4.data.ndim != 4:
        raise ShapeError(f"spectral_transform expects (C,H,W) or (N,C,H,W), got {list(x_g.shape)}")
    c_in = x4.data.shape[1]
    if c_in < 1:
        raise ContractError("spectral_transform needs a nonempty global branch")
    if weight.data.shape[2:] != (1, 1) or weight.data.shape[1] != 2 * c_in:
        raise ShapeError(
            f"spectral weight must be (2*C_out, {2 * c_in}, 1, 1), got {list(weight.shape)}")
    w = x4.data.shape[3]
    spec = rfft2_stack(x4)
    mixed = conv2d(spec, weight, bias, stride=1, padding="same")
    mixed = pointwise(activation, mixed, LEAKY_SLOPE)
    out = irfft2_stack(mixed, w)
    return _drop_batch(out) if squeezed else out


def _lift_to_batch(x: Tensor) -> Tensor:
    from glean.tensor import _emit

    data = x.data[None]

    def _bw(g):
        return [(x, g[0])]

    return _emit(data, (x,), _bw)


def _drop_batch(x: Tensor) -> Tensor:
    from glean.tensor import _emit

    data = x.data[0]

    def _bw(g):
        return [(x, g[None])]

    return _emit(data, (x,), _bw)


def ffc_forward(x: Tensor, cfg: FfcConfig, params: Mapping[str, Tensor]) -> Tensor:
    """One block: split channels, run the four cross paths, fuse, activate.

    Output channel order is (local block, global block); spatial resolution
    is always preserved.
    """
    axis_c = 0 if x.data.ndim == 3 else 1
    if x.data.shape[axis_c] != cfg.in_channels:
        raise ShapeError(
            f"block expects {cfg.in_channels} channels, input has {x.data.shape[axis_c]}")
    local_in, global_in = cfg.split_in
    local_out, global_out = cfg.split_out
    act = cfg.activation

    x_l = slice_channels(x, 0, local_in) if global_in > 0 else x
    x_g = slice_channels(x, local_in, cfg.in_channels) if global_in > 0 else None

    y_l = conv2d(x_l, params["ll.w"], params["ll.b"], stride=1, padding="same")
    if x_g is not None:
        y_l = add(y_l, conv2d(x_g, params["gl.w"], params["gl.b"], stride=1, padding="same"))
    y_l = pointwise(act, y_l, LEAKY_SLOPE)
    if global_out == 0:
        return y_l

    y_g = conv2d(x_l, params["lg.w"], params["lg.b"], stride=1, padding="same")
    if x_g is not None:
        y_g = add(y_g, spectral_transform(x_g, params["gg.w"], params["gg.b"], act))
    y_g = pointwise(act, y_g, LEAKY_SLOPE)
    return concat_channels([y_l, y_g])
