"""Cloak-removal pipeline: predict ripple-style adversarial perturbations
with a small Fourier-convolution GAN and subtract them out."""

from glean.tensor import (
    ContractError,
    GradTape,
    HalfSpectrum,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    conv2d,
    irfft2,
    pointwise,
    rfft2,
)

__all__ = [
    "ContractError",
    "GradTape",
    "HalfSpectrum",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "backward",
    "conv2d",
    "irfft2",
    "pointwise",
    "rfft2",
]

__version__ = "0.1.0"
