"""Structural similarity and peak signal-to-noise ratio, plus the
per-pair evaluation report.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), K1=0.01,
K2=0.03, dynamic range 1, computed per channel over valid windows and
averaged. Both metrics run in float64 on [0,1] inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from glean.tensor import ContractError, ShapeError, Tensor
from glean.data import SamplePair, denormalize, _ordered_map
from glean.model import clean

INFINITE = float("inf")

_WINDOW = 11
_SIGMA = 1.5
_K1, _K2, _L = 0.01, 0.03, 1.0
_C1 = (_K1 * _L) ** 2
_C2 = (_K2 * _L) ** 2


def gaussian_window(n: int = _WINDOW, sigma: float = _SIGMA) -> np.ndarray:
    half = (n - 1) / 2.0
    g = np.exp(-((np.arange(n) - half) ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable windowed weighting with valid extent only."""
    t = sliding_window_view(x, len(g), axis=1) @ g
    return sliding_window_view(t, len(g), axis=0) @ g


def _as_image(x: Tensor | np.ndarray, what: str) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 3:
        raise ShapeError(f"{what} must be (C,H,W), got {list(data.shape)}")
    return data.astype(np.float64)


def ssim(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    """Mean windowed SSIM over channels; 1.0 iff the images are identical."""
    xa, xb = _as_image(a, "ssim input"), _as_image(b, "ssim input")
    if xa.shape != xb.shape:
        raise ShapeError(f"ssim shape mismatch: {xa.shape} vs {xb.shape}")
    _, h, w = xa.shape
    if h < _WINDOW or w < _WINDOW:
        raise ShapeError(f"ssim needs at least {_WINDOW}x{_WINDOW} images, got {h}x{w}")
    g = gaussian_window()
    total = 0.0
    for c in range(xa.shape[0]):
        mu1 = _filter_valid(xa[c], g)
        mu2 = _filter_valid(xb[c], g)
        s11 = _filter_valid(xa[c] * xa[c], g) - mu1 * mu1
        s22 = _filter_valid(xb[c] * xb[c], g) - mu2 * mu2
        s12 = _filter_valid(xa[c] * xb[c], g) - mu1 * mu2
        num = (2 * mu1 * mu2 + _C1) * (2 * s12 + _C2)
        den = (mu1 * mu1 + mu2 * mu2 + _C1) * (s11 + s22 + _C2)
        total += float(np.mean(num / den))
    return total / xa.shape[0]


def psnr(a: Tensor | np.ndarray, b: Tensor | np.ndarray) -> float:
    """10*log10(1/MSE) with MAX=1; identical inputs give INFINITE."""
    xa, xb = _as_image(a, "psnr input"), _as_image(b, "psnr input")
    if xa.shape != xb.shape:
        raise ShapeError(f"psnr shape mismatch: {xa.shape} vs {xb.shape}")
    mse = float(np.mean((xa - xb) ** 2))
    if mse == 0.0:
        return INFINITE
    return 10.0 * math.log10(1.0 / mse)


@dataclass
class ReportRow:
    id: str
    ssim_perturbed: float
    psnr_perturbed: float
    ssim_cleaned: float
    psnr_cleaned: float


@dataclass
class MetricsReport:
    """Per-image quality rows plus their arithmetic means."""

    rows: list[ReportRow]

    def mean(self, column: str) -> float:
        return sum(getattr(r, column) for r in self.rows) / len(self.rows)

    @property
    def mean_row(self) -> ReportRow:
        return ReportRow("MEAN", self.mean("ssim_perturbed"), self.mean("psnr_perturbed"),
                         self.mean("ssim_cleaned"), self.mean("psnr_cleaned"))

    def to_csv(self) -> str:
        def fmt(r: ReportRow) -> str:
            return (f"{r.id},{r.ssim_perturbed:.6f},{_fmt_db(r.psnr_perturbed)},"
                    f"{r.ssim_cleaned:.6f},{_fmt_db(r.psnr_cleaned)}")

        lines = ["id,ssim_perturbed,psnr_perturbed,ssim_cleaned,psnr_cleaned"]
        lines += [fmt(r) for r in self.rows]
        lines.append(fmt(self.mean_row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8", newline="\n")
        return path


def _fmt_db(v: float) -> str:
    return "inf" if v == INFINITE else f"{v:.3f}"


def evaluate(predict_cloak: Callable[[SamplePair], Tensor],
             pairs: Sequence[SamplePair]) -> MetricsReport:
    """Score every pair: perturbed-vs-original and cleaned-vs-original.

    ``predict_cloak`` maps a pair to its predicted residual in [-1,1]
    space (typically a generator closure; an oracle returning
    ``pair.residual`` gives perfect cleaning).
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("evaluate needs a nonempty pair list")

    def score(pair: SamplePair) -> ReportRow:
        original = denormalize(pair.original)
        perturbed = denormalize(pair.perturbed)
        cleaned = denormalize(clean(pair.perturbed, predict_cloak(pair)))
        return ReportRow(
            pair.id,
            ssim(perturbed, original), psnr(perturbed, original),
            ssim(cleaned, original), psnr(cleaned, original),
        )

    return MetricsReport(_ordered_map(score, pairs))
