"""Image-pair ingestion and desk-scale data synthesis.

Real perturbed corpora are not obtainable here, so training data comes from
two deterministic generators: a procedural "artwork" builder (gradients,
soft shapes, a value-noise texture patch, plus a guaranteed flat region)
and a cloak oracle that injects band-limited ripple noise whose amplitude
follows the local flatness of the image, i.e. the perturbation is strongest
exactly where such artifacts are most visible.
"""
from __future__ import annotations

import csv
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from glean.tensor import ContractError, HalfSpectrum, ShapeError, Tensor, irfft2, rfft2

MANIFEST_HEADER = ["id", "original_path", "perturbed_path"]
DEFAULT_AMPLITUDE = 0.18
DEFAULT_BAND = (0.10, 0.30)


class DataError(ValueError):
    """Raised for unreadable images, bad manifests, or synthesis misuse."""


def worker_count() -> int:
    """Worker parallelism cap; GLEAN_THREADS overrides the CPU count."""
    env = os.environ.get("GLEAN_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise DataError(f"GLEAN_THREADS must be an integer, got {env!r}") from exc
        if n < 1:
            raise DataError("GLEAN_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _ordered_map(fn: Callable, items: list) -> list:
    workers = min(worker_count(), len(items)) or 1
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# image files

def load_image(path: str | Path) -> Tensor:
    """8-bit RGB PNG -> channel-major float tensor with values v/255."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            if img.format != "PNG":
                raise DataError(f"{path}: expected a PNG file, got {img.format or 'unknown'}")
            if img.mode != "RGB":
                raise DataError(f"{path}: expected 8-bit RGB, got mode {img.mode!r}")
            arr = np.asarray(img, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DataError(f"{path}: not a readable image ({exc})") from exc
    except OSError as exc:
        raise DataError(f"{path}: corrupt image file ({exc})") from exc
    return Tensor(arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def save_image(x: Tensor | np.ndarray, path: str | Path) -> Path:
    """Quantize a [0,1] channel-major tensor to 8-bit RGB PNG."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 3 or data.shape[0] != 3:
        raise ShapeError(f"save_image expects (3,H,W), got {list(data.shape)}")
    q = np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    return path


def normalize(x: Tensor) -> Tensor:
    """[0,1] -> [-1,1]."""
    return Tensor(x.data * 2.0 - 1.0)


def denormalize(x: Tensor) -> Tensor:
    """[-1,1] -> [0,1]."""
    return Tensor((x.data + 1.0) * 0.5)


# ---------------------------------------------------------------------------
# sample pairs

@dataclass
class SamplePair:
    """(original, perturbed) images in [-1,1] space plus their residual."""

    id: str
    original: Tensor
    perturbed: Tensor

    def __post_init__(self):
        if self.original.shape != self.perturbed.shape:
            raise ShapeError(f"pair {self.id}: original {list(self.original.shape)} vs "
                             f"perturbed {list(self.perturbed.shape)}")
        c, h, w = self.original.shape
        if c != 3 or h % 8 or w % 8:
            raise ShapeError(f"pair {self.id}: need (3, 8k, 8k) images, got {list(self.original.shape)}")
        self._residual: Tensor | None = None

    @property
    def residual(self) -> Tensor:
        if self._residual is None:
            self._residual = Tensor(self.perturbed.data - self.original.data)
        return self._residual


# ---------------------------------------------------------------------------
# procedural artwork

def _derive_seeds(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]))


def _value_noise(rng: np.random.Generator, size: int, cell: int, octaves: int = 2) -> np.ndarray:
    """Bilinear-interpolated random grid; values roughly in [-1, 1]."""
    out = np.zeros((size, size), dtype=np.float32)
    amp = 1.0
    for o in range(octaves):
        c = max(2, cell >> o)
        g = size // c + 2
        grid = rng.uniform(-1.0, 1.0, size=(g, g)).astype(np.float32)
        pos = np.arange(size, dtype=np.float32) / c
        i0 = pos.astype(np.int64)
        frac = pos - i0
        # smooth interpolation weights
        t = frac * frac * (3.0 - 2.0 * frac)
        rows0, rows1 = grid[i0], grid[i0 + 1]
        top = rows0[:, i0] * (1 - t) + rows0[:, i0 + 1] * t
        bot = rows1[:, i0] * (1 - t) + rows1[:, i0 + 1] * t
        out += amp * (top * (1 - t[:, None]) + bot * t[:, None])
        amp *= 0.5
    return out / 1.5


def synth_artwork(seed: int, size: int) -> Tensor:
    """Deterministic procedural image in [0,1]: layered gradients, soft
    elliptical shapes, one value-noise texture patch, and one flat patch.

    For size >= 48 the flat patch is at least 36 px square, so a 32x32
    window with near-zero variance exists by construction.
    """
    if size % 8:
        raise ContractError(f"size must be a multiple of 8, got {size}")
    for attempt in range(8):
        rng = _derive_seeds(seed, 0xA57, attempt)
        img, flat_box = _compose_artwork(rng, size)
        y0, x0, side = flat_box
        core = img[:, y0:y0 + side, x0:x0 + side]
        if float(np.max(core.std(axis=(1, 2)))) < 0.02:
            return Tensor(img)
    raise DataError(f"could not synthesize a flat region for seed {seed}")  # pragma: no cover


def _compose_artwork(rng: np.random.Generator, size: int):
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float32),
                         np.arange(size, dtype=np.float32), indexing="ij")
    # background: two-color gradient along a random direction
    c0 = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
    c1 = rng.uniform(0.1, 0.9, size=3).astype(np.float32)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-6)
    img = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]
    img += 0.05 * _value_noise(rng, size, max(8, size // 4))[None]

    # soft elliptical color fields
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size / 8, size / 3, size=2)
        color = rng.uniform(0.05, 0.95, size=3).astype(np.float32)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        alpha = np.clip((1.0 - d) * 4.0, 0.0, 1.0) * rng.uniform(0.5, 0.95)
        img = img * (1 - alpha[None]) + color[:, None, None] * alpha[None]

    # one textured patch of fine value noise
    th = int(rng.integers(size // 3, 2 * size // 3 + 1))
    tw = int(rng.integers(size // 3, 2 * size // 3 + 1))
    ty = int(rng.integers(0, size - th + 1))
    tx = int(rng.integers(0, size - tw + 1))
    tint = rng.uniform(0.5, 1.0, size=3).astype(np.float32)
    tex = _value_noise(rng, size, int(rng.integers(3, 6)))[ty:ty + th, tx:tx + tw]
    amp = rng.uniform(0.10, 0.20)
    img[:, ty:ty + th, tx:tx + tw] += amp * tint[:, None, None] * tex[None]

    # one flat color field, painted last so nothing overdraws it
    side = max(36, size // 2 + 4) if size >= 48 else max(8, size // 2)
    side = min(side, size)
    fy = int(rng.integers(0, size - side + 1))
    fx = int(rng.integers(0, size - side + 1))
    flat_color = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
    img[:, fy:fy + side, fx:fx + side] = flat_color[:, None, None]

    return np.clip(img, 0.0, 1.0).astype(np.float32), (fy, fx, side)


# ---------------------------------------------------------------------------
# synthetic cloak oracle

def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def flatness_weight(original: np.ndarray, lo: float = 0.0005, hi: float = 0.005) -> np.ndarray:
    """1.0 over flat regions, easing to 0.3 where local 5x5 variance is high."""
    lum = original.mean(axis=0)
    padded = np.pad(lum, 2, mode="edge")
    win = sliding_window_view(padded, (5, 5))
    m = win.mean(axis=(2, 3))
    v = (win.astype(np.float64) ** 2).mean(axis=(2, 3)) - m.astype(np.float64) ** 2
    return (1.0 - 0.7 * _smoothstep((v - lo) / (hi - lo))).astype(np.float32)


def _bandpass_unit_noise(rng: np.random.Generator, h: int, w: int,
                         f_lo: float, f_hi: float) -> np.ndarray:
    """3-channel white noise band-limited via rfft2 masking, max-abs 1."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    radius = np.sqrt(fy ** 2 + fx ** 2)
    mask = ((radius >= f_lo) & (radius <= f_hi)).astype(np.float32)
    out = np.empty((3, h, w), dtype=np.float32)
    for c in range(3):
        noise = rng.standard_normal((h, w)).astype(np.float32)
        spec = rfft2(Tensor(noise))
        out[c] = irfft2(HalfSpectrum(h, w, spec.bins * mask)).data
    peak = float(np.max(np.abs(out)))
    if peak <= 0:
        raise DataError(f"band [{f_lo}, {f_hi}] selects no frequency bins for {h}x{w}")
    return out / peak


def synth_perturb(original: Tensor, seed: int, amplitude: float = DEFAULT_AMPLITUDE,
                  f_lo: float = DEFAULT_BAND[0], f_hi: float = DEFAULT_BAND[1]) -> Tensor:
    """Content-dependent ripple cloak: perturbed = clip(x + A*bandpass(noise)*w(x)).

    The flatness weight w couples the cloak to the image content, and the
    band-limited field gives it the regular ripple structure; the result
    never deviates from the original by more than ``amplitude``.
    """
    if not (0.0 < amplitude <= 0.25):
        raise ContractError(f"amplitude must be in (0, 0.25], got {amplitude}")
    if not (0.0 < f_lo < f_hi < 0.5):
        raise ContractError(f"need 0 < f_lo < f_hi < 0.5, got [{f_lo}, {f_hi}]")
    x = original.data
    if x.ndim != 3 or x.shape[0] != 3:
        raise ShapeError(f"synth_perturb expects (3,H,W), got {list(original.shape)}")
    rng = _derive_seeds(seed, 0xC10)
    noise = _bandpass_unit_noise(rng, x.shape[1], x.shape[2], f_lo, f_hi)
    cloak = amplitude * noise * flatness_weight(x)[None]
    return Tensor(np.clip(x + cloak, 0.0, 1.0))


# ---------------------------------------------------------------------------
# manifests

@dataclass
class Manifest:
    """Ordered (id, original_path, perturbed_path) rows anchored at a directory."""

    rows: list[tuple[str, str, str]]
    base_dir: Path

    @property
    def content_hash(self) -> str:
        payload = "".join(f"{i},{o},{p}\n" for i, o, p in self.rows)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def __len__(self) -> int:
        return len(self.rows)


def train_val_split(n: int) -> tuple[int, int]:
    """5:1 split, remainder to train."""
    val = n // 6
    return n - val, val


def build_dataset(out_dir: str | Path, n_pairs: int, size: int, seed: int,
                  amplitude: float = DEFAULT_AMPLITUDE,
                  f_lo: float = DEFAULT_BAND[0], f_hi: float = DEFAULT_BAND[1]) -> Manifest:
    """Write paired PNGs plus manifest.csv; partial output is removed on failure."""
    if n_pairs < 2:
        raise ContractError(f"need at least 2 pairs, got {n_pairs}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    created: list[Path] = []
    rows: list[tuple[str, str, str]] = []

    def make_pair(i: int) -> tuple[str, np.ndarray, np.ndarray]:
        art_seed, cloak_seed = np.random.SeedSequence([seed, i]).generate_state(2)
        art = synth_artwork(int(art_seed), size)
        pert = synth_perturb(art, int(cloak_seed), amplitude, f_lo, f_hi)
        return f"pair{i:04d}", art.data, pert.data

    try:
        for pair_id, art, pert in _ordered_map(make_pair, list(range(n_pairs))):
            orig_name = f"{pair_id}_orig.png"
            pert_name = f"{pair_id}_pert.png"
            created.append(save_image(art, out_dir / orig_name))
            created.append(save_image(pert, out_dir / pert_name))
            rows.append((pair_id, orig_name, pert_name))
        manifest_path = out_dir / "manifest.csv"
        with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(rows)
        created.append(manifest_path)
    except Exception:
        for p in created:
            p.unlink(missing_ok=True)
        raise
    return Manifest(rows, out_dir)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest") from None
        if header != MANIFEST_HEADER:
            raise DataError(f"{path}: bad header {header!r}, expected {MANIFEST_HEADER}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            rows.append((row[0], row[1], row[2]))
    ids = [r[0] for r in rows]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise DataError(f"{path}: duplicate ids {dup}")
    base = path.parent
    for pair_id, orig, pert in rows:
        for rel in (orig, pert):
            if not (base / rel).exists():
                raise DataError(f"{path}: row {pair_id!r} references missing file {rel}")
    return Manifest(rows, base)


def load_pair(manifest: Manifest, row: tuple[str, str, str]) -> SamplePair:
    pair_id, orig_rel, pert_rel = row
    original = normalize(load_image(manifest.base_dir / orig_rel))
    perturbed = normalize(load_image(manifest.base_dir / pert_rel))
    return SamplePair(pair_id, original, perturbed)


def iter_pairs(manifest: Manifest) -> Iterator[SamplePair]:
    for row in manifest.rows:
        yield load_pair(manifest, row)


def load_pairs(manifest: Manifest) -> list[SamplePair]:
    return _ordered_map(lambda row: load_pair(manifest, row), manifest.rows)
