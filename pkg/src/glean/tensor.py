"""Dense float32 tensors with taped reverse-mode gradients.

Implements exactly what the cloak-removal pipeline needs: elementwise
arithmetic, pointwise nonlinearities, strided 2-D convolution, a 2-D real
FFT (plus differentiable stacked-channel variants used inside spectral
blocks), reductions, and a gradient tape that replays recorded ops in
reverse execution order. Everything is float32 at the boundaries;
reductions accumulate in float64 internally.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class ContractError(ValueError):
    """Raised when a non-shape precondition is violated."""


class NonFiniteError(FloatingPointError):
    """Raised by explicit finiteness checks when NaN/Inf values appear."""


_TLS = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_TLS, "tape", None)


class Tensor:
    """Dense float32 array, row-major, optionally part of a taped graph."""

    __slots__ = ("data", "name", "_parents", "_backward")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data, dtype=np.float32)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], list] | None = None

    @classmethod
    def zeros(cls, shape: Sequence[int], name: str | None = None) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=np.float32), name)

    @classmethod
    def full(cls, shape: Sequence[int], value: float, name: str | None = None) -> "Tensor":
        return cls(np.full(tuple(shape), value, dtype=np.float32), name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.name)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={list(self.shape)})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def assert_finite(x: Tensor, label: str = "tensor") -> Tensor:
    """Explicit NaN/Inf check; silent ops never validate finiteness."""
    if not np.all(np.isfinite(x.data)):
        bad = int(np.size(x.data) - np.count_nonzero(np.isfinite(x.data)))
        raise NonFiniteError(f"{label}: {bad} non-finite value(s) in shape {list(x.shape)}")
    return x


class GradTape:
    """Ordered record of differentiable ops.

    Single-owner: one tape may be active per thread, and ops executed while
    it is active are appended in execution order (which is a topological
    order of the data flow). ``gradients`` replays the record backward,
    visiting each recorded op exactly once.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise ContractError("a GradTape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TLS.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
        return backward(loss, self, params)


def backward(loss: Tensor, tape: GradTape, params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. every tensor in ``params``.

    Parameters that do not influence the loss get zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {list(loss.shape)}")
    recorded = {id(n) for n in tape._nodes}
    param_ids = {id(t) for t in params.values()}
    if id(loss) not in recorded and id(loss) not in param_ids:
        raise ContractError("loss was not computed under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.data.shape, dtype=np.float32)}
    # Execution order is topological, so the full reversed pass sees every
    # consumer of a node before the node itself.
    for node in reversed(tape._nodes):
        g = grads.pop(id(node), None)
        if g is None or node._backward is None:
            continue
        for parent, contrib in node._backward(g):
            pid = id(parent)
            acc = grads.get(pid)
            grads[pid] = contrib if acc is None else acc + contrib

    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(id(p))
        if g is None:
            out[name] = Tensor.zeros(p.shape)
        else:
            out[name] = Tensor(np.asarray(g, dtype=np.float32).reshape(p.shape))
    return out


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        out._parents = parents
        out._backward = backward_fn
        tape._nodes.append(out)
    return out


def detach(x: Tensor) -> Tensor:
    """Same values, severed from any recorded graph."""
    return Tensor(x.data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def _bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return _emit(out, (a, b), _bw)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def _bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return _emit(out, (a, b), _bw)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def _bw(g):
        return [(a, _unbroadcast(g * bd, a.shape)), (b, _unbroadcast(g * ad, b.shape))]

    return _emit(out, (a, b), _bw)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    xd = x.data

    def _bw(g):
        return [(x, g * ((xd >= lo) & (xd <= hi)).astype(np.float32))]

    return _emit(out, (x,), _bw)


def tsum(x: Tensor) -> Tensor:
    out = np.float32(np.sum(x.data, dtype=np.float64))
    shape = x.shape

    def _bw(g):
        return [(x, np.broadcast_to(g.reshape(()), shape).astype(np.float32))]

    return _emit(np.asarray(out), (x,), _bw)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.float32(np.sum(x.data, dtype=np.float64) / n)
    shape = x.shape

    def _bw(g):
        return [(x, np.broadcast_to(g.reshape(()) / np.float32(n), shape).astype(np.float32))]

    return _emit(np.asarray(out), (x,), _bw)


def tmean_over(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    """Mean over the given axes (float64 accumulation, float32 result)."""
    axes = tuple(sorted(a % x.data.ndim for a in axes))
    count = int(np.prod([x.data.shape[a] for a in axes]))
    out = (np.sum(x.data, axis=axes, dtype=np.float64) / count).astype(np.float32)
    shape = x.shape

    def _bw(g):
        ge = np.expand_dims(g, axes)
        return [(x, (np.broadcast_to(ge, shape) / np.float32(count)).astype(np.float32))]

    return _emit(out, (x,), _bw)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    sgn = np.sign(x.data)

    def _bw(g):
        return [(x, g * sgn)]

    return _emit(out, (x,), _bw)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (axis 0 for 3-D, axis 1 for 4-D)."""
    if not parts:
        raise ShapeError("nothing to concatenate")
    axis = 0 if parts[0].data.ndim == 3 else 1
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def _bw(g):
        res, off = [], 0
        for p, c in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(off, off + c)
            res.append((p, g[tuple(sl)]))
            off += c
        return res

    return _emit(out, tuple(parts), _bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    axis = 0 if x.data.ndim == 3 else 1
    if not (0 <= start < stop <= x.data.shape[axis]):
        raise ShapeError(f"bad channel slice [{start}:{stop}] for shape {list(x.shape)}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    out = x.data[tuple(sl)]
    shape = x.data.shape

    def _bw(g):
        full = np.zeros(shape, dtype=np.float32)
        full[tuple(sl)] = g
        return [(x, full)]

    return _emit(out, (x,), _bw)


# ---------------------------------------------------------------------------
# pointwise nonlinearities

POINTWISE_OPS = ("linear", "relu", "leaky_relu", "tanh", "sigmoid")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    mask = (x.data > 0).astype(np.float32)

    def _bw(g):
        return [(x, g * mask)]

    return _emit(out, (x,), _bw)


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    slope = np.where(x.data > 0, np.float32(1.0), np.float32(alpha))
    out = x.data * slope

    def _bw(g):
        return [(x, g * slope)]

    return _emit(out, (x,), _bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    t = out

    def _bw(g):
        return [(x, g * (1.0 - t * t))]

    return _emit(out, (x,), _bw)


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data, dtype=np.float32))
    s = out

    def _bw(g):
        return [(x, g * s * (1.0 - s))]

    return _emit(out, (x,), _bw)


def pointwise(op: str, x: Tensor, alpha: float = 0.2) -> Tensor:
    """Apply one of the named elementwise ops; shape is preserved."""
    if op == "linear":
        return add(x, 0.0)
    if op == "relu":
        return relu(x)
    if op == "leaky_relu":
        return leaky_relu(x, alpha)
    if op == "tanh":
        return tanh(x)
    if op == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown pointwise op {op!r}, expected one of {POINTWISE_OPS}")


# ---------------------------------------------------------------------------
# convolution

def _pad_amount(n: int, k: int, stride: int) -> tuple[int, int, int]:
    n_out = -(-n // stride)
    total = max((n_out - 1) * stride + k - n, 0)
    return n_out, total // 2, total - total // 2


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: str = "same") -> Tensor:
    """Strided 2-D cross-correlation (no kernel flip).

    ``x`` is (C,H,W) or (N,C,H,W); ``k`` is (C_out,C_in,kh,kw) with odd
    kh/kw; ``padding`` is ``same`` (zero-pad so H' = ceil(H/stride)) or
    ``valid``. Accumulation runs in float32 GEMM; output is float32.
    """
    squeezed = x.data.ndim == 3
    xd = x.data[None] if squeezed else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got {list(x.shape)}")
    if k.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be 4-D, got {list(k.shape)}")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = k.data.shape
    if kc != c_in:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel sides must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    if padding not in ("same", "valid"):
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    if bias is not None and bias.data.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {list(bias.shape)}")

    if padding == "same":
        h_out, pt, pb = _pad_amount(h, kh, stride)
        w_out, pl, pr = _pad_amount(w, kw, stride)
        xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    else:
        if h < kh or w < kw:
            raise ShapeError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
        h_out, w_out = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pl = 0
        xp = xd

    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :h_out, :w_out]
    # (N, H', W', C*kh*kw) patch matrix; the copy feeds one GEMM per batch
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n, h_out * w_out, c_in * kh * kw)
    w2 = k.data.reshape(c_out, -1)
    out = col @ w2.T
    if bias is not None:
        out += bias.data
    out = out.transpose(0, 2, 1).reshape(n, c_out, h_out, w_out)
    out_data = out[0] if squeezed else out

    xp_shape = xp.shape
    parents = (x, k) if bias is None else (x, k, bias)

    def _bw(g):
        g4 = g[None] if squeezed else g
        g2 = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n, h_out * w_out, c_out)
        grad_w = np.einsum("npo,npk->ok", g2, col, optimize=True).reshape(k.data.shape)
        grad_col = (g2 @ w2).reshape(n, h_out, w_out, c_in, kh, kw)
        grad_xp = np.zeros(xp_shape, dtype=np.float32)
        for i in range(kh):
            hi = i + stride * (h_out - 1) + 1
            for j in range(kw):
                wj = j + stride * (w_out - 1) + 1
                grad_xp[:, :, i:hi:stride, j:wj:stride] += \
                    grad_col[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, pt:pt + h, pl:pl + w]
        if squeezed:
            grad_x = grad_x[0]
        res = [(x, grad_x), (k, grad_w)]
        if bias is not None:
            res.append((bias, g4.sum(axis=(0, 2, 3))))
        return res

    return _emit(out_data, parents, _bw)


# ---------------------------------------------------------------------------
# 2-D real FFT

@dataclass
class HalfSpectrum:
    """Non-negative-frequency half plane of an H x W real image's DFT."""

    height: int
    width_full: int
    bins: np.ndarray  # complex64, shape (height, width_full//2 + 1)

    def __post_init__(self):
        expected = (self.height, self.width_full // 2 + 1)
        self.bins = np.asarray(self.bins, dtype=np.complex64)
        if self.bins.shape != expected:
            raise ShapeError(
                f"half spectrum for {self.height}x{self.width_full} needs "
                f"{expected} bins, got {self.bins.shape}")


def rfft2(x: Tensor) -> HalfSpectrum:
    """Unnormalized DFT of a real H x W tensor, width-axis half plane only."""
    if x.data.ndim != 2:
        raise ShapeError(f"rfft2 expects a 2-D tensor, got {list(x.shape)}")
    h, w = x.data.shape
    if h < 2 or w < 2:
        raise ShapeError(f"rfft2 needs at least 2x2 input, got {h}x{w}")
    if w % 2 != 0:
        raise ShapeError(f"rfft2 requires even width, got {w}")
    return HalfSpectrum(h, w, np.fft.rfft2(x.data))


def _mirror_rows(a: np.ndarray) -> np.ndarray:
    # row r -> row (H - r) mod H
    return np.roll(a[..., ::-1, :], 1, axis=-2)


def _mirror_full(half: np.ndarray, width_full: int) -> np.ndarray:
    """Extend half-plane bins to the full plane by conjugate symmetry."""
    h = half.shape[-2]
    out = np.empty(half.shape[:-1] + (width_full,), dtype=np.complex64)
    out[..., :half.shape[-1]] = half
    interior = half[..., 1:width_full // 2]
    out[..., width_full // 2 + 1:] = np.conj(_mirror_rows(interior))[..., ::-1]
    return out


def irfft2(s: HalfSpectrum) -> Tensor:
    """Inverse of ``rfft2`` with 1/(H*W) normalization."""
    full = _mirror_full(s.bins, s.width_full)
    return Tensor(np.fft.ifft2(full).real.astype(np.float32))


def rfft2_stack(x: Tensor) -> Tensor:
    """Differentiable per-channel rfft2 with real/imag parts stacked as channels.

    (N,C,H,W) -> (N,2C,H,W/2+1): first C channels real parts, last C imaginary.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"rfft2_stack expects (N,C,H,W), got {list(x.shape)}")
    n, c, h, w = x.data.shape
    if w % 2 != 0:
        raise ShapeError(f"rfft2_stack requires even width, got {w}")
    spec = np.fft.rfft2(x.data, axes=(-2, -1))
    out = np.concatenate([spec.real, spec.imag], axis=1).astype(np.float32)

    def _bw(g):
        gc = (g[:, :c] + 1j * g[:, c:]).astype(np.complex64)
        z = np.zeros((n, c, h, w), dtype=np.complex64)
        z[..., :w // 2 + 1] = gc
        # adjoint of the half-plane DFT: unnormalized inverse transform
        grad = (np.fft.ifft2(z, axes=(-2, -1)).real * (h * w)).astype(np.float32)
        return [(x, grad)]

    return _emit(out, (x,), _bw)


def irfft2_stack(y: Tensor, width_full: int) -> Tensor:
    """Differentiable inverse of ``rfft2_stack``.

    (N,2C,H,W/2+1) -> (N,C,H,W); uses all real/imag inputs via explicit
    conjugate-symmetric extension, so gradients flow to every channel.
    """
    if y.data.ndim != 4:
        raise ShapeError(f"irfft2_stack expects (N,2C,H,Wh), got {list(y.shape)}")
    n, c2, h, wh = y.data.shape
    if c2 % 2 != 0:
        raise ShapeError(f"irfft2_stack needs an even channel count, got {c2}")
    if wh != width_full // 2 + 1 or width_full % 2 != 0:
        raise ShapeError(
            f"{wh} bins do not match even full width {width_full}")
    c = c2 // 2
    spec = (y.data[:, :c] + 1j * y.data[:, c:]).astype(np.complex64)
    full = _mirror_full(spec, width_full)
    out = np.fft.ifft2(full, axes=(-2, -1)).real.astype(np.float32)

    def _bw(g):
        gz = np.fft.fft2(g.astype(np.float32), axes=(-2, -1)) / (h * width_full)
        gs = gz[..., :wh].copy()
        # interior columns also fed the mirrored half: add the conjugate pull
        gs[..., 1:width_full // 2] += np.conj(
            _mirror_rows(gz)[..., -1:width_full // 2:-1])
        grad = np.concatenate([gs.real, gs.imag], axis=1).astype(np.float32)
        return [(y, grad)]

    return _emit(out, (y,), _bw)
