"""Shared brute-force oracles and gradient-check helpers.

The oracles here are deliberately slow and definition-level (explicit
loops over bins / taps) so they stay independent of the library's
vectorized implementations.
"""
import numpy as np
import pytest

from glean.tensor import GradTape, Tensor, backward


def naive_dft2_half(x: np.ndarray) -> np.ndarray:
    """Definition-level 2-D DFT restricted to the width half plane.

    Loops over every output bin; the inner sum is the literal
    sum_n x[n] * exp(-2*pi*i*(ky*ny/H + kx*nx/W)).
    """
    h, w = x.shape
    ny = np.arange(h)[:, None]
    nx = np.arange(w)[None, :]
    out = np.zeros((h, w // 2 + 1), dtype=np.complex128)
    for ky in range(h):
        for kx in range(w // 2 + 1):
            phase = -2j * np.pi * (ky * ny / h + kx * nx / w)
            out[ky, kx] = np.sum(x.astype(np.float64) * np.exp(phase))
    return out


def naive_conv2d(x: np.ndarray, k: np.ndarray, bias: np.ndarray | None,
                 stride: int, padding: str) -> np.ndarray:
    """Six nested loops over (out-channel, y, x, in-channel, tap-y, tap-x)."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    if padding == "same":
        h_out = -(-h // stride)
        w_out = -(-w // stride)
        pad_h = max((h_out - 1) * stride + kh - h, 0)
        pad_w = max((w_out - 1) * stride + kw - w, 0)
        pt, pl = pad_h // 2, pad_w // 2
        xp = np.zeros((c_in, h + pad_h, w + pad_w))
        xp[:, pt:pt + h, pl:pl + w] = x
    else:
        h_out = (h - kh) // stride + 1
        w_out = (w - kw) // stride + 1
        xp = x.astype(np.float64)
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for p in range(h_out):
            for q in range(w_out):
                acc = 0.0
                for c in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[c, p * stride + i, q * stride + j] * k[o, c, i, j]
                out[o, p, q] = acc + (bias[o] if bias is not None else 0.0)
    return out


def finite_diff(loss_fn, params: dict[str, Tensor], eps: float = 1e-3) -> dict[str, np.ndarray]:
    """Central finite differences of a scalar loss over every coordinate."""
    grads = {}
    for name, p in params.items():
        g = np.zeros(p.data.size, dtype=np.float64)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_fn().data)
            flat[i] = orig - eps
            lm = float(loss_fn().data)
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * eps)
        grads[name] = g.reshape(p.data.shape)
    return grads


def check_grads(loss_fn, params: dict[str, Tensor], rtol: float = 1e-3,
                eps: float = 1e-3) -> None:
    """Analytic (taped) gradients must match central differences coordinatewise.

    Error is measured relative to the gradient's own scale (its max
    magnitude); float32 forwards give the difference quotient an absolute
    noise floor of roughly ulp(loss)/(2*eps), so a purely per-coordinate
    relative bound would be unmeetable at near-zero coordinates.
    """
    with GradTape() as tape:
        loss = loss_fn()
    analytic = backward(loss, tape, params)
    numeric = finite_diff(loss_fn, params, eps=eps)
    for name in params:
        a = analytic[name].data.astype(np.float64)
        n = numeric[name]
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)), 1e-8)
        rel = np.max(np.abs(a - n)) / scale
        assert rel < rtol, (
            f"gradient mismatch for {name}: rel err {rel:.3e} (scale {scale:.4f})")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
