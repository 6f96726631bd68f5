"""The multiplication-devoid (md) operator and its kernels.

    x (+) y = sgn(x*y) * (|x| + |y|) = sgn(x)*y + sgn(y)*x

The reference kernels (``md_scalar``, ``md_dot``, ``md_conv1d``, ``md_dot_q8``)
evaluate the definition literally: signs are applied by conditional negation
and the accumulation only adds. The batched kernels (``md_linear`` and
friends) use the exact identity

    W (+) X = X @ sgn(W).T + sgn(X) @ W.T

so that training can run on BLAS; the product by a sign matrix is a
conditional negation, the result is the same up to summation order.

Training uses the sign function in the forward pass but its tanh-smoothed
derivative in the backward pass::

    d(w (+) x)/dw ~= sgn(x) + x * a * sech^2(a*w)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

DEFAULT_SHARPNESS = 10.0


@dataclass(frozen=True)
class MdBackwardConfig:
    a: float = DEFAULT_SHARPNESS

    def __post_init__(self):
        if not self.a > 0:
            raise ParameterError(f"sharpness a must be > 0, got {self.a}")


def _cfg(cfg) -> MdBackwardConfig:
    if cfg is None:
        return MdBackwardConfig()
    if isinstance(cfg, MdBackwardConfig):
        return cfg
    return MdBackwardConfig(float(cfg))


def sech2(z):
    """sech^2 via 1 - tanh^2, clamped to [0, 1]."""
    t = np.tanh(z)
    return np.clip(1.0 - t * t, 0.0, 1.0)


# -- reference kernels ---------------------------------------------------------


def md_scalar(x: float, y: float) -> float:
    if x == 0 or y == 0:
        return 0.0
    magnitude = abs(x) + abs(y)
    return -magnitude if (x < 0) != (y < 0) else magnitude


def _md_terms(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    magnitude = np.abs(x) + np.abs(w)
    negative = (x < 0) ^ (w < 0)
    signed = np.where(negative, -magnitude, magnitude)
    return np.where((x == 0) | (w == 0), 0.0, signed)


def md_dot(w, x) -> float:
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != x.shape or w.ndim != 1:
        raise ShapeError(f"md_dot needs equal-length vectors, got {w.shape} and {x.shape}")
    return float(_md_terms(w, x).sum())


def md_conv1d(signal, kernels, stride: int = 1) -> np.ndarray:
    """Valid 1-D md convolution of a (T, C) signal with (K, L, C) kernels."""
    signal = np.asarray(signal, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if signal.ndim != 2 or kernels.ndim != 3:
        raise ShapeError("signal must be (T, C) and kernels (K, L, C)")
    T, C = signal.shape
    K, L, Ck = kernels.shape
    if Ck != C:
        raise ShapeError(f"channel mismatch: signal has {C}, kernels {Ck}")
    if L > T:
        raise ShapeError(f"kernel length {L} exceeds signal length {T}")
    if stride < 1:
        raise ParameterError("stride must be positive")
    windows = np.lib.stride_tricks.sliding_window_view(signal, L, axis=0)[::stride]
    # sliding_window_view puts the window axis last: (T', C, L) -> (T', L*C)
    windows = windows.transpose(0, 2, 1).reshape(windows.shape[0], L * C)
    flat = kernels.reshape(K, L * C)
    return _md_terms(flat[None, :, :], windows[:, None, :]).sum(axis=-1)


# -- 8-bit path ----------------------------------------------------------------


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def _to_codes(scaled, original, keep_sign: bool) -> np.ndarray:
    q = round_half_away(scaled)
    if keep_sign:
        # a nonzero value never rounds to 0: sgn(w) alone carries an |x|-sized
        # term of the md product, so losing it costs far more than the rounding
        q = np.where((q == 0) & (original != 0), np.sign(original), q)
    return np.clip(q, -127, 127).astype(np.int8)


def quantize_symmetric(v, keep_sign: bool = True) -> tuple[np.ndarray, float]:
    """Per-tensor symmetric int8 quantization: scale = max|v| / 127.

    Rounds half away from zero. With ``keep_sign`` (default) nonzero values
    that would round to 0 map to +-1 instead, so sgn is preserved exactly.
    """
    v = np.asarray(v, dtype=np.float64)
    peak = float(np.max(np.abs(v))) if v.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    return _to_codes(v / scale, v, keep_sign), scale


def quantize_rows(v, keep_sign: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric int8 quantization with one scale per leading-axis row."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(v.shape[0], -1)
    peak = np.max(np.abs(flat), axis=1)
    scales = np.where(peak > 0, peak / 127.0, 1.0)
    return _to_codes(flat / scales[:, None], flat, keep_sign).reshape(v.shape), scales


def md_dot_q8(w, x, scale_w: float, scale_x: float) -> float:
    """md dot product of two int8 vectors on their dequantization grid.

    Two integer accumulators collect the signed |x| and |w| codes with
    additions only; the scales are applied once at the end.
    """
    w = np.asarray(w)
    x = np.asarray(x)
    if w.shape != x.shape or w.ndim != 1:
        raise ShapeError(f"md_dot_q8 needs equal-length vectors, got {w.shape} and {x.shape}")
    if not (scale_w > 0 and scale_x > 0):
        raise ParameterError("scales must be positive")
    w = w.astype(np.int64)
    x = x.astype(np.int64)
    live = (w != 0) & (x != 0)
    negative = (w < 0) ^ (x < 0)
    ax = np.where(negative, -np.abs(x), np.abs(x))
    aw = np.where(negative, -np.abs(w), np.abs(w))
    acc_x = int(ax[live].sum())
    acc_w = int(aw[live].sum())
    return scale_x * acc_x + scale_w * acc_w


# -- smoothed surrogate and backward kernels -----------------------------------


def md_smoothed(w, x, cfg=None):
    """tanh(a*w)*x + tanh(a*x)*w; tends to w (+) x as a grows."""
    a = _cfg(cfg).a
    return np.tanh(a * w) * x + np.tanh(a * x) * w


def md_surrogate(w, x, cfg=None, smooth: str = "both"):
    """md product with selected sign functions replaced by tanh(a*.).

    ``smooth="w"`` smooths only sgn(w), ``"x"`` only sgn(x). The backward
    kernels are the exact partial derivatives of these one-sided forms:
    d/dw of the ``"w"`` form and d/dx of the ``"x"`` form.
    """
    a = _cfg(cfg).a
    sw = np.tanh(a * w) if smooth in ("w", "both") else np.sign(w)
    sx = np.tanh(a * x) if smooth in ("x", "both") else np.sign(x)
    return sw * x + sx * w


def md_grad(w: float, x: float, cfg=None) -> tuple[float, float]:
    a = _cfg(cfg).a
    d_w = np.sign(x) + x * a * sech2(a * w)
    d_x = np.sign(w) + w * a * sech2(a * x)
    return float(d_w), float(d_x)


def md_dot_backward(w, x, upstream: float, cfg=None):
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"length mismatch {w.shape} vs {x.shape}")
    a = _cfg(cfg).a
    grad_w = upstream * (np.sign(x) + x * a * sech2(a * w))
    grad_x = upstream * (np.sign(w) + w * a * sech2(a * x))
    return grad_w, grad_x


# -- batched kernels used by the layers ----------------------------------------


def md_linear(x: np.ndarray, w: np.ndarray, smooth: str | None = None, a: float = DEFAULT_SHARPNESS):
    """Row-wise md products: out[m, k] = W[k] (+) X[m] for X (M, N), W (K, N).

    ``smooth`` selects a surrogate forward (None/"exact", "w", "x", "both"),
    used by the finite-difference harness only.
    """
    if smooth in (None, "exact"):
        sw, sx = np.sign(w), np.sign(x)
    else:
        sw = np.tanh(a * w) if smooth in ("w", "both") else np.sign(w)
        sx = np.tanh(a * x) if smooth in ("x", "both") else np.sign(x)
    return x @ sw.T + sx @ w.T


def md_linear_backward(x, w, grad_out, a: float = DEFAULT_SHARPNESS):
    """Approximate gradients of ``md_linear`` w.r.t. X and W."""
    grad_x = grad_out @ np.sign(w) + (grad_out @ w) * (a * sech2(a * x))
    grad_w = grad_out.T @ np.sign(x) + (grad_out.T @ x) * (a * sech2(a * w))
    return grad_x, grad_w


def md_linear_q8(xq, x_scales, wq, w_scale: float) -> np.ndarray:
    """Quantized ``md_linear``: int8 rows of X (one scale per row), int8 W.

    Integer codes are at most 127 in magnitude, so float64 accumulation of
    the sign-selected codes is exact for any realistic fan-in.
    """
    xq = xq.astype(np.float64)
    wq = wq.astype(np.float64)
    acc_x = xq @ np.sign(wq).T
    acc_w = np.sign(xq) @ wq.T
    return np.asarray(x_scales)[:, None] * acc_x + w_scale * acc_w
