"""Differentiable operators on rank-4 feature maps."""

from __future__ import annotations

from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from wisernet.autodiff.tensor import Tensor, _record_macs
from wisernet.exceptions import ConfigurationError, UsageError


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: input of shape ``(B, C, H, W)``.
        weight: kernel of shape ``(O, C, kh, kw)``.
        bias: optional vector of length ``O``.
        stride: step between kernel applications, at least 1.
        pad: zero rows/columns added on every side.

    Returns:
        Tensor of shape ``(B, O, (H + 2*pad - kh)//stride + 1, ...)``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ConfigurationError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if Ci != C:
        raise ConfigurationError(f"kernel expects {Ci} input channels but input has {C}")
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise ConfigurationError(f"kernel {kh}x{kw} does not fit padded input {Hp}x{Wp}")
    if bias is not None and bias.shape != (O,):
        raise ConfigurationError(f"bias shape {bias.shape} does not match {O} output channels")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    _record_macs(B * O * Ho * Wo * kh * kw * C)

    w2 = weight.data.reshape(O, C * kh * kw)
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    out = cols @ w2.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ w2
            if kh == 1 and kw == 1 and stride == 1 and pad == 0:
                gx = np.ascontiguousarray(gcols.reshape(B, H, W, C).transpose(0, 3, 1, 2))
            else:
                gcols = gcols.reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
                gxp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
                gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize every ``(sample, channel)`` plane to zero mean, unit variance.

    A single-pixel plane has zero variance and maps to 0, like any constant plane.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"instance_norm expects rank-4 input, got {x.shape}")
    n = x.shape[2] * x.shape[3]
    a = x.data
    mu = a.mean(axis=(2, 3), keepdims=True)
    centered = a - mu
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        g_sum = g.sum(axis=(2, 3), keepdims=True)
        gx_sum = (g * xhat).sum(axis=(2, 3), keepdims=True)
        return (inv_std * (g - g_sum / n - xhat * gx_sum / n),)

    return Tensor._make(xhat.astype(a.dtype, copy=False), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: ``(B, C, H, W) -> (B, C)``."""
    if x.ndim != 4:
        raise ConfigurationError(f"global_avg_pool expects rank-4 input, got {x.shape}")
    return x.mean(axis=(2, 3))


def relu(x: Tensor) -> Tensor:
    a = x.data
    pos = a > 0
    return Tensor._make(np.where(pos, a, 0).astype(a.dtype, copy=False), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    a = x.data
    e = np.exp(-np.abs(a))
    out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise UsageError(f"unknown activation {kind!r}; expected 'relu' or 'sigmoid'")


@lru_cache(maxsize=64)
def _bilinear_matrix(n: int, factor: int, dtype_name: str) -> np.ndarray:
    # align_corners=False: output pixel i samples source coordinate (i + 0.5)/f - 0.5
    m = np.zeros((n * factor, n), dtype=np.float64)
    for i in range(n * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    m.setflags(write=False)
    return m.astype(dtype_name)


def upsample(x: Tensor, factor: int, mode: str = "bilinear") -> Tensor:
    """Enlarge the spatial axes by an integer factor."""
    if factor < 1:
        raise UsageError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    B, C, H, W = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

        def backward(g):
            return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

        return Tensor._make(out, (x,), backward)
    if mode != "bilinear":
        raise UsageError(f"unknown upsample mode {mode!r}")
    uh = _bilinear_matrix(H, factor, x.dtype.name)
    uw = _bilinear_matrix(W, factor, x.dtype.name)
    out = uh @ x.data @ uw.T

    def backward(g):
        return (uh.T @ g @ uw,)

    return Tensor._make(out, (x,), backward)


def pad_replicate(x: Tensor, bottom: int, right: int) -> Tensor:
    """Repeat the last row ``bottom`` times and the last column ``right`` times."""
    if bottom == 0 and right == 0:
        return x
    H, W = x.shape[2], x.shape[3]
    out = np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right)), mode="edge")

    def backward(g):
        gx = g[:, :, :H, :W].copy()
        if bottom:
            gx[:, :, H - 1, :] += g[:, :, H:, :W].sum(axis=2)
        if right:
            gx[:, :, :, W - 1] += g[:, :, :H, W:].sum(axis=3)
        if bottom and right:
            gx[:, :, H - 1, W - 1] += g[:, :, H:, W:].sum(axis=(2, 3))
        return (gx,)

    return Tensor._make(out, (x,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``x / (||x||_2 + eps)`` along ``axis``; the gradient at ``x = 0`` is finite."""
    a = x.data
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = a / denom

    def backward(g):
        # d/dx [x / (|x| + eps)] = g/denom - x (x.g) / (|x| denom^2)
        dot = (a * g).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / denom - a * dot / (safe * denom * denom),)

    return Tensor._make(out, (x,), backward)
