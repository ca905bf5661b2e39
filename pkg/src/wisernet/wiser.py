"""Wavelet skip-connection filter.

A WISER block takes one encoder feature map ``s`` and returns a filtered
map of the same shape:

1. Haar-decompose ``s`` into LL, LH, HL, HH.
2. Split LL into a style map ``f_s = phi_s(LL)`` and a content map
   ``f_c = phi_c(IN(LL))``; the filtered low band is ``IN(LL) + f_c``.
3. Scale LH and HL by two factors: an edge booster derived from the
   thresholded, min-max normalized edge energy, and an edge selector
   ``1 + eps_gate * (2 * sigmoid(pw_conv(f_c)) - 1)`` predicted from the
   content map.
4. Drop HH, invert the transform and add ``alpha * s`` back.

The squared cosine between the standardized pooled content and style
vectors is returned as the decorrelation penalty.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from wisernet.autodiff import functional as F
from wisernet.autodiff.nn import Conv2d, ConvReLUStack, Module
from wisernet.autodiff.tensor import Tensor, where
from wisernet.exceptions import ConfigurationError
from wisernet.wavelet import SubBands, dwt_haar, idwt_haar

# A pixel equal to tau up to float round-off counts as above threshold, so a
# constant plane (sigma = 0, tau = mu) is kept whole.
_TAU_TOL = 1e-7


class WiserParams(Module):
    """Learnable weights and fixed scalars of one WISER block.

    Args:
        channels: channel count of the feature map being filtered.
        rng: generator for the He-normal conv initialization.
        alpha: weight of the unfiltered residual.
        beta: threshold multiplier, ``tau = mean + beta * std``.
        eps_gate: largest deviation of the selector from 1, in ``[0, 1)``.
        kappa: gain of the above-threshold boost ``1 + kappa * e``.
        a0: factor applied to edges below threshold, in ``[0, 1]``.
        zero_init_content: start ``phi_c`` at zero (used in tests).
    """

    def __init__(
        self,
        channels: int,
        rng: Optional[np.random.Generator] = None,
        alpha: float = 0.5,
        beta: float = 0.5,
        eps_gate: float = 0.25,
        kappa: float = 1.0,
        a0: float = 0.25,
        zero_init_content: bool = False,
    ):
        if not 0.0 <= eps_gate < 1.0:
            raise ConfigurationError(f"eps_gate must lie in [0, 1), got {eps_gate}")
        if not 0.0 <= a0 <= 1.0:
            raise ConfigurationError(f"a0 must lie in [0, 1], got {a0}")
        if kappa < 0 or alpha < 0:
            raise ConfigurationError("kappa and alpha must be non-negative")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.phi_s = ConvReLUStack(channels, channels, rng)
        self.phi_c = ConvReLUStack(channels, channels, None if zero_init_content else rng)
        self.gate_conv = Conv2d(channels, 1, kernel_size=1, zero_init=True)
        self.channels = channels
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.eps_gate = float(eps_gate)
        self.kappa = float(kappa)
        self.a0 = float(a0)

    def forward(self, s: Tensor) -> "WiserOutput":
        return wiser_forward(s, self)


@dataclass
class WiserOutput:
    s_tilde: Tensor
    f_c: Tensor
    f_s: Tensor
    ortho_term: Tensor
    extras: Dict[str, object] = field(default_factory=dict)


def ll_decouple(ll: Tensor, p: WiserParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Return ``(f_s, f_c, ll_filtered)`` for a low-pass band."""
    if ll.shape[1] != p.channels:
        raise ConfigurationError(f"LL has {ll.shape[1]} channels, WISER block expects {p.channels}")
    normed = F.instance_norm(ll)
    f_s = p.phi_s(ll)
    f_c = p.phi_c(normed)
    return f_s, f_c, normed + f_c


def ortho_loss(f_c: Tensor, f_s: Tensor, eps: float = 1e-8) -> Tensor:
    """Batch mean of the squared cosine between centered pooled vectors."""
    if f_c.shape != f_s.shape:
        raise ConfigurationError(f"content {f_c.shape} and style {f_s.shape} shapes differ")
    vc = F.global_avg_pool(f_c)
    vs = F.global_avg_pool(f_s)
    hc = F.l2_normalize(vc - vc.mean(axis=1, keepdims=True), axis=1, eps=eps)
    hs = F.l2_normalize(vs - vs.mean(axis=1, keepdims=True), axis=1, eps=eps)
    inner = (hc * hs).sum(axis=1)
    return (inner * inner).mean()


def edge_energy(lh: Tensor, hl: Tensor, eps: float = 1e-8) -> Tensor:
    """Channel-mean of ``|LH| + |HL|``, min-max rescaled per sample to [0, 1]."""
    if lh.shape != hl.shape:
        raise ConfigurationError(f"LH {lh.shape} and HL {hl.shape} shapes differ")
    energy = (lh.abs() + hl.abs()).mean(axis=1, keepdims=True)
    lo = energy.amin(axis=(1, 2, 3), keepdims=True)
    hi = energy.amax(axis=(1, 2, 3), keepdims=True)
    return (energy - lo) / (hi - lo + eps)


def edge_threshold(e_norm: np.ndarray, beta: float) -> np.ndarray:
    """Per-sample ``mean + beta * std`` over the spatial plane."""
    mu = e_norm.mean(axis=(1, 2, 3), keepdims=True)
    sd = e_norm.std(axis=(1, 2, 3), keepdims=True)
    return mu + beta * sd


def edge_boost(e_norm: Tensor, p: WiserParams) -> Tensor:
    """Effective edge map: ``1 + kappa * e`` at or above tau, ``a0`` below."""
    tau = edge_threshold(e_norm.data, p.beta)
    keep = e_norm.data >= tau - _TAU_TOL
    return where(keep, e_norm * p.kappa + 1.0, p.a0)


def edge_select(f_c: Tensor, p: WiserParams) -> Tensor:
    """Content-driven gate centred on 1, within ``[1 - eps_gate, 1 + eps_gate]``."""
    g = F.sigmoid(p.gate_conv(f_c))
    return g * (2.0 * p.eps_gate) + (1.0 - p.eps_gate)


def refine_high_bands(lh: Tensor, hl: Tensor, e_s: Tensor, e_eff: Tensor) -> Tuple[Tensor, Tensor]:
    factor = e_s * e_eff
    return lh * factor, hl * factor


def wiser_forward(s: Tensor, p: WiserParams) -> WiserOutput:
    if min(s.shape[2:]) < 2:
        raise ConfigurationError(f"WISER needs spatial size >= 2, got {s.shape[2:]}")
    bands = dwt_haar(s)
    f_s, f_c, ll_f = ll_decouple(bands.ll, p)
    e_norm = edge_energy(bands.lh, bands.hl)
    e_eff = edge_boost(e_norm, p)
    e_s = edge_select(f_c, p)
    lh_f, hl_f = refine_high_bands(bands.lh, bands.hl, e_s, e_eff)
    s_prime = idwt_haar(SubBands(ll_f, lh_f, hl_f, None, size=bands.size))
    s_tilde = s * p.alpha + s_prime
    extras = {"bands": bands, "e_norm": e_norm, "e_eff": e_eff, "e_s": e_s, "s_prime": s_prime}
    return WiserOutput(s_tilde, f_c, f_s, ortho_loss(f_c, f_s), extras)
