"""Single-level depthwise Haar transform and its inverse.

The orthonormal convention is used: for every non-overlapping 2x2 block
``[[a, b], [c, d]]`` of every channel::

    LL = (a + b + c + d) / 2      LH = (a + b - c - d) / 2
    HL = (a - b + c - d) / 2      HH = (a - b - c + d) / 2

The analysis matrix is symmetric and its own inverse, so the synthesis uses
the same coefficients and the transform preserves the squared norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from wisernet.autodiff.functional import pad_replicate
from wisernet.autodiff.tensor import Tensor
from wisernet.exceptions import ConfigurationError


@dataclass
class SubBands:
    """The four half-resolution sub-bands of a feature map.

    ``size`` is the spatial size of the map that was decomposed; it differs
    from twice the band size only when an odd input was padded.
    """

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Optional[Tensor]
    size: Optional[Tuple[int, int]] = None

    def __iter__(self):
        return iter((self.ll, self.lh, self.hl, self.hh))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.ll.shape


def _analysis(x: np.ndarray):
    a = x[:, :, 0::2, 0::2]
    b = x[:, :, 0::2, 1::2]
    c = x[:, :, 1::2, 0::2]
    d = x[:, :, 1::2, 1::2]
    s_ab, d_ab = a + b, a - b
    s_cd, d_cd = c + d, c - d
    return (
        (s_ab + s_cd) * 0.5,
        (s_ab - s_cd) * 0.5,
        (d_ab + d_cd) * 0.5,
        (d_ab - d_cd) * 0.5,
    )


def _synthesis(ll: np.ndarray, lh: np.ndarray, hl: np.ndarray, hh: np.ndarray) -> np.ndarray:
    B, C, h, w = ll.shape
    out = np.empty((B, C, 2 * h, 2 * w), dtype=np.result_type(ll, lh, hl, hh))
    s_top, s_bot = ll + lh, ll - lh
    d_top, d_bot = hl + hh, hl - hh
    out[:, :, 0::2, 0::2] = (s_top + d_top) * 0.5
    out[:, :, 0::2, 1::2] = (s_top - d_top) * 0.5
    out[:, :, 1::2, 0::2] = (s_bot + d_bot) * 0.5
    out[:, :, 1::2, 1::2] = (s_bot - d_bot) * 0.5
    return out


def dwt_haar(x: Tensor) -> SubBands:
    """Decompose ``x`` channel by channel into (LL, LH, HL, HH).

    Odd heights or widths are first extended by repeating the last row or
    column; :func:`idwt_haar` crops the reconstruction back.
    """
    if x.ndim != 4:
        raise ConfigurationError(f"dwt_haar expects a rank-4 tensor, got shape {x.shape}")
    H, W = x.shape[2], x.shape[3]
    xp = pad_replicate(x, H % 2, W % 2)
    bands = _analysis(xp.data)
    zero = np.zeros_like(bands[0])
    out = []
    for k, band in enumerate(bands):

        def backward(g, k=k):
            parts = [zero] * 4
            parts[k] = g
            return (_synthesis(*parts),)

        out.append(Tensor._make(np.ascontiguousarray(band), (xp,), backward))
    return SubBands(*out, size=(H, W))


def idwt_haar(bands, size: Optional[Tuple[int, int]] = None) -> Tensor:
    """Exact inverse of :func:`dwt_haar`.

    ``bands`` is a :class:`SubBands` or a 4-tuple; an ``hh`` of ``None``
    stands for an all-zero band. ``size`` overrides the crop target.
    """
    if isinstance(bands, SubBands):
        size = size if size is not None else bands.size
    ll, lh, hl, hh = bands
    shape = ll.shape
    for name, band in (("lh", lh), ("hl", hl), ("hh", hh)):
        if band is not None and band.shape != shape:
            raise ConfigurationError(f"band {name} has shape {band.shape}, expected {shape}")
    parents = (ll, lh, hl) if hh is None else (ll, lh, hl, hh)
    hh_data = np.zeros_like(ll.data) if hh is None else hh.data
    out = _synthesis(ll.data, lh.data, hl.data, hh_data)

    def backward(g):
        return _analysis(g)[: len(parents)]

    rec = Tensor._make(out, parents, backward)
    if size is not None and tuple(size) != rec.shape[2:]:
        H, W = size
        if H > rec.shape[2] or W > rec.shape[3]:
            raise ConfigurationError(f"cannot crop {rec.shape[2:]} reconstruction to {size}")
        rec = rec[:, :, :H, :W]
    return rec
