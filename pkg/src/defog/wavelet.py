"""Single-level 2D Haar analysis and synthesis with fixed +/-1 filters.

The four analysis filters are kept unnormalized exactly as defined; the 1/4
compensation lives in the synthesis step, so idwt2(dwt2(x)) == x.  Both
directions are linear, differentiable, and applied per channel with no
mixing.  Filter taps are indexed so that analysis is a stride-2 correlation:
band[i, j] weighs the input block with corners (2i, 2j) .. (2i+1, 2j+1).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

FILTER_LL = np.array([[1.0, 1.0], [1.0, 1.0]], dtype=np.float32)
FILTER_LH = np.array([[-1.0, -1.0], [1.0, 1.0]], dtype=np.float32)
FILTER_HL = np.array([[-1.0, 1.0], [-1.0, 1.0]], dtype=np.float32)
FILTER_HH = np.array([[1.0, -1.0], [-1.0, 1.0]], dtype=np.float32)

BAND_ORDER = ("ll", "lh", "hl", "hh")


class WaveletBands:
    """The four half-resolution sub-bands of one analysis level."""

    __slots__ = ("ll", "lh", "hl", "hh")

    def __init__(self, ll: Tensor, lh: Tensor, hl: Tensor, hh: Tensor):
        shape = ll.shape
        for name, band in (("lh", lh), ("hl", hl), ("hh", hh)):
            if band.shape != shape:
                raise ShapeError(
                    f"band {name} has shape {band.shape}, expected {shape}"
                )
        self.ll = ll
        self.lh = lh
        self.hl = hl
        self.hh = hh

    @property
    def shape(self):
        return self.ll.shape

    def __iter__(self):
        return iter((self.ll, self.lh, self.hl, self.hh))


def _analysis_kernel(x):
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = a + b + c + d
    lh = -a - b + c + d
    hl = -a + b - c + d
    hh = a - b - c + d
    return ll, lh, hl, hh


def _synthesis_kernel(ll, lh, hl, hh):
    n, c, h2, w2 = ll.shape
    x = np.empty((n, c, 2 * h2, 2 * w2), dtype=ll.dtype)
    x[..., 0::2, 0::2] = (ll - lh - hl + hh) * 0.25
    x[..., 0::2, 1::2] = (ll - lh + hl - hh) * 0.25
    x[..., 1::2, 0::2] = (ll + lh - hl - hh) * 0.25
    x[..., 1::2, 1::2] = (ll + lh + hl + hh) * 0.25
    return x


def dwt2(x: Tensor) -> WaveletBands:
    """Analysis: NCHW -> four (N, C, H/2, W/2) bands. H and W must be even."""
    if x.ndim != 4:
        raise ShapeError("dwt2 expects an NCHW tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(
            f"dwt2 needs even spatial dims, got {h}x{w}; pad the input first"
        )
    ll, lh, hl, hh = _analysis_kernel(x.data)
    stacked = Tensor(np.concatenate([ll, lh, hl, hh], axis=1))
    tape = T._tape_for(x)
    if tape is not None:

        def bwd(g):
            gll, glh, ghl, ghh = (g[:, i * c : (i + 1) * c] for i in range(4))
            dx = np.empty((n, c, h, w), dtype=g.dtype)
            dx[..., 0::2, 0::2] = gll - glh - ghl + ghh
            dx[..., 0::2, 1::2] = gll - glh + ghl - ghh
            dx[..., 1::2, 0::2] = gll + glh - ghl - ghh
            dx[..., 1::2, 1::2] = gll + glh + ghl + ghh
            return (dx,)

        tape.add(stacked, (x,), bwd)
    return WaveletBands(
        T.slice_channels(stacked, 0, c),
        T.slice_channels(stacked, c, 2 * c),
        T.slice_channels(stacked, 2 * c, 3 * c),
        T.slice_channels(stacked, 3 * c, 4 * c),
    )


def idwt2(bands: WaveletBands) -> Tensor:
    """Synthesis: exact left-inverse of dwt2 (carries the 1/4 factor)."""
    stacked = T.concat_channels(
        T.concat_channels(bands.ll, bands.lh),
        T.concat_channels(bands.hl, bands.hh),
    )
    n, c4, h2, w2 = stacked.shape
    c = c4 // 4
    sd = stacked.data
    parts = [sd[:, i * c : (i + 1) * c] for i in range(4)]
    out = Tensor(_synthesis_kernel(*parts))
    tape = T._tape_for(stacked)
    if tape is None:
        return out

    def bwd(g):
        ga = g[..., 0::2, 0::2]
        gb = g[..., 0::2, 1::2]
        gc = g[..., 1::2, 0::2]
        gd = g[..., 1::2, 1::2]
        gll = (ga + gb + gc + gd) * 0.25
        glh = (-ga - gb + gc + gd) * 0.25
        ghl = (-ga + gb - gc + gd) * 0.25
        ghh = (ga - gb - gc + gd) * 0.25
        return (np.concatenate([gll, glh, ghl, ghh], axis=1),)

    return tape.add(out, (stacked,), bwd)


def analysis_conv_weight(channels: int, dtype=np.float32):
    """Grouped stride-2 conv weight equivalent to dwt2, for oracle checks.

    Shape (4*channels, 1, 2, 2) with groups=channels producing band-major
    output only when channels == 1; the general per-channel comparison
    reorders, so most callers use channels == 1.
    """
    filt = np.stack([FILTER_LL, FILTER_LH, FILTER_HL, FILTER_HH]).astype(dtype)
    return np.tile(filt[:, None], (channels, 1, 1, 1))
