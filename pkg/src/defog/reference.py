"""Slow, independent reference implementations used to cross-check the fast paths.

Everything here is oracle code: straightforward numpy with no reuse of the
tensor/fft/loss machinery it validates.  The self-test command and the test
suite both run these against the production implementations, so keep the two
routes from sharing code.
"""

from __future__ import annotations

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct six-loop cross-correlation. Shapes as in tensor.conv2d."""
    n, cin, h, ww_ = x.shape
    cout, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (ww_ + 2 * padding - kw) // stride + 1
    y = np.zeros((n, cout, oh, ow), dtype=np.float64)
    mo = cout // groups
    for ni in range(n):
        for co in range(cout):
            gi = co // mo
            for oi in range(oh):
                for oj in range(ow):
                    acc = 0.0
                    for ci in range(cin_g):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (
                                    xp[ni, gi * cin_g + ci, oi * stride + ki, oj * stride + kj]
                                    * w[co, ci, ki, kj]
                                )
                    y[ni, co, oi, oj] = acc
            if b is not None:
                y[ni, co] += b[co]
    return y.astype(x.dtype)


def naive_dft(v):
    """O(n^2) discrete Fourier transform along the last axis, unnormalized."""
    v = np.asarray(v, dtype=np.complex128)
    n = v.shape[-1]
    k = np.arange(n)
    mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return v @ mat.T


def naive_idft(v):
    """Inverse of naive_dft, carrying the 1/n factor."""
    v = np.asarray(v, dtype=np.complex128)
    n = v.shape[-1]
    k = np.arange(n)
    mat = np.exp(2j * np.pi * np.outer(k, k) / n)
    return (v @ mat.T) / n


def naive_dft2(img):
    """2D DFT of the trailing two axes via row and column matrix products."""
    a = naive_dft(np.asarray(img, dtype=np.complex128))
    return np.moveaxis(naive_dft(np.moveaxis(a, -2, -1)), -1, -2)


def naive_idft2(img):
    a = naive_idft(np.asarray(img, dtype=np.complex128))
    return np.moveaxis(naive_idft(np.moveaxis(a, -2, -1)), -1, -2)


# ---------------------------------------------------------------------------
# structural-similarity reference route


def _gaussian_window(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _window_means(img, kernel):
    """Valid-mode windowed means of a (C, H, W) image via sliding windows."""
    win = np.lib.stride_tricks.sliding_window_view(img, kernel.shape, axis=(1, 2))
    return np.tensordot(win, kernel, axes=([3, 4], [0, 1]))


def ssim_reference(x, y, k1=0.01, k2=0.03, data_range=1.0, win_size=11, sigma=1.5):
    """Mean structural similarity of two (C, H, W) or (H, W) float arrays."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[None], y[None]
    kernel = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx = _window_means(x, kernel)
    my = _window_means(y, kernel)
    mxx = _window_means(x * x, kernel)
    myy = _window_means(y * y, kernel)
    mxy = _window_means(x * y, kernel)
    vx = mxx - mx * mx
    vy = myy - my * my
    cxy = mxy - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * cxy + c2) / (vx + vy + c2)
    return float((lum * cs).mean())


def msssim_reference(x, y, scales=3, k1=0.01, k2=0.03, data_range=1.0,
                     win_size=11, sigma=1.5, floor=1e-6):
    """Multi-scale structural similarity of two (C, H, W) float arrays.

    Contrast-structure means at the fine scales and a luminance-weighted mean
    at the coarsest scale are floored at `floor`, then combined as a weighted
    geometric mean using the standard five-scale exponents renormalized to
    the first `scales` entries.
    """
    base = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
    if not 1 <= scales <= len(base):
        raise ValueError(f"scales must be in [1, {len(base)}], got {scales}")
    weights = base[:scales] / base[:scales].sum()

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 2:
        x, y = x[None], y[None]
    kernel = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def pool2(img):
        c, h, w = img.shape
        return img[:, : h - h % 2, : w - w % 2].reshape(c, h // 2, 2, w // 2, 2).mean(
            axis=(2, 4)
        )

    result = 1.0
    for s in range(scales):
        mx = _window_means(x, kernel)
        my = _window_means(y, kernel)
        vx = _window_means(x * x, kernel) - mx * mx
        vy = _window_means(y * y, kernel) - my * my
        cxy = _window_means(x * y, kernel) - mx * my
        cs = (2 * cxy + c2) / (vx + vy + c2)
        if s == scales - 1:
            lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
            m = max((lum * cs).mean(), floor)
        else:
            m = max(cs.mean(), floor)
            x, y = pool2(x), pool2(y)
        result *= m ** weights[s]
    return float(result)


def psnr_reference(x, y, data_range=1.0):
    mse = float(((np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(data_range * data_range / mse)


def haar_bands_reference(x):
    """Single-level unnormalized Haar analysis of a (..., H, W) array.

    Returns (ll, lh, hl, hh); each entry of a band is the corresponding
    +/-1-weighted sum of one 2x2 input block.
    """
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = a + b + c + d
    lh = -a - b + c + d
    hl = -a + b - c + d
    hh = a - b - c + d
    return ll, lh, hl, hh
