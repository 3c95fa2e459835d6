"""Training objective terms and evaluation metrics.

Four loss terms: smooth L1, multi-scale structural similarity, perceptual
distance through a frozen feature net, and the non-saturating adversarial
pair.  The total is the weighted sum with coefficients (1, alpha, beta,
gamma).  PSNR and single-scale SSIM double as evaluation metrics.

Everything differentiable here is built from taped tensor primitives, so no
loss carries its own backward rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Buffer, Module, Tensor

# standard five-scale exponents; truncated and renormalized for fewer scales
SCALE_EXPONENTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class LossWeights:
    alpha: float = 0.2    # multi-scale structural term
    beta: float = 0.01    # perceptual term
    gamma: float = 0.0005  # adversarial term

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ShapeError(f"loss weight {name} must be >= 0")


def scale_exponents(scales: int):
    if not 1 <= scales <= len(SCALE_EXPONENTS):
        raise ShapeError(f"scales must be in [1, {len(SCALE_EXPONENTS)}], got {scales}")
    w = np.array(SCALE_EXPONENTS[:scales], dtype=np.float64)
    return tuple(w / w.sum())


@dataclass
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0
    scales: int = 3
    exponents: tuple = field(default=None)

    def __post_init__(self):
        if self.exponents is None:
            self.exponents = scale_exponents(self.scales)
        if len(self.exponents) != self.scales:
            raise ShapeError(
                f"{len(self.exponents)} exponents given for {self.scales} scales"
            )
        if abs(sum(self.exponents) - 1.0) > 1e-9:
            raise ShapeError("scale exponents must sum to 1")

    @property
    def t1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def t2(self):
        return (self.k2 * self.data_range) ** 2


def gaussian_window(size=11, sigma=1.5, dtype=np.float32):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return (k / k.sum()).astype(dtype)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over every element of 0.5*d^2 (|d| < 1) else |d| - 0.5."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    d = diff.data
    inner = np.abs(d) < 1.0
    # piecewise selection via masks keeps the expression taped and branch-free
    mask = Tensor(inner.astype(d.dtype))
    sq = diff * diff * 0.5
    lin = _abs(diff) - 0.5
    return T.mean_all(sq * mask + lin * (1.0 - mask))


def _abs(x: Tensor) -> Tensor:
    sign = Tensor(np.sign(x.data))
    return x * sign


# ---------------------------------------------------------------------------
# perceptual distance


class FeatureStub:
    """Test extractor whose only tap is the input itself."""

    def taps(self, x: Tensor):
        return [x]


class RandomFeatureNet(Module):
    """Frozen random conv net with three tap points.

    Deterministic for a given seed; weights are buffers, so they are never
    trained and never collected into gradients, but gradients still flow
    through them to the image input.
    """

    def __init__(self, seed=2024):
        rng = np.random.default_rng(seed)
        widths = [(3, 8), (8, 16), (16, 32)]
        self.weights = []
        self.biases = []
        for cin, cout in widths:
            self.weights.append(Buffer(T.conv_weight_init(rng, (cout, cin, 3, 3))))
            self.biases.append(Buffer(rng.standard_normal(cout).astype(np.float32) * 0.1))

    def taps(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"feature net expects N,3,H,W input, got {x.shape}")
        out = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            stride = 1 if i == 0 else 2
            h = T.relu(T.conv2d(h, Tensor(w.value), Tensor(b.value), stride=stride, padding=1))
            out.append(h)
        return out


class VggStyleFeatureNet(Module):
    """VGG-16-shaped extractor tapping the conventional three stages.

    Ships with fixed-seed random weights; `load_state` accepts converted
    weights keyed conv0..conv6 (weight/bias pairs).  Taps fire after the
    2nd, 4th and 7th convolutions.
    """

    PLAN = [
        (3, 64), (64, 64),            # tap after second conv
        (64, 128), (128, 128),        # tap after fourth
        (128, 256), (256, 256), (256, 256),  # tap after seventh
    ]
    TAPS = (1, 3, 6)
    POOL_BEFORE = (2, 4)  # conv indices preceded by 2x2 mean pooling

    def __init__(self, seed=2024):
        rng = np.random.default_rng(seed)
        self.weights = [Buffer(T.conv_weight_init(rng, (co, ci, 3, 3))) for ci, co in self.PLAN]
        self.biases = [Buffer(np.zeros(co, dtype=np.float32)) for _, co in self.PLAN]

    def load_state(self, state: dict):
        for i in range(len(self.PLAN)):
            w = np.asarray(state[f"conv{i}.weight"], dtype=np.float32)
            b = np.asarray(state[f"conv{i}.bias"], dtype=np.float32)
            if w.shape != self.weights[i].value.shape:
                raise ShapeError(
                    f"conv{i}.weight shape {w.shape} != {self.weights[i].value.shape}"
                )
            self.weights[i] = Buffer(w)
            self.biases[i] = Buffer(b)

    def taps(self, x: Tensor):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"feature net expects N,3,H,W input, got {x.shape}")
        out = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if i in self.POOL_BEFORE:
                h = T.avg_pool2(_pad_to_even(h))
            h = T.relu(T.conv2d(h, Tensor(w.value), Tensor(b.value), padding=1))
            if i in self.TAPS:
                out.append(h)
        return out


def _pad_to_even(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 == 0 and w % 2 == 0:
        return x
    return T.crop2d(x, 0, 0, h - h % 2, w - w % 2)


def perceptual_loss(pred: Tensor, target: Tensor, fx) -> Tensor:
    """Sum over taps of ||f_j(pred) - f_j(target)||^2 / (C_j*H_j*W_j).

    The squared norm runs over each tap's channels and pixels and averages
    over the batch; the target branch is detached, so gradients reach the
    prediction only.
    """
    taps_p = fx.taps(pred)
    taps_t = fx.taps(target.detach())
    total = None
    for fp, ft in zip(taps_p, taps_t):
        n, c, h, w = fp.shape
        d = fp - ft
        term = T.sum_all(d * d) / (n * c * h * w)
        total = term if total is None else total + term
    if total is None:
        raise ShapeError("feature extractor produced no taps")
    return total


# ---------------------------------------------------------------------------
# structural similarity


def _windowed_mean(x: Tensor, kernel: Tensor) -> Tensor:
    return T.conv2d(x, kernel, stride=1, padding=0, groups=x.shape[1])


def _window_kernel(c, cfg, dtype):
    k = gaussian_window(cfg.window, cfg.sigma, dtype)
    return Tensor(np.broadcast_to(k, (c, 1, cfg.window, cfg.window)).copy())


def ssim_map(a: Tensor, b: Tensor, cfg: SsimConfig = None):
    """Per-pixel luminance and contrast-structure maps over valid windows."""
    cfg = cfg or SsimConfig()
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    n, c, h, w = a.shape
    if min(h, w) < cfg.window:
        raise ShapeError(
            f"image {h}x{w} smaller than the {cfg.window}x{cfg.window} window"
        )
    kern = _window_kernel(c, cfg, a.data.dtype)
    mu_a = _windowed_mean(a, kern)
    mu_b = _windowed_mean(b, kern)
    m_aa = _windowed_mean(a * a, kern)
    m_bb = _windowed_mean(b * b, kern)
    m_ab = _windowed_mean(a * b, kern)
    var_a = m_aa - mu_a * mu_a
    var_b = m_bb - mu_b * mu_b
    cov = m_ab - mu_a * mu_b
    lum = (mu_a * mu_b * 2.0 + cfg.t1) / (mu_a * mu_a + mu_b * mu_b + cfg.t1)
    cs = (cov * 2.0 + cfg.t2) / (var_a + var_b + cfg.t2)
    return lum, cs


def ssim(a: Tensor, b: Tensor, cfg: SsimConfig = None) -> float:
    """Mean single-scale structural similarity, computed in 64-bit."""
    a64 = Tensor(a.data.astype(np.float64))
    b64 = Tensor(b.data.astype(np.float64))
    lum, cs = ssim_map(a64, b64, cfg)
    return float((lum.data * cs.data).mean())


def max_scales(h, w, window=11):
    """Largest S with min(h, w) / 2^(S-1) >= window."""
    s = 0
    m = min(h, w)
    while m >= window:
        s += 1
        m //= 2
    return s


_SCALE_FLOOR = 1e-6


def ms_ssim_loss(pred: Tensor, target: Tensor, cfg: SsimConfig = None) -> Tensor:
    """1 minus the multi-scale similarity product.

    Contrast-structure means are taken at every scale with 2x2 mean-pool
    downsampling in between; the luminance factor enters at the coarsest
    scale only.  Scale means are floored at 1e-6 before the fractional
    exponents, which also keeps the loss inside [0, 1).
    """
    cfg = cfg or SsimConfig()
    n, c, h, w = pred.shape
    need = cfg.window * (1 << (cfg.scales - 1))
    if min(h, w) < need:
        raise ShapeError(
            f"{h}x{w} image supports at most S = {max_scales(h, w, cfg.window)} "
            f"scales with an {cfg.window}-wide window; got S = {cfg.scales}"
        )
    a, b = pred, target
    product = None
    for s, beta in enumerate(cfg.exponents):
        lum, cs = ssim_map(a, b, cfg)
        if s == cfg.scales - 1:
            m = T.mean_all(lum * cs)
        else:
            m = T.mean_all(cs)
            a = T.avg_pool2(_pad_to_even(a))
            b = T.avg_pool2(_pad_to_even(b))
        m = T.power(T.clip(m, lo=_SCALE_FLOOR), float(beta))
        product = m if product is None else product * m
    return 1.0 - product


# ---------------------------------------------------------------------------
# adversarial pair


_PROB_EPS = 1e-7


def _checked_prob(t: Tensor, name):
    d = t.data
    if d.min() <= 0.0 or d.max() >= 1.0:
        raise ShapeError(
            f"{name} must lie strictly inside (0, 1); "
            f"got range [{d.min():.3g}, {d.max():.3g}]"
        )
    return T.clip(t, _PROB_EPS, 1.0 - _PROB_EPS)


def adversarial_losses(d_real: Tensor, d_fake_for_d: Tensor, d_fake_for_g: Tensor):
    """Non-saturating GAN pair.

    g_loss = mean(-log D(fake)); d_loss = mean(-log D(real)) +
    mean(-log(1 - D(fake))).  Probabilities are clamped away from 0 and 1
    before the logs.
    """
    p_real = _checked_prob(d_real, "d_real")
    p_fake_d = _checked_prob(d_fake_for_d, "d_fake_for_d")
    p_fake_g = _checked_prob(d_fake_for_g, "d_fake_for_g")
    g_loss = -1.0 * T.mean_all(T.log(p_fake_g))
    d_loss = -1.0 * T.mean_all(T.log(p_real)) - T.mean_all(T.log(1.0 - p_fake_d))
    return g_loss, d_loss


# ---------------------------------------------------------------------------
# combination and metrics


def combine_terms(l1, ms, perc, adv, w: LossWeights = None):
    """Weighted sum with coefficients exactly (1, alpha, beta, gamma).

    Accepts python floats or scalar tensors; evaluation order is fixed
    left to right.
    """
    w = w or LossWeights()
    return l1 + w.alpha * ms + w.beta * perc + w.gamma * adv


def total_loss(pred, target, fx, d_fake_for_g, weights: LossWeights = None,
               cfg: SsimConfig = None):
    """Full objective and its per-term breakdown (python floats)."""
    weights = weights or LossWeights()
    l1 = smooth_l1(pred, target)
    ms = ms_ssim_loss(pred, target, cfg)
    perc = perceptual_loss(pred, target, fx)
    g_adv = -1.0 * T.mean_all(T.log(_checked_prob(d_fake_for_g, "d_fake_for_g")))
    total = combine_terms(l1, ms, perc, g_adv, weights)
    breakdown = {
        "l1": l1.item(),
        "msssim": ms.item(),
        "perc": perc.item(),
        "adv": g_adv.item(),
        "total": total.item(),
    }
    return total, breakdown


def psnr(pred: Tensor, target: Tensor, max_value=1.0) -> float:
    """Peak signal-to-noise ratio in dB; infinite for identical inputs."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    mse = float((diff * diff).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


def metric_report_line(name: str, psnr_value: float, ssim_value: float) -> str:
    return f"{name}\tPSNR={psnr_value:.4f}\tSSIM={ssim_value:.4f}"
