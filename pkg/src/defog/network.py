"""Learned blocks and the assembled two-branch generator plus discriminator.

Branch 1 is a DWT-assisted encoder/decoder with a stack of Fourier-mixing
residual blocks at the bottleneck.  Branch 2 is a ConvNeXt-style encoder
with a pixel-shuffle attention decoder.  A small fusion head merges the two
into a [0,1] image.  Ablation flags drop either branch, the wavelet wiring,
or the Fourier blocks; reduced variants keep the remaining parameter names
unchanged, so name sets differ exactly by the removed sub-graphs.

All modules draw their init from an `rng` in attribute order, so a fixed
seed fixes every weight.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .fft import SpectralTransform
from .tensor import Buffer, Module, Param, Tensor
from .wavelet import WaveletBands, dwt2, idwt2


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, groups=1, bias=True):
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = Param(T.conv_weight_init(rng, (cout, cin // groups, k, k)))
        self.bias = Param(np.zeros(cout, dtype=np.float32)) if bias else None

    def __call__(self, x):
        b = self.bias.value if self.bias is not None else None
        return T.conv2d(x, self.weight.value, b, stride=self.stride,
                        padding=self.padding, groups=self.groups)

    def label(self):
        g = f", g{self.groups}" if self.groups != 1 else ""
        return (f"Conv2d({self.cin}->{self.cout}, k{self.k}, s{self.stride}, "
                f"p{self.padding}{g})")


class BatchNorm2d(Module):
    def __init__(self, channels):
        self.channels = channels
        self.gain = Param(np.ones(channels, dtype=np.float32))
        self.shift = Param(np.zeros(channels, dtype=np.float32))
        self.running_mean = Buffer(np.zeros(channels, dtype=np.float32))
        self.running_var = Buffer(np.ones(channels, dtype=np.float32))

    def __call__(self, x):
        return T.batch_norm(x, self.gain.value, self.shift.value,
                            self.running_mean.value, self.running_var.value,
                            training=self.training)

    def label(self):
        return f"BatchNorm2d({self.channels})"


class ChannelNorm(Module):
    """Layer normalization over the channel axis at each spatial position."""

    def __init__(self, channels):
        self.channels = channels
        self.gain = Param(np.ones(channels, dtype=np.float32))
        self.shift = Param(np.zeros(channels, dtype=np.float32))

    def __call__(self, x):
        return T.layer_norm(x, self.gain.value, self.shift.value)

    def label(self):
        return f"ChannelNorm({self.channels})"


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    scales: int = 3
    widths: tuple = (16, 32, 64)
    ffc_blocks: int = 3
    ffc_global_ratio: float = 0.5
    convnext_stages: int = 3
    convnext_widths: tuple = (24, 48, 96)
    convnext_depths: tuple = (1, 1, 3)
    patchify_stride: int = 2      # branch-2 stem stride: 2 toy, 4 full
    branch_out: int = 16          # channels each branch feeds the fusion head
    use_branch1: bool = True
    use_branch2: bool = True
    use_dwt: bool = True
    use_ffc: bool = True
    preset: str = "toy"

    def __post_init__(self):
        if self.scales != len(self.widths):
            raise ShapeError(f"{self.scales} scales need {self.scales} widths")
        if any(a >= b for a, b in zip(self.widths, self.widths[1:])):
            raise ShapeError("encoder widths must be strictly increasing")
        if not 0.0 < self.ffc_global_ratio < 1.0:
            raise ShapeError("ffc_global_ratio must lie strictly inside (0, 1)")
        if self.convnext_stages != len(self.convnext_widths) or \
                self.convnext_stages != len(self.convnext_depths):
            raise ShapeError("convnext widths/depths must match the stage count")
        if not (self.use_branch1 or self.use_branch2):
            raise ShapeError("at least one branch must be enabled")

    @property
    def stride_requirement(self):
        """Input dims must divide this (the deepest downsampling factor)."""
        req = 2**self.scales if self.use_branch1 else 1
        if self.use_branch2:
            req = max(req, self.patchify_stride * 2 ** (self.convnext_stages - 1))
        return req

    @classmethod
    def toy(cls, **overrides):
        return replace(cls(), **overrides)

    @classmethod
    def full(cls, **overrides):
        base = cls(widths=(64, 128, 256), convnext_widths=(96, 192, 384),
                   convnext_depths=(3, 3, 9), patchify_stride=4, preset="full")
        return replace(base, **overrides)


# ---------------------------------------------------------------------------
# Fourier-mixing blocks


class FfcUnit(Module):
    """Cross-connected local/global convolution unit.

    The input splits into a local half and a global half (the global size is
    floor(C * ratio)).  Local output sums a local->local and a global->local
    3x3 conv; global output sums a local->global conv, a global->global conv
    and the spectral transform of the global half.  Each half passes batch
    norm and relu before re-concatenation as [local | global].
    """

    def __init__(self, channels, ratio, rng):
        if not 0.0 < ratio < 1.0:
            raise ShapeError("global ratio must lie strictly inside (0, 1)")
        self.channels = channels
        self.c_global = int(channels * ratio)
        self.c_local = channels - self.c_global
        if self.c_global == 0 or self.c_local == 0:
            raise ShapeError(
                f"ratio {ratio} degenerates the split for {channels} channels"
            )
        cl, cg = self.c_local, self.c_global
        self.conv_ll = Conv2d(cl, cl, 3, rng, padding=1)
        self.conv_gl = Conv2d(cg, cl, 3, rng, padding=1)
        self.conv_lg = Conv2d(cl, cg, 3, rng, padding=1)
        self.conv_gg = Conv2d(cg, cg, 3, rng, padding=1)
        self.spectral = SpectralTransform(cg, rng)
        self.norm_l = BatchNorm2d(cl)
        self.norm_g = BatchNorm2d(cg)

    def __call__(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"unit built for {self.channels} channels, got {x.shape[1]}")
        xl = T.slice_channels(x, 0, self.c_local)
        xg = T.slice_channels(x, self.c_local, self.channels)
        out_l = self.conv_ll(xl) + self.conv_gl(xg)
        out_g = self.conv_lg(xl) + self.conv_gg(xg) + self.spectral(xg)
        out_l = T.relu(self.norm_l(out_l))
        out_g = T.relu(self.norm_g(out_g))
        return T.concat_channels(out_l, out_g)


class FfcResidualBlock(Module):
    """Two cross-connected units with an outer residual connection."""

    def __init__(self, channels, ratio, rng):
        self.unit1 = FfcUnit(channels, ratio, rng)
        self.unit2 = FfcUnit(channels, ratio, rng)

    def __call__(self, x):
        return x + self.unit2(self.unit1(x))


# ---------------------------------------------------------------------------
# wavelet encoder / decoder blocks


class DwtDown(Module):
    """Halve resolution: strided conv stack beside the low-pass band.

    With the wavelet path enabled the conv features are concatenated with
    the ll band of the input and mixed down to `width` by a 1x1 conv, and
    the high-frequency bands are handed back for the paired up block.
    Without it the block is just the conv stack (no `mix` parameters).
    """

    def __init__(self, cin, width, rng, use_dwt=True):
        self.cin, self.width, self.use_dwt = cin, width, use_dwt
        self.conv1 = Conv2d(cin, width, 3, rng, stride=2, padding=1)
        self.norm1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, rng, padding=1)
        self.norm2 = BatchNorm2d(width)
        if use_dwt:
            self.mix = Conv2d(width + cin, width, 1, rng)

    def __call__(self, x):
        h = T.relu(self.norm1(self.conv1(x)))
        h = T.relu(self.norm2(self.conv2(h)))
        if not self.use_dwt:
            return h, None
        bands = dwt2(x)
        h = self.mix(T.concat_channels(h, bands.ll))
        return h, (bands.lh, bands.hl, bands.hh)


class DwtUp(Module):
    """Double resolution: inverse wavelet step (or learned upsample), then
    merge the encoder skip.

    Wavelet mode projects the features to the stored bands' channel count,
    treats the result as the ll band and runs the inverse transform with the
    stashed highs (`ll_proj` parameters).  The ablation replaces that with a
    1x1 expansion feeding a pixel shuffle (`up_proj` parameters).  Either
    way the upsampled features are concatenated with the encoder skip and
    mixed by a 3x3 conv.
    """

    def __init__(self, cin, c_high, c_skip, cout, rng, use_dwt=True):
        self.cin, self.c_high, self.cout, self.use_dwt = cin, c_high, cout, use_dwt
        if use_dwt:
            self.ll_proj = Conv2d(cin, c_high, 1, rng)
        else:
            self.up_proj = Conv2d(cin, 4 * c_high, 1, rng)
        self.mix = Conv2d(c_high + c_skip, cout, 3, rng, padding=1)
        self.norm = BatchNorm2d(cout)

    def __call__(self, x, highs, skip):
        if self.use_dwt:
            if highs is None:
                raise ShapeError("wavelet up block needs the stored high bands")
            lh, hl, hh = highs
            up = idwt2(WaveletBands(self.ll_proj(x), lh, hl, hh))
        else:
            up = T.pixel_shuffle(self.up_proj(x), 2)
        if up.shape[2:] != skip.shape[2:]:
            raise ShapeError(
                f"upsampled {up.shape} does not align with skip {skip.shape}"
            )
        return T.relu(self.norm(self.mix(T.concat_channels(up, skip))))


class WaveletBranch(Module):
    """Encoder of strided-conv+DWT levels, Fourier bottleneck, mirrored decoder.

    Skip connections attach to each down block's input (post-mix features of
    the previous level), and the stored high bands ride along to the up
    block that undoes the same level.
    """

    def __init__(self, cfg: ModelConfig, rng):
        w = cfg.widths
        chain = (w[0],) + tuple(w)  # channels entering down block i
        self.stem = Conv2d(3, w[0], 3, rng, padding=1)
        self.down = [
            DwtDown(chain[i], w[i], rng, use_dwt=cfg.use_dwt)
            for i in range(cfg.scales)
        ]
        if cfg.use_ffc:
            self.ffc = [
                FfcResidualBlock(w[-1], cfg.ffc_global_ratio, rng)
                for _ in range(cfg.ffc_blocks)
            ]
        # up block k undoes down block j = scales-1-k; its high-band and
        # skip widths mirror that block's input, its input the level width
        self.up = [
            DwtUp(
                w[j], chain[j], chain[j],
                cfg.branch_out if j == 0 else chain[j],
                rng, use_dwt=cfg.use_dwt,
            )
            for j in reversed(range(cfg.scales))
        ]
        self.scales = cfg.scales

    def __call__(self, x):
        h = T.relu(self.stem(x))
        skips, highs = [], []
        for block in self.down:
            skips.append(h)
            h, hi = block(h)
            highs.append(hi)
        for block in getattr(self, "ffc", ()):
            h = block(h)
        for k, block in enumerate(self.up):
            j = self.scales - 1 - k
            h = block(h, highs[j], skips[j])
        return h


# ---------------------------------------------------------------------------
# prior-knowledge branch


class ConvNextBlock(Module):
    """Depthwise 7x7, channel norm, 4x inverted bottleneck, residual add."""

    def __init__(self, channels, rng):
        self.dw = Conv2d(channels, channels, 7, rng, padding=3, groups=channels)
        self.norm = ChannelNorm(channels)
        self.expand = Conv2d(channels, 4 * channels, 1, rng)
        self.project = Conv2d(4 * channels, channels, 1, rng)

    def __call__(self, x):
        h = self.norm(self.dw(x))
        h = self.project(T.gelu(self.expand(h)))
        return x + h


class ConvNextStage(Module):
    """Downsampling stem followed by `depth` residual blocks.

    The first stage patchifies (kernel = stride = the configured stem
    stride, then norm); later stages normalize first and downsample with a
    2x2 stride-2 conv.
    """

    def __init__(self, cin, cout, depth, rng, stem_stride=2, first=False):
        self.first = first
        self.stride = stem_stride if first else 2
        if first:
            self.stem = Conv2d(cin, cout, self.stride, rng, stride=self.stride)
            self.stem_norm = ChannelNorm(cout)
        else:
            self.stem_norm = ChannelNorm(cin)
            self.stem = Conv2d(cin, cout, 2, rng, stride=2)
        self.blocks = [ConvNextBlock(cout, rng) for _ in range(depth)]

    def __call__(self, x):
        if self.first:
            h = self.stem_norm(self.stem(x))
        else:
            h = self.stem(self.stem_norm(x))
        for block in self.blocks:
            h = block(h)
        return h


class AttentionBlock(Module):
    """Channel gate from pooled statistics, then a spatial gate."""

    def __init__(self, channels, rng):
        mid = max(channels // 8, 1)
        self.ca_reduce = Conv2d(channels, mid, 1, rng)
        self.ca_expand = Conv2d(mid, channels, 1, rng)
        self.pa_reduce = Conv2d(channels, mid, 1, rng)
        self.pa_gate = Conv2d(mid, 1, 1, rng)

    def __call__(self, x):
        w = T.sigmoid(self.ca_expand(T.relu(self.ca_reduce(T.global_avg_pool(x)))))
        x = x * w
        g = T.sigmoid(self.pa_gate(T.relu(self.pa_reduce(x))))
        return x * g


class DecoderLevel(Module):
    """Pixel-shuffle upsample, attention, skip merge, conv."""

    def __init__(self, cin, c_skip, cout, rng):
        self.cin, self.c_skip, self.cout = cin, c_skip, cout
        self.attn = AttentionBlock(cin // 4, rng)
        self.conv = Conv2d(cin // 4 + c_skip, cout, 3, rng, padding=1)

    def __call__(self, x, skip):
        h = self.attn(T.pixel_shuffle(x, 2))
        if skip is not None:
            if skip.shape[2:] != h.shape[2:]:
                raise ShapeError(
                    f"decoder skip {skip.shape} does not align with {h.shape}"
                )
            h = T.concat_channels(h, skip)
        return T.relu(self.conv(h))


class PriorBranch(Module):
    """ConvNeXt-style encoder stages and a pixel-shuffle attention decoder.

    The decoder doubles resolution per level, merging the encoder stage
    output of matching resolution where one exists and the network input at
    full resolution.
    """

    def __init__(self, cfg: ModelConfig, rng):
        widths = cfg.convnext_widths
        self.stages = [
            ConvNextStage(
                3 if i == 0 else widths[i - 1], widths[i],
                cfg.convnext_depths[i], rng,
                stem_stride=cfg.patchify_stride, first=(i == 0),
            )
            for i in range(cfg.convnext_stages)
        ]
        stage_stride = {
            cfg.patchify_stride * 2**i: i for i in range(cfg.convnext_stages)
        }
        self.decoder = []
        self._skip_sources = []
        stride = cfg.patchify_stride * 2 ** (cfg.convnext_stages - 1)
        ch = widths[-1]
        while stride > 1:
            stride //= 2
            if stride == 1:
                src, c_skip, cout = "input", 3, cfg.branch_out
            elif stride in stage_stride:
                i = stage_stride[stride]
                src, c_skip, cout = i, widths[i], widths[i]
            else:
                src, c_skip, cout = None, 0, ch // 4
            self.decoder.append(DecoderLevel(ch, c_skip, cout, rng))
            self._skip_sources.append(src)
            ch = cout

    def __call__(self, x):
        feats = []
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        for level, src in zip(self.decoder, self._skip_sources):
            if src == "input":
                skip = x
            elif src is None:
                skip = None
            else:
                skip = feats[src]
            h = level(h, skip)
        return h


# ---------------------------------------------------------------------------
# fusion, generator, discriminator


class FusionHead(Module):
    """Concat of branch outputs -> 3x3 conv -> tanh squashed into [0,1]."""

    def __init__(self, cin, rng):
        self.conv = Conv2d(cin, 3, 3, rng, padding=1)

    def __call__(self, x):
        return 0.5 * (T.tanh(self.conv(x)) + 1.0)


class Generator(Module):
    def __init__(self, cfg: ModelConfig = None, seed=0):
        cfg = cfg or ModelConfig.toy()
        rng = np.random.default_rng(seed)
        if cfg.use_branch1:
            self.branch1 = WaveletBranch(cfg, rng)
        if cfg.use_branch2:
            self.branch2 = PriorBranch(cfg, rng)
        n_branches = int(cfg.use_branch1) + int(cfg.use_branch2)
        self.fusion = FusionHead(cfg.branch_out * n_branches, rng)
        self.config = cfg

    def __call__(self, hazy: Tensor) -> Tensor:
        if hazy.ndim != 4 or hazy.shape[1] != 3:
            raise ShapeError(f"generator expects N,3,H,W input, got {hazy.shape}")
        n, _, h, w = hazy.shape
        req = self.config.stride_requirement
        if h % req or w % req:
            raise ShapeError(
                f"spatial dims {h}x{w} must be divisible by {req}; pad the input"
            )
        parts = []
        if self.config.use_branch1:
            parts.append(self.branch1(hazy))
        if self.config.use_branch2:
            parts.append(self.branch2(hazy))
        merged = parts[0] if len(parts) == 1 else T.concat_channels(*parts)
        return self.fusion(merged)


class Discriminator(Module):
    """Four stride-2 conv stages then a 1x1 conv to per-patch probabilities."""

    MIN_SIZE = 16

    def __init__(self, seed=0, widths=(16, 32, 64, 128)):
        rng = np.random.default_rng(seed)
        self.convs = []
        self.norms = []
        cin = 3
        for i, cout in enumerate(widths):
            self.convs.append(Conv2d(cin, cout, 3, rng, stride=2, padding=1))
            self.norms.append(BatchNorm2d(cout) if i > 0 else None)
            cin = cout
        self.head = Conv2d(cin, 1, 1, rng)

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"discriminator expects N,3,H,W input, got {image.shape}")
        h, w = image.shape[2:]
        if h < self.MIN_SIZE or w < self.MIN_SIZE:
            raise ShapeError(
                f"discriminator needs at least {self.MIN_SIZE}x{self.MIN_SIZE} "
                f"input, got {h}x{w}"
            )
        x = image
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x)
            if norm is not None:
                x = norm(x)
            x = T.leaky_relu(x, 0.2)
        return T.sigmoid(self.head(x))


# ---------------------------------------------------------------------------
# topology description


def _children(module):
    out = []
    for name, attr in vars(module).items():
        if isinstance(attr, Module):
            out.append((name, attr))
        elif isinstance(attr, (list, tuple)):
            for i, item in enumerate(attr):
                if isinstance(item, Module):
                    out.append((f"{name}.{i}", item))
    return out


def _param_count(module):
    return sum(p.value.size for p in module.params())


def _render(module, name, prefix, is_last, lines):
    kids = _children(module)
    if hasattr(module, "label"):
        text = f"{name}: {module.label()}"
        kids = []
    else:
        text = f"{name} [{type(module).__name__}]"
    branch = "`- " if is_last else "|- "
    lines.append(prefix + branch + text)
    child_prefix = prefix + ("   " if is_last else "|  ")
    for i, (kname, kid) in enumerate(kids):
        _render(kid, kname, child_prefix, i == len(kids) - 1, lines)


def describe(model: Generator) -> str:
    """Deterministic text tree of the model topology, for the CLI."""
    cfg = model.config
    flags = []
    for flag in ("use_branch1", "use_branch2", "use_dwt", "use_ffc"):
        if not getattr(cfg, flag):
            flags.append(f"-{flag[4:]}")
    suffix = f" ({' '.join(flags)})" if flags else ""
    lines = [f"generator preset={cfg.preset}{suffix} params={_param_count(model)}"]
    kids = _children(model)
    for i, (name, kid) in enumerate(kids):
        _render(kid, name, "", i == len(kids) - 1, lines)
    return "\n".join(lines) + "\n"
