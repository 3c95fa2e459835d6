"""Synthetic haze data: scattering-model synthesis, gamma harmonization,
paired augmentation, and 8-bit image I/O (PNG via Pillow, PPM by hand).

Everything randomized is a pure function of (inputs, seed); the dataset
derives a fresh RNG per drawn sample so iteration order never matters.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError
from .tensor import Tensor

GAMMA_SEARCH_LO = 0.1
GAMMA_SEARCH_HI = 10.0

FIELD_STYLES = ("homogeneous", "blobs", "bands")


# ---------------------------------------------------------------------------
# haze fields and the scattering model


class HazeField:
    """Per-pixel haze description: transmission, airlight, density, depth.

    Transmission must equal exp(-beta * depth) elementwise; the constructor
    recomputes and checks rather than trusting the caller.
    """

    def __init__(self, transmission, airlight, beta_field, depth):
        t, b, d = (np.asarray(a, dtype=np.float32)
                   for a in (transmission, beta_field, depth))
        a = np.asarray(airlight, dtype=np.float32)
        for name, arr in (("transmission", t), ("beta_field", b), ("depth", d)):
            if arr.ndim != 4 or arr.shape[:2] != (1, 1):
                raise ShapeError(f"{name} must be shaped 1,1,H,W, got {arr.shape}")
        if not (t.shape == b.shape == d.shape):
            raise ShapeError("field component shapes disagree")
        if a.shape != (3,):
            raise ShapeError(f"airlight must be a 3-vector, got shape {a.shape}")
        if np.any(b < 0) or np.any(d < 0):
            raise DataError("beta and depth must be nonnegative")
        if np.any(a < 0) or np.any(a > 1):
            raise DataError("airlight components must lie in [0, 1]")
        expected = np.exp(-b.astype(np.float64) * d.astype(np.float64))
        if not np.allclose(t.astype(np.float64), expected, atol=1e-6):
            raise DataError("transmission does not equal exp(-beta * depth)")
        if np.any(t <= 0) or np.any(t > 1):
            raise DataError("transmission must lie in (0, 1]")
        self.transmission = Tensor(t)
        self.airlight = a
        self.beta_field = Tensor(b)
        self.depth = Tensor(d)

    @classmethod
    def from_beta_depth(cls, airlight, beta_field, depth):
        b = np.asarray(beta_field, dtype=np.float32)
        d = np.asarray(depth, dtype=np.float32)
        t = np.exp(-(b.astype(np.float64) * d.astype(np.float64)))
        return cls(t.astype(np.float32), airlight, b, d)

    @property
    def shape(self):
        return self.transmission.shape


def asm_synthesize(clean: Tensor, field: HazeField) -> Tensor:
    """Apply the scattering model I = J*t + A*(1 - t) channelwise."""
    j = clean.data if isinstance(clean, Tensor) else np.asarray(clean)
    if j.ndim != 4 or j.shape[1] != 3:
        raise ShapeError(f"clean image must be 1,3,H,W, got {j.shape}")
    t = field.transmission.data
    if j.shape[2:] != t.shape[2:] or j.shape[0] != t.shape[0]:
        raise ShapeError(
            f"clean {j.shape} does not match field {t.shape}"
        )
    if j.min() < 0.0 or j.max() > 1.0:
        raise DataError("clean image values must lie in [0, 1]")
    a = field.airlight.reshape(1, 3, 1, 1)
    hazy = j * t + a * (1.0 - t)
    return Tensor(hazy.astype(np.float32))


def _smooth_noise(rng, h, w, cells, amp):
    """Bilinear interpolation of a coarse noise grid, values in [-amp, amp]."""
    nodes = rng.uniform(-amp, amp, (cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h)
    xs = np.linspace(0.0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = nodes[y0][:, x0]
    tr = nodes[y0][:, x0 + 1]
    bl = nodes[y0 + 1][:, x0]
    br = nodes[y0 + 1][:, x0 + 1]
    return (tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx
            + bl * fy * (1 - fx) + br * fy * fx)


def make_nonhomogeneous_field(h, w, seed, style="blobs") -> HazeField:
    """Deterministic synthetic haze field.

    homogeneous: constant density over a gently varying depth.
    blobs: Gaussian density bumps, the stand-in for patchy dense haze.
    bands: sinusoidal density stripes.
    """
    if style not in FIELD_STYLES:
        raise DataError(f"unknown field style {style!r}; choose from {FIELD_STYLES}")
    rng = np.random.default_rng([seed, FIELD_STYLES.index(style)])
    yy = np.linspace(0.0, 1.0, h)[:, None]
    xx = np.linspace(0.0, 1.0, w)[None, :]
    depth = 0.9 + 0.2 * yy + 0.0 * xx + _smooth_noise(rng, h, w, 4, 0.02)
    depth = np.clip(depth, 0.05, None)

    if style == "homogeneous":
        beta = np.full((h, w), rng.uniform(0.8, 1.2))
    elif style == "blobs":
        beta = np.full((h, w), rng.uniform(0.3, 0.6))
        for _ in range(int(rng.integers(4, 8))):
            cy, cx = rng.uniform(0.0, 1.0, 2)
            sigma = rng.uniform(0.12, 0.3)
            amp = rng.uniform(0.6, 1.2)
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            beta = beta + amp * np.exp(-r2 / (2.0 * sigma**2))
    else:
        base = rng.uniform(0.3, 0.6)
        amp = rng.uniform(1.0, 2.0)
        freq = int(rng.integers(1, 3))
        phase = rng.uniform(0.0, 2.0 * np.pi)
        beta = base + amp * (0.5 + 0.5 * np.sin(2.0 * np.pi * freq * yy + phase
                                                + 0.0 * xx))
        beta = np.broadcast_to(beta, (h, w)).copy()

    airlight = rng.uniform(0.7, 0.95, 3)
    return HazeField.from_beta_depth(
        airlight,
        beta.reshape(1, 1, h, w),
        depth.reshape(1, 1, h, w),
    )


def make_scene(h, w, seed) -> Tensor:
    """Procedural clean image: color gradient background plus hard shapes."""
    rng = np.random.default_rng([seed, 7])
    corners = rng.uniform(0.1, 0.9, (2, 2, 3))
    fy = np.linspace(0.0, 1.0, h)[:, None, None]
    fx = np.linspace(0.0, 1.0, w)[None, :, None]
    img = (corners[0, 0] * (1 - fy) * (1 - fx) + corners[0, 1] * (1 - fy) * fx
           + corners[1, 0] * fy * (1 - fx) + corners[1, 1] * fy * fx)
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 0.95, 3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, h // 2), rng.integers(0, w // 2)
            dy, dx = rng.integers(h // 6, h // 2), rng.integers(w // 6, w // 2)
            mask = (yy >= y0) & (yy < y0 + dy) & (xx >= x0) & (xx < x0 + dx)
        else:
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            r = int(rng.integers(min(h, w) // 8, min(h, w) // 3))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img = np.where(mask[:, :, None], color, img)
    img = np.clip(img, 0.02, 0.98)
    return Tensor(img.transpose(2, 0, 1)[None].astype(np.float32))


def synth_pairs(count, h, w, seed, style="blobs"):
    """Deterministic (hazy, clean) tensor pairs for toy training runs."""
    pairs = []
    for i in range(count):
        clean = make_scene(h, w, seed * 1000 + i)
        field = make_nonhomogeneous_field(h, w, seed * 1000 + i, style)
        pairs.append((asm_synthesize(clean, field), clean))
    return pairs


# ---------------------------------------------------------------------------
# 8-bit images and gamma harmonization


class ImageU8:
    """Row-major 8-bit RGB raster."""

    def __init__(self, pixels):
        p = np.asarray(pixels)
        if p.dtype != np.uint8:
            raise DataError(f"pixels must be uint8, got {p.dtype}")
        if p.ndim != 3 or p.shape[2] != 3:
            raise ShapeError(f"pixels must be H,W,3, got {p.shape}")
        self.pixels = p

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


def to_tensor(img: ImageU8) -> Tensor:
    arr = img.pixels.astype(np.float32) / 255.0
    return Tensor(arr.transpose(2, 0, 1)[None])


def from_tensor(t: Tensor) -> ImageU8:
    """Quantize a 1,3,H,W tensor in [0,1] to 8 bits, rounding half up."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] != 3:
        raise ShapeError(f"expected 1,3,H,W tensor, got {arr.shape}")
    v = np.clip(arr[0].astype(np.float64), 0.0, 1.0)
    q = np.floor(v * 255.0 + 0.5).astype(np.uint8)
    return ImageU8(q.transpose(1, 2, 0))


class HarmonizeResult(NamedTuple):
    image: ImageU8
    gammas: np.ndarray
    clipped: tuple


def _channel_mean(values, gamma):
    return float(np.mean(255.0 * (values / 255.0) ** gamma))


def gamma_harmonize(image: ImageU8, target_channel_means) -> HarmonizeResult:
    """Per-channel power remap so channel means match the targets.

    The exponent is found by bisection on the continuous (pre-quantization)
    mean, which is strictly decreasing in gamma for any channel with mass
    strictly between 0 and 255; quantization then perturbs the mean by at
    most half a level.  Unreachable targets clamp gamma to the search bound
    and set the channel's `clipped` flag.
    """
    targets = np.asarray(target_channel_means, dtype=np.float64)
    if targets.shape != (3,):
        raise ShapeError("target means must be a 3-vector")
    if np.any(targets <= 0.0) or np.any(targets >= 255.0):
        raise DataError("target means must lie strictly inside (0, 255)")
    out = np.empty_like(image.pixels)
    gammas = np.empty(3)
    clipped = []
    for c in range(3):
        p = image.pixels[:, :, c].astype(np.float64)
        lo, hi = GAMMA_SEARCH_LO, GAMMA_SEARCH_HI
        target = targets[c]
        # mean is decreasing in gamma: lo gives the brightest remap
        if _channel_mean(p, lo) < target:
            g, clip = lo, True
        elif _channel_mean(p, hi) > target:
            g, clip = hi, True
        else:
            clip = False
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if _channel_mean(p, mid) >= target:
                    lo = mid
                else:
                    hi = mid
            g = 0.5 * (lo + hi)
        gammas[c] = g
        clipped.append(clip)
        remapped = 255.0 * (p / 255.0) ** g
        out[:, :, c] = np.floor(remapped + 0.5).astype(np.uint8)
    return HarmonizeResult(ImageU8(out), gammas, tuple(clipped))


# ---------------------------------------------------------------------------
# paired augmentation


def _apply_transform(arr, top, left, crop, rot, vflip, hflip):
    out = arr[:, :, top:top + crop, left:left + crop]
    out = np.rot90(out, rot, axes=(2, 3))
    if vflip:
        out = out[:, :, ::-1, :]
    if hflip:
        out = out[:, :, :, ::-1]
    return np.ascontiguousarray(out)


def augment(hazy: Tensor, clean: Tensor, crop: int, rng):
    """Identical random crop, right-angle rotation, and flips for the pair.

    Draw order is fixed (top, left, rotation, vertical flip, horizontal
    flip) so a seeded generator reproduces the transform exactly.
    """
    a, b = hazy.data, clean.data
    if a.shape != b.shape:
        raise ShapeError(f"pair shapes differ: {a.shape} vs {b.shape}")
    h, w = a.shape[2:]
    if crop < 1 or crop > min(h, w):
        raise DataError(f"crop {crop} invalid for {h}x{w} input")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    rot = int(rng.integers(0, 4))
    vflip = bool(rng.random() < 0.5)
    hflip = bool(rng.random() < 0.5)
    return (
        Tensor(_apply_transform(a, top, left, crop, rot, vflip, hflip)),
        Tensor(_apply_transform(b, top, left, crop, rot, vflip, hflip)),
    )


# ---------------------------------------------------------------------------
# image files


_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PNG_COLOR_TYPES = {0: "grayscale", 2: "RGB", 3: "palette",
                    4: "grayscale+alpha", 6: "RGBA"}


def _read_png(path):
    with open(path, "rb") as f:
        head = f.read(26)
    if len(head) < 26 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise DataError(f"{path}: not a PNG file")
    bit_depth, color_type = head[24], head[25]
    if bit_depth != 8:
        raise DataError(
            f"{path}: {bit_depth}-bit PNG unsupported (8-bit RGB only)"
        )
    if color_type != 2:
        kind = _PNG_COLOR_TYPES.get(color_type, f"type {color_type}")
        raise DataError(f"{path}: {kind} PNG unsupported (8-bit RGB only)")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageU8(arr)


def _read_ppm(path):
    with open(path, "rb") as f:
        blob = f.read()
    pos = 0
    fields = []
    while len(fields) < 4:
        if pos >= len(blob):
            raise DataError(f"{path}: truncated PPM header")
        ch = blob[pos:pos + 1]
        if ch == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(blob) and not blob[pos:pos + 1].isspace():
                pos += 1
            fields.append(blob[start:pos])
    pos += 1  # the single whitespace byte separating header and raster
    if fields[0] != b"P6":
        raise DataError(f"{path}: not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(v) for v in fields[1:])
    except ValueError:
        raise DataError(f"{path}: malformed PPM header fields {fields[1:]}")
    if maxval != 255:
        raise DataError(f"{path}: maxval {maxval} unsupported (8-bit only)")
    raster = blob[pos:pos + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise DataError(f"{path}: PPM raster truncated")
    return ImageU8(np.frombuffer(raster, np.uint8).reshape(h, w, 3))


def read_image(path) -> ImageU8:
    ext = os.path.splitext(str(path))[1].lower()
    try:
        if ext == ".png":
            return _read_png(path)
        if ext in (".ppm", ".pnm"):
            return _read_ppm(path)
    except OSError as exc:
        raise DataError(f"{path}: unreadable ({exc})")
    raise DataError(f"{path}: unsupported image format {ext!r} (png/ppm only)")


def write_image(path, img: ImageU8):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        Image.fromarray(img.pixels, "RGB").save(path)
    elif ext in (".ppm", ".pnm"):
        header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
        with open(path, "wb") as f:
            f.write(header + img.pixels.tobytes())
    else:
        raise DataError(f"{path}: unsupported image format {ext!r} (png/ppm only)")


# ---------------------------------------------------------------------------
# manifests and paired datasets


def read_manifest(path):
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(
                    f"{path}:{lineno}: expected 'hazy<TAB>clean', got {line!r}"
                )
            pairs.append((parts[0], parts[1]))
    return pairs


def write_manifest(path, pairs, comment=None):
    with open(path, "w", encoding="utf-8") as f:
        if comment:
            f.write(f"# {comment}\n")
        for hazy, clean in pairs:
            f.write(f"{hazy}\t{clean}\n")


class PairDataset:
    """Paths to (hazy, clean) pairs plus the augmentation policy.

    `fetch(i, draw)` derives its RNG from (seed, draw) alone, so any
    iteration order or prefetch schedule yields the same samples.
    """

    def __init__(self, pairs, root="", crop=None, augment_flag=True, seed=0):
        if not pairs:
            raise DataError("dataset has no pairs")
        self.pairs = list(pairs)
        self.root = root
        self.crop = crop
        self.augment_flag = augment_flag
        self.seed = seed

    @classmethod
    def from_manifest(cls, path, crop=None, augment_flag=True, seed=0):
        return cls(read_manifest(path), root=os.path.dirname(str(path)),
                   crop=crop, augment_flag=augment_flag, seed=seed)

    def __len__(self):
        return len(self.pairs)

    def path_pair(self, i):
        hazy, clean = self.pairs[i]
        return os.path.join(self.root, hazy), os.path.join(self.root, clean)

    def load_pair(self, i):
        hp, cp = self.path_pair(i)
        hazy, clean = read_image(hp), read_image(cp)
        if hazy.pixels.shape != clean.pixels.shape:
            raise DataError(
                f"pair {i}: dimensions differ ({hazy.pixels.shape} vs "
                f"{clean.pixels.shape})"
            )
        return to_tensor(hazy), to_tensor(clean)

    def fetch(self, i, draw):
        hazy, clean = self.load_pair(i)
        if not self.augment_flag:
            return hazy, clean
        crop = self.crop or min(hazy.shape[2:])
        rng = np.random.default_rng([self.seed, draw])
        return augment(hazy, clean, crop, rng)

    def name(self, i):
        return os.path.basename(self.pairs[i][0])


class TensorPairDataset:
    """In-memory (hazy, clean) tensor pairs with the PairDataset interface."""

    def __init__(self, pairs, crop=None, augment_flag=True, seed=0):
        if not pairs:
            raise DataError("dataset has no pairs")
        self.pairs = [(Tensor(h.data.copy()), Tensor(c.data.copy()))
                      for h, c in pairs]
        self.crop = crop
        self.augment_flag = augment_flag
        self.seed = seed

    def __len__(self):
        return len(self.pairs)

    def load_pair(self, i):
        hazy, clean = self.pairs[i]
        return Tensor(hazy.data.copy()), Tensor(clean.data.copy())

    def fetch(self, i, draw):
        hazy, clean = self.load_pair(i)
        if not self.augment_flag:
            return hazy, clean
        crop = self.crop or min(hazy.shape[2:])
        rng = np.random.default_rng([self.seed, draw])
        return augment(hazy, clean, crop, rng)

    def name(self, i):
        return f"pair_{i:04d}"
