"""Training loop, tiled inference, checkpointing, and batch evaluation.

Training math is single threaded and every random choice derives from the
run seed, so a rerun reproduces the loss trajectory bit for bit.
"""

from __future__ import annotations

import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import losses, tensor as T
from .errors import DataError, NumericError, ShapeError
from .losses import LossWeights, RandomFeatureNet, SsimConfig
from .tensor import Tape, Tensor, backward


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    milestones: tuple = (150, 250, 400)
    decay: float = 0.5
    total_steps: int = 500

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(a >= b for a, b in zip(ms, ms[1:])):
            raise DataError("milestones must be strictly increasing")
        if ms and ms[-1] >= self.total_steps:
            raise DataError("milestones must lie before total_steps")
        self.milestones = ms

    def lr_at(self, step):
        """Piecewise-constant schedule: halved at each milestone reached."""
        passed = sum(1 for m in self.milestones if m <= step)
        return self.lr0 * self.decay**passed


class Adam:
    """Adam with bias correction over a module's parameters.

    `step(k)` uses k (1-based, consecutive) both for the schedule and the
    bias correction, so restoring moments plus the step counter resumes the
    exact trajectory.  All gradients are checked finite before any update.
    """

    def __init__(self, module, cfg: OptimizerConfig = None):
        self.cfg = cfg or OptimizerConfig()
        self.named = list(module.named_params())
        self.m = OrderedDict(
            (n, np.zeros_like(p.value.data)) for n, p in self.named)
        self.v = OrderedDict(
            (n, np.zeros_like(p.value.data)) for n, p in self.named)

    def lr_at(self, step):
        return self.cfg.lr_at(step)

    def step(self, step_index):
        if step_index < 1:
            raise DataError("optimizer steps are 1-based")
        for name, p in self.named:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in {name}")
        lr = self.lr_at(step_index)
        b1, b2, eps = self.cfg.beta1, self.cfg.beta2, self.cfg.eps
        c1 = 1.0 - b1**step_index
        c2 = 1.0 - b2**step_index
        for name, p in self.named:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
            p.assign((p.value.data - update).astype(p.value.data.dtype))

    def state_tensors(self, prefix):
        out = OrderedDict()
        for name, _ in self.named:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state(self, prefix, tensors):
        for name, p in self.named:
            for kind, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{kind}.{name}"
                if key not in tensors:
                    raise DataError(f"checkpoint is missing {key}")
                arr = tensors[key]
                if arr.shape != p.value.data.shape:
                    raise DataError(
                        f"{key}: shape {arr.shape} does not match "
                        f"{p.value.data.shape}"
                    )
                store[name] = arr.astype(store[name].dtype)


# ---------------------------------------------------------------------------
# tiling


@dataclass
class TilePlan:
    h: int
    w: int
    tile_h: int
    tile_w: int
    rows: int
    cols: int
    row_offsets: tuple = field(default=())
    col_offsets: tuple = field(default=())

    @property
    def row_overlaps(self):
        return tuple(a + self.tile_h - b for a, b in
                     zip(self.row_offsets, self.row_offsets[1:]))

    @property
    def col_overlaps(self):
        return tuple(a + self.tile_w - b for a, b in
                     zip(self.col_offsets, self.col_offsets[1:]))

    def tiles(self):
        for r in self.row_offsets:
            for c in self.col_offsets:
                yield r, c


def _axis_offsets(dim, tile, grid, axis):
    if tile > dim:
        raise ShapeError(f"{axis} tile {tile} exceeds image extent {dim}")
    if tile * grid < dim:
        raise ShapeError(
            f"{axis}: {grid} tiles of {tile} cannot cover {dim}; "
            f"minimal feasible tile is {math.ceil(dim / grid)}"
        )
    if grid == 1:
        if tile != dim:
            raise ShapeError(
                f"{axis}: single tile must span the full extent {dim}, got {tile}"
            )
        return (0,)
    # even spacing, rounding half up; the last lands flush at dim - tile
    offs = tuple(int(math.floor(k * (dim - tile) / (grid - 1) + 0.5))
                 for k in range(grid))
    return offs


def plan_tiles(h, w, tile_h, tile_w, grid_rows, grid_cols) -> TilePlan:
    """Evenly spaced overlapping tile grid covering every pixel."""
    for v, name in ((h, "height"), (w, "width"), (tile_h, "tile height"),
                    (tile_w, "tile width"), (grid_rows, "grid rows"),
                    (grid_cols, "grid cols")):
        if v < 1:
            raise ShapeError(f"{name} must be positive, got {v}")
    rows = _axis_offsets(h, tile_h, grid_rows, "rows")
    cols = _axis_offsets(w, tile_w, grid_cols, "cols")
    plan = TilePlan(h, w, tile_h, tile_w, grid_rows, grid_cols, rows, cols)
    covered = np.zeros((h, w), dtype=bool)
    for r, c in plan.tiles():
        covered[r:r + tile_h, c:c + tile_w] = True
    if not covered.all():
        raise ShapeError("tile plan leaves uncovered pixels")
    return plan


def pad_to_multiple(arr, multiple):
    h, w = arr.shape[2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return arr, h, w
    padded = np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
    return padded, h, w


def model_stride(model):
    cfg = getattr(model, "config", None)
    return cfg.stride_requirement if cfg is not None else 1


def tiled_inference(model, image: Tensor, plan: TilePlan,
                    stride=None) -> Tensor:
    """Run the model per tile and average overlaps.

    Accumulation is 64-bit sum-then-divide, so tile order cannot affect the
    result and an identity model reproduces its input bit for bit.  Tiles
    whose dims break the model's stride requirement are reflect-padded and
    the output cropped back.
    """
    x = image.data
    if x.ndim != 4 or x.shape[0] != 1:
        raise ShapeError(f"tiled inference expects a 1,C,H,W image, got {x.shape}")
    if x.shape[2:] != (plan.h, plan.w):
        raise ShapeError(
            f"plan {plan.h}x{plan.w} does not match image {x.shape[2]}x{x.shape[3]}"
        )
    stride = model_stride(model) if stride is None else stride
    acc = None
    cnt = np.zeros((plan.h, plan.w), dtype=np.float64)
    for r, c in plan.tiles():
        tile = x[:, :, r:r + plan.tile_h, c:c + plan.tile_w]
        padded, th, tw = pad_to_multiple(tile, stride)
        out = model(Tensor(padded)).data[:, :, :th, :tw]
        if acc is None:
            acc = np.zeros((1, out.shape[1], plan.h, plan.w), dtype=np.float64)
        acc[:, :, r:r + th, c:c + tw] += out.astype(np.float64)
        cnt[r:r + th, c:c + tw] += 1.0
    merged = acc / cnt
    return Tensor(merged.astype(image.dtype))


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_MAGIC = b"DFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors):
    """Write named float32 tensors in the versioned binary layout."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            blob = name.encode("utf-8")
            a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
            if a.ndim > 255:
                raise ShapeError(f"{name}: too many dimensions to serialize")
            f.write(struct.pack("<H", len(blob)))
            f.write(blob)
            f.write(struct.pack("<B", a.ndim))
            for d in a.shape:
                f.write(struct.pack("<I", d))
            f.write(a.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    if len(blob) < 12:
        raise DataError(f"{path}: truncated checkpoint header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(
            f"{path}: checkpoint version {version} unsupported; this build "
            f"reads version {CHECKPOINT_VERSION} (re-save with a matching build)"
        )
    pos = 12
    tensors = OrderedDict()
    for i in range(count):
        where = f"tensor {i + 1}/{count}"
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            if len(blob) < pos + name_len:
                raise struct.error("short name")
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            where = f"tensor {name!r}"
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
            pos += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            raw = blob[pos:pos + 4 * size]
            if len(raw) != 4 * size:
                raise struct.error("short data")
            pos += 4 * size
        except struct.error:
            raise DataError(f"{path}: checkpoint truncated while reading {where}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return tensors


def module_state(module, prefix):
    out = OrderedDict()
    for name, p in module.named_params():
        out[f"{prefix}.param.{name}"] = p.value.data
    for name, b in module.named_buffers():
        out[f"{prefix}.buffer.{name}"] = b.value
    return out


def load_module_state(module, prefix, tensors, used=None):
    for name, p in module.named_params():
        key = f"{prefix}.param.{name}"
        if key not in tensors:
            raise DataError(f"checkpoint is missing {key}")
        arr = tensors[key]
        if arr.shape != p.value.data.shape:
            raise DataError(
                f"{key}: shape {arr.shape} does not match {p.value.data.shape}"
            )
        p.assign(arr.astype(p.value.data.dtype))
        if used is not None:
            used.add(key)
    for name, b in module.named_buffers():
        key = f"{prefix}.buffer.{name}"
        if key not in tensors:
            raise DataError(f"checkpoint is missing {key}")
        arr = tensors[key]
        if arr.shape != b.value.shape:
            raise DataError(
                f"{key}: shape {arr.shape} does not match {b.value.shape}"
            )
        b.value[...] = arr.astype(b.value.dtype)
        if used is not None:
            used.add(key)


def _encode_text(text):
    return np.frombuffer(text.encode("utf-8"), np.uint8).astype(np.float32)


def _decode_text(arr):
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def config_signature(cfg):
    pairs = sorted(vars(cfg).items())
    return ";".join(f"{k}={v}" for k, v in pairs)


def training_state(gen, disc, opt_gen, opt_disc, step):
    tensors = OrderedDict()
    tensors["meta.step"] = np.array([float(step)], dtype=np.float32)
    tensors["meta.config"] = _encode_text(config_signature(gen.config))
    tensors.update(module_state(gen, "gen"))
    tensors.update(module_state(disc, "disc"))
    tensors.update(opt_gen.state_tensors("optg"))
    tensors.update(opt_disc.state_tensors("optd"))
    return tensors


def restore_training_state(path, gen, disc=None, opt_gen=None, opt_disc=None):
    """Load a checkpoint into existing models/optimizers; returns the step.

    Components passed as None (e.g. no discriminator for inference) leave
    their tensors unread but accounted for.  Every tensor in the file must
    belong to a known section; unknown names mean the file was written for
    a different topology and are reported explicitly.
    """
    tensors = load_checkpoint(path)
    for key in ("meta.step", "meta.config"):
        if key not in tensors:
            raise DataError(f"{path}: checkpoint is missing {key}")
    stored = _decode_text(tensors["meta.config"])
    current = config_signature(gen.config)
    if stored != current:
        raise DataError(
            f"{path}: checkpoint was written for a different model "
            f"configuration ({stored}) than the target ({current})"
        )
    used = {"meta.step", "meta.config"}
    load_module_state(gen, "gen", tensors, used)
    if disc is not None:
        load_module_state(disc, "disc", tensors, used)
    else:
        used.update(k for k in tensors if k.startswith("disc."))
    for opt, prefix in ((opt_gen, "optg"), (opt_disc, "optd")):
        if opt is not None:
            opt.load_state(prefix, tensors)
        used.update(k for k in tensors if k.startswith(f"{prefix}."))
    unknown = sorted(set(tensors) - used)
    if unknown:
        raise DataError(
            f"{path}: checkpoint holds unknown tensors: {', '.join(unknown)}"
        )
    return int(tensors["meta.step"][0])


def checkpoint_config(path):
    """Recover the ModelConfig echoed into a checkpoint."""
    import ast

    from .network import ModelConfig

    tensors = load_checkpoint(path)
    if "meta.config" not in tensors:
        raise DataError(f"{path}: checkpoint is missing meta.config")
    fields = {}
    for part in _decode_text(tensors["meta.config"]).split(";"):
        key, _, raw = part.partition("=")
        try:
            fields[key] = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            fields[key] = raw
    try:
        return ModelConfig(**fields)
    except TypeError as exc:
        raise DataError(f"{path}: malformed config echo ({exc})")


# ---------------------------------------------------------------------------
# training


LOG_COLUMNS = ("step", "lr", "l1", "msssim", "perc", "adv", "total", "psnr_eval")


def format_log_rows(history):
    lines = [",".join(LOG_COLUMNS)]
    for row in history:
        cells = [str(row["step"]), f"{row['lr']:.10g}"]
        for key in ("l1", "msssim", "perc", "adv", "total"):
            cells.append(f"{row[key]:.8f}")
        p = row["psnr_eval"]
        cells.append("" if p is None else f"{p:.4f}")
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_log(path, history):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_log_rows(history))


def _batch(pairs):
    hazy = np.concatenate([h.data for h, _ in pairs], axis=0)
    clean = np.concatenate([c.data for _, c in pairs], axis=0)
    return Tensor(hazy), Tensor(clean)


def mean_dataset_psnr(model, dataset):
    """Mean PSNR of the model's outputs over un-augmented pairs."""
    was_training = model.training
    model.eval()
    try:
        total = 0.0
        for i in range(len(dataset)):
            hazy, clean = dataset.load_pair(i)
            total += losses.psnr(model(hazy), clean)
        return total / len(dataset)
    finally:
        model.set_training(was_training)


def train(gen, disc, dataset, steps, *, seed=0, weights=None, ssim_cfg=None,
          feature_net=None, opt_gen=None, opt_disc=None, batch_size=2,
          eval_every=100, start_step=0, on_step=None):
    """Alternating generator/discriminator updates; returns the history.

    One discriminator update follows each generator update.  Batch indices
    derive from (seed, step) and augmentations from the dataset's own
    (seed, draw) stream, so a fixed seed fixes the whole trajectory.
    A non-finite loss or gradient raises NumericError; the caller decides
    what to do with the last finished state.
    """
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    weights = weights or LossWeights()
    ssim_cfg = ssim_cfg or SsimConfig()
    feature_net = feature_net or RandomFeatureNet()
    opt_gen = opt_gen or Adam(gen)
    opt_disc = opt_disc or Adam(disc)
    gen.train()
    disc.train()
    history = []
    for s in range(start_step + 1, start_step + steps + 1):
        step_rng = np.random.default_rng([seed, 13, s])
        idx = step_rng.integers(0, len(dataset), size=batch_size)
        draws = [(s - 1) * batch_size + j for j in range(batch_size)]
        hazy, clean = _batch([dataset.fetch(int(i), d)
                              for i, d in zip(idx, draws)])

        with Tape() as tape:
            fake = gen(hazy)
            d_fake_for_g = disc(fake)
            total, parts = losses.total_loss(
                fake, clean, feature_net, d_fake_for_g, weights, ssim_cfg)
            if not math.isfinite(parts["total"]):
                raise NumericError(f"non-finite generator loss at step {s}")
            backward(total)
            gen.zero_grad()
            gen.collect_grads(tape)
        opt_gen.step(s)

        fake_frozen = Tensor(fake.data.copy())
        with Tape() as tape:
            d_real = disc(clean)
            d_fake = disc(fake_frozen)
            _, d_loss = losses.adversarial_losses(d_real, d_fake, d_fake)
            if not math.isfinite(d_loss.item()):
                raise NumericError(f"non-finite discriminator loss at step {s}")
            backward(d_loss)
            disc.zero_grad()
            disc.collect_grads(tape)
        opt_disc.step(s)

        row = {"step": s, "lr": opt_gen.lr_at(s), "psnr_eval": None}
        row.update(parts)
        if eval_every and (s % eval_every == 0 or s == start_step + steps):
            row["psnr_eval"] = mean_dataset_psnr(gen, dataset)
        history.append(row)
        if on_step is not None:
            on_step(row)
    return history


# ---------------------------------------------------------------------------
# evaluation


class EvalReport:
    def __init__(self, rows, mean_psnr, mean_ssim, skipped):
        self.rows = rows
        self.mean_psnr = mean_psnr
        self.mean_ssim = mean_ssim
        self.skipped = skipped

    def lines(self):
        out = list(self.rows)
        out.append(losses.metric_report_line("mean", self.mean_psnr,
                                             self.mean_ssim))
        if self.skipped:
            out.append(f"# skipped {self.skipped} unreadable pair(s)")
        return out


def evaluate(model, dataset, plan: TilePlan = None) -> EvalReport:
    """Per-image and mean PSNR/SSIM in the tab-separated report format."""
    rows = []
    psnrs = []
    ssims = []
    skipped = 0
    for i in range(len(dataset)):
        try:
            hazy, clean = dataset.load_pair(i)
        except DataError:
            skipped += 1
            continue
        if plan is not None:
            out = tiled_inference(model, hazy, plan)
        else:
            out = model(hazy)
        p = losses.psnr(out, clean)
        s = losses.ssim(out, clean)
        psnrs.append(p)
        ssims.append(s)
        rows.append(losses.metric_report_line(dataset.name(i), p, s))
    if not rows:
        raise DataError("no evaluable pairs in the dataset")
    return EvalReport(rows, sum(psnrs) / len(psnrs), sum(ssims) / len(ssims),
                      skipped)
