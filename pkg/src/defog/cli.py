"""Command-line front end: synthesis, training, inference, diagnostics.

Options resolve in three layers: hard defaults, then a flat key=value
config file given with --config, then explicit flags.  Flags win.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import engine, losses, reference, tensor as T, wavelet
from .data import (
    FIELD_STYLES,
    PairDataset,
    from_tensor,
    gamma_harmonize,
    read_image,
    synth_pairs,
    to_tensor,
    write_image,
    write_manifest,
)
from .errors import DataError, NumericError, ShapeError
from .fft import SpectralTransform, irfft2, rfft2
from .network import Discriminator, Generator, ModelConfig, describe
from .tensor import Tensor
from .wavelet import dwt2, idwt2

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flags, bad config keys, unparseable option values."""


# ---------------------------------------------------------------------------
# option table

class Opt:
    """One option: flag name, string-to-value converter, default."""

    def __init__(self, name, conv, default=None, required=False, help=""):
        self.name = name
        self.conv = conv
        self.default = default
        self.required = required
        self.help = help

    @property
    def dest(self):
        return self.name.replace("-", "_")


def _int(s):
    try:
        return int(s)
    except ValueError:
        raise UsageError(f"expected an integer, got {s!r}")


def _pos_int(s):
    v = _int(s)
    if v <= 0:
        raise UsageError(f"expected a positive integer, got {s!r}")
    return v


def _str(s):
    return s


def _choice(*allowed):
    def conv(s):
        if s not in allowed:
            raise UsageError(f"expected one of {', '.join(allowed)}; got {s!r}")
        return s
    return conv


def _size(s):
    """'HxW' -> (h, w)."""
    parts = s.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"expected HxW (e.g. 64x64), got {s!r}")
    return (_pos_int(parts[0]), _pos_int(parts[1]))


def _grid(s):
    """'RxC' -> (rows, cols)."""
    parts = s.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"expected RxC (e.g. 3x3), got {s!r}")
    return (_pos_int(parts[0]), _pos_int(parts[1]))


def _targets(s):
    parts = s.split(",")
    if len(parts) != 3:
        raise UsageError(f"expected three comma-separated means r,g,b, got {s!r}")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"expected numeric channel means, got {s!r}")
    return vals


COMMANDS = {
    "synth": ("generate paired hazy/clean images plus a manifest", [
        Opt("out", _str, required=True, help="output directory"),
        Opt("count", _pos_int, 4, help="number of pairs"),
        Opt("size", _size, (64, 64), help="image size HxW"),
        Opt("style", _choice(*FIELD_STYLES), "blobs", help="haze field style"),
        Opt("seed", _int, 0, help="random seed"),
    ]),
    "train": ("train a generator/discriminator pair on a paired manifest", [
        Opt("data", _str, required=True, help="manifest file of hazy<TAB>clean paths"),
        Opt("preset", _choice("toy", "full"), "toy", help="model size preset"),
        Opt("steps", _pos_int, 500, help="optimizer steps to run"),
        Opt("seed", _int, 0, help="random seed"),
        Opt("out", _str, "model.ckpt", help="checkpoint path to write"),
        Opt("resume", _str, None, help="checkpoint to continue from"),
        Opt("log", _str, None, help="CSV log path (default: <out>.csv)"),
        Opt("batch", _pos_int, 2, help="batch size"),
        Opt("crop", _pos_int, None, help="augmentation crop size"),
        Opt("augment", _choice("on", "off"), "on", help="random crop/rot/flip"),
        Opt("eval-every", _pos_int, 100, help="PSNR eval cadence in steps"),
    ]),
    "dehaze": ("run a trained model on one image", [
        Opt("model", _str, required=True, help="checkpoint path"),
        Opt("in", _str, required=True, help="input image (png or ppm)"),
        Opt("out", _str, required=True, help="output image path"),
        Opt("tile", _size, None, help="tile size HxW for block-based inference"),
        Opt("grid", _grid, None, help="tile grid RxC (requires --tile)"),
    ]),
    "eval": ("report per-image and mean PSNR/SSIM over a paired manifest", [
        Opt("model", _str, required=True, help="checkpoint path"),
        Opt("data", _str, required=True, help="manifest file"),
        Opt("tile", _size, None, help="tile size HxW"),
        Opt("grid", _grid, None, help="tile grid RxC (requires --tile)"),
    ]),
    "harmonize": ("gamma-correct every image in a directory to target channel means", [
        Opt("in", _str, required=True, help="input directory"),
        Opt("targets", _targets, required=True, help="target channel means r,g,b"),
        Opt("out", _str, required=True, help="output directory"),
    ]),
    "describe": ("print the module tree of a model preset", [
        Opt("preset", _choice("toy", "full"), "toy", help="model size preset"),
    ]),
    "selftest": ("run the built-in numeric invariant suite", []),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="defog", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command")
    for name, (help_text, opts) in COMMANDS.items():
        sub = subs.add_parser(name, help=help_text)
        sub.add_argument("--config", default=None,
                         help="flat key=value option file; flags override it")
        for o in opts:
            sub.add_argument(f"--{o.name}", default=None, help=o.help)
    return parser


def _read_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}")
    vals = {}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{ln}: expected key=value, got {stripped!r}")
        key, _, value = stripped.partition("=")
        vals[key.strip()] = value.strip()
    return vals


def _resolve(opts, args, file_vals):
    """Merge defaults, config-file values, and flags; flags win."""
    known = {o.name for o in opts}
    unknown = sorted(set(file_vals) - known)
    if unknown:
        valid = ", ".join(sorted(known)) if known else "(none)"
        raise UsageError(
            f"unknown config key(s) {', '.join(unknown)}; valid keys: {valid}")
    out = {}
    for o in opts:
        raw = getattr(args, o.dest)
        if raw is None:
            raw = file_vals.get(o.name)
        if raw is None:
            if o.required:
                raise UsageError(f"--{o.name} is required")
            out[o.dest] = o.default
        else:
            out[o.dest] = o.conv(raw)
    return out


# ---------------------------------------------------------------------------
# shared helpers

def _preset_config(preset):
    return ModelConfig.toy() if preset == "toy" else ModelConfig.full()


def _load_model(path):
    """Rebuild the generator stored in a checkpoint, in eval mode."""
    cfg = engine.checkpoint_config(path)
    gen = Generator(cfg, seed=0)
    engine.restore_training_state(path, gen)
    gen.eval()
    return gen


def _forward_padded(model, x):
    """Direct forward; reflect-pads to the model's stride and crops back."""
    stride = engine.model_stride(model)
    arr, h, w = engine.pad_to_multiple(x.data, stride)
    y = model(Tensor(arr))
    return Tensor(np.ascontiguousarray(y.data[:, :, :h, :w]))


def _tile_plan(vals, h, w):
    """Build a TilePlan from --tile/--grid, or None if neither is set."""
    tile, grid = vals["tile"], vals["grid"]
    if (tile is None) != (grid is None):
        raise UsageError("--tile and --grid must be given together")
    if tile is None:
        return None
    return engine.plan_tiles(h, w, tile[0], tile[1], grid[0], grid[1])


def scaled_milestones(total_steps):
    """Decay points at 30/50/80 percent of the run, matching the
    reference schedule's 150/250/400-of-500 proportions."""
    marks = sorted({round(total_steps * r) for r in (0.3, 0.5, 0.8)})
    return tuple(m for m in marks if 0 < m < total_steps)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(vals):
    h, w = vals["size"]
    out = vals["out"]
    os.makedirs(out, exist_ok=True)
    pairs = synth_pairs(vals["count"], h, w, vals["seed"], vals["style"])
    rows = []
    for i, (hazy, clean) in enumerate(pairs):
        hazy_name = f"hazy_{i:04d}.png"
        clean_name = f"clean_{i:04d}.png"
        write_image(os.path.join(out, hazy_name), from_tensor(hazy))
        write_image(os.path.join(out, clean_name), from_tensor(clean))
        rows.append((hazy_name, clean_name))
    manifest = os.path.join(out, "manifest.txt")
    write_manifest(manifest, rows,
                   comment=f"style={vals['style']} seed={vals['seed']} size={h}x{w}")
    print(f"wrote {2 * len(rows)} images and {manifest}")
    return EXIT_OK


def cmd_train(vals):
    dataset = PairDataset.from_manifest(
        vals["data"], crop=vals["crop"],
        augment_flag=vals["augment"] == "on", seed=vals["seed"])
    if len(dataset) == 0:
        raise DataError("manifest lists no pairs")

    resume = vals["resume"]
    start = 0
    if resume:
        cfg = engine.checkpoint_config(resume)
        start = int(engine.load_checkpoint(resume)["meta.step"][0])
    else:
        cfg = _preset_config(vals["preset"])
    gen = Generator(cfg, seed=vals["seed"])
    disc = Discriminator(seed=vals["seed"] + 1)

    total = start + vals["steps"]
    opt_cfg = engine.OptimizerConfig(milestones=scaled_milestones(total),
                                     total_steps=total)
    opt_gen = engine.Adam(gen, opt_cfg)
    opt_disc = engine.Adam(disc, opt_cfg)
    if resume:
        engine.restore_training_state(resume, gen, disc, opt_gen, opt_disc)
        print(f"resumed from {resume} at step {start}")

    h0, w0 = dataset.load_pair(0)[0].shape[2:]
    if vals["augment"] == "on":
        side = vals["crop"] or min(h0, w0)
        view = (side, side)
    else:
        view = (h0, w0)
    scales = min(3, losses.max_scales(*view))
    if scales < 1:
        raise DataError(f"training views of {view[0]}x{view[1]} are too small "
                        "for the similarity window")
    if scales < 3:
        print(f"note: {view[0]}x{view[1]} views support {scales} similarity scale(s)")

    log_path = vals["log"] or vals["out"] + ".csv"
    seen = []

    def record(row):
        seen.append(row)
        step = row["step"]
        if step % 50 == 0 or step == start + 1 or step == total:
            extra = "" if row["psnr_eval"] is None else f"  psnr {row['psnr_eval']:.3f}"
            print(f"step {step}  lr {row['lr']:.2e}  total {row['total']:.6f}{extra}")

    try:
        engine.train(gen, disc, dataset, vals["steps"], seed=vals["seed"],
                     ssim_cfg=losses.SsimConfig(scales=scales),
                     opt_gen=opt_gen, opt_disc=opt_disc,
                     batch_size=vals["batch"], eval_every=vals["eval_every"],
                     start_step=start, on_step=record)
    except NumericError:
        # keep the last finished step's weights so the run can be inspected
        reached = start + len(seen)
        engine.save_checkpoint(
            vals["out"], engine.training_state(gen, disc, opt_gen, opt_disc, reached))
        if seen:
            engine.write_log(log_path, seen)
        print(f"halted; checkpoint at step {reached} retained in {vals['out']}",
              file=sys.stderr)
        raise
    engine.save_checkpoint(
        vals["out"], engine.training_state(gen, disc, opt_gen, opt_disc, total))
    engine.write_log(log_path, seen)
    print(f"trained to step {total}; wrote {vals['out']} and {log_path}")
    return EXIT_OK


def cmd_dehaze(vals):
    gen = _load_model(vals["model"])
    x = to_tensor(read_image(vals["in"]))
    plan = _tile_plan(vals, x.shape[2], x.shape[3])
    if plan is None:
        y = _forward_padded(gen, x)
    else:
        y = engine.tiled_inference(gen, x, plan)
    write_image(vals["out"], from_tensor(y))
    print(f"wrote {vals['out']}")
    return EXIT_OK


def cmd_eval(vals):
    gen = _load_model(vals["model"])
    dataset = PairDataset.from_manifest(vals["data"], augment_flag=False)
    plan = None
    if vals["tile"] is not None or vals["grid"] is not None:
        h0, w0 = dataset.load_pair(0)[0].shape[2:]
        plan = _tile_plan(vals, h0, w0)
    report = engine.evaluate(gen, dataset, plan)
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_harmonize(vals):
    src = vals["in"]
    try:
        names = sorted(n for n in os.listdir(src)
                       if n.lower().endswith((".png", ".ppm")))
    except OSError as exc:
        raise DataError(f"cannot list {src}: {exc}")
    if not names:
        raise DataError(f"no .png or .ppm images in {src}")
    os.makedirs(vals["out"], exist_ok=True)
    for name in names:
        result = gamma_harmonize(read_image(os.path.join(src, name)),
                                 vals["targets"])
        write_image(os.path.join(vals["out"], name), result.image)
        g = result.gammas
        line = f"{name}\tgamma={g[0]:.4f},{g[1]:.4f},{g[2]:.4f}"
        if any(result.clipped):
            line += "\t(clipped)"
        print(line)
    return EXIT_OK


def cmd_describe(vals):
    print(describe(Generator(_preset_config(vals["preset"]), seed=0)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest

def _check_wavelet_roundtrip(rng):
    for _ in range(20):
        h, w = rng.integers(1, 17, size=2) * 2
        x = rng.standard_normal((1, 2, h, w)).astype(np.float32)
        back = idwt2(dwt2(Tensor(x))).data
        err = np.abs(back - x).max()
        if err > 1e-5:
            raise AssertionError(f"reconstruction error {err:.3g} at {h}x{w}")


def _check_wavelet_conv_oracle(rng):
    x = rng.standard_normal((1, 3, 8, 8))
    w = wavelet.analysis_conv_weight(3, dtype=np.float64)
    conv = T.conv2d(Tensor(x), Tensor(w), stride=2, groups=3).data
    bands = dwt2(Tensor(x))
    for i, band in enumerate(bands):
        want = conv[:, i::4]
        if not np.array_equal(band.data, want):
            raise AssertionError(f"band {i} differs from the filter-bank conv")


def _check_fft_naive(rng):
    x = rng.standard_normal((1, 1, 7, 6)).astype(np.float32)
    grid = rfft2(Tensor(x))
    want = reference.naive_dft2(x[0, 0].astype(np.float64))[:, : grid.re.shape[3]]
    scale = max(np.abs(want).max(), 1.0)
    err = max(np.abs(grid.re.data[0, 0] - want.real).max(),
              np.abs(grid.im.data[0, 0] - want.imag).max()) / scale
    if err > 1e-4:
        raise AssertionError(f"spectrum differs from naive DFT by {err:.3g}")


def _check_fft_roundtrip(rng):
    x = rng.standard_normal((1, 2, 12, 10)).astype(np.float32)
    back = irfft2(rfft2(Tensor(x))).data
    err = np.abs(back - x).max() / max(np.abs(x).max(), 1.0)
    if err > 1e-4:
        raise AssertionError(f"round-trip error {err:.3g}")


def _check_conv_gradient(rng):
    x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)) * 0.3, requires_grad=True)
    T.gradcheck(lambda: T.sum_all(T.conv2d(x, w, stride=1, padding=1)),
                [x, w], n_probes=8, rng=rng)


def _check_spectral_gradient(rng):
    st = SpectralTransform(2, np.random.default_rng(0))
    for _, p in st.named_params():
        p.assign(p.value.data.astype(np.float64))
    x = Tensor(rng.standard_normal((1, 2, 8, 8)), requires_grad=True)
    T.gradcheck(lambda: T.sum_all(st(x)),
                [x] + [p.value for _, p in st.named_params()],
                n_probes=6, rng=rng)


def _check_tiling_identity(rng):
    x = Tensor(rng.standard_normal((1, 3, 37, 53)).astype(np.float32))
    plan = engine.plan_tiles(37, 53, 16, 20, 3, 4)
    y = engine.tiled_inference(lambda t: t, x, plan)
    if not np.array_equal(y.data, x.data):
        raise AssertionError("overlap-averaged identity is not exact")


def _check_loss_assembly(rng):
    one = Tensor(np.ones((1,), np.float32))
    total = losses.combine_terms(one, one, one, one).item()
    if total != np.float32(1.2105):
        raise AssertionError(f"unit terms combine to {total!r}, want 1.2105")


def cmd_selftest(vals):
    checks = [
        ("wavelet-roundtrip", _check_wavelet_roundtrip),
        ("wavelet-conv-oracle", _check_wavelet_conv_oracle),
        ("fft-vs-naive-dft", _check_fft_naive),
        ("fft-roundtrip", _check_fft_roundtrip),
        ("conv-gradient", _check_conv_gradient),
        ("spectral-gradient", _check_spectral_gradient),
        ("tiling-identity", _check_tiling_identity),
        ("loss-assembly", _check_loss_assembly),
    ]
    failures = 0
    for name, fn in checks:
        try:
            fn(np.random.default_rng(0))
        except Exception as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"ok   {name}")
    if failures:
        print(f"{failures} of {len(checks)} checks failed", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "dehaze": cmd_dehaze,
    "eval": cmd_eval,
    "harmonize": cmd_harmonize,
    "describe": cmd_describe,
    "selftest": cmd_selftest,
}


def run(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return EXIT_USAGE
    opts = COMMANDS[args.command][1]
    file_vals = _read_config(args.config) if args.config else {}
    vals = _resolve(opts, args, file_vals)
    return HANDLERS[args.command](vals)


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    try:
        return run(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
