import os
import subprocess
import sys

import numpy as np
import pytest

from defog import cli, engine
from defog.data import ImageU8, read_image, write_image
from defog.errors import NumericError

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "describe_toy.txt")


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synthesized pairs plus a one-step checkpoint, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    code = run_cli("synth", "--out", str(data), "--count", "2",
                   "--size", "32x32", "--seed", "0")
    assert code == 0
    ckpt = root / "tiny.ckpt"
    code = run_cli("train", "--data", str(data / "manifest.txt"),
                   "--steps", "1", "--out", str(ckpt), "--seed", "0")
    assert code == 0
    return root


class TestParsing:
    def test_unknown_command_is_usage_error(self, capsys):
        assert run_cli("frobnicate") == 1
        assert "invalid choice" in capsys.readouterr().err

    def test_no_command_prints_help(self, capsys):
        assert run_cli() == 1
        assert "synth" in capsys.readouterr().out

    def test_missing_required_flag(self, capsys):
        assert run_cli("synth") == 1
        assert "--out is required" in capsys.readouterr().err

    def test_bad_integer(self, capsys):
        assert run_cli("synth", "--out", "x", "--count", "two") == 1
        assert "integer" in capsys.readouterr().err

    def test_bad_size(self, capsys):
        assert run_cli("synth", "--out", "x", "--size", "64") == 1
        assert "HxW" in capsys.readouterr().err

    def test_bad_style(self, capsys):
        assert run_cli("synth", "--out", "x", "--style", "plaid") == 1
        assert "homogeneous" in capsys.readouterr().err

    def test_tile_requires_grid(self, workdir, capsys):
        code = run_cli("dehaze", "--model", str(workdir / "tiny.ckpt"),
                       "--in", str(workdir / "data" / "hazy_0000.png"),
                       "--out", str(workdir / "x.png"), "--tile", "16x16")
        assert code == 1
        assert "together" in capsys.readouterr().err

    def test_bad_targets(self, capsys):
        assert run_cli("harmonize", "--in", "a", "--out", "b",
                       "--targets", "128,128") == 1
        assert "r,g,b" in capsys.readouterr().err


class TestConfigFile:
    def test_file_values_apply(self, tmp_path):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("count=1\nsize=16x16\n# comment\n\n")
        out = tmp_path / "d"
        assert run_cli("synth", "--config", str(cfg), "--out", str(out)) == 0
        images = [n for n in os.listdir(out) if n.endswith(".png")]
        assert len(images) == 2

    def test_flags_override_file(self, tmp_path):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("count=5\n")
        out = tmp_path / "d"
        assert run_cli("synth", "--config", str(cfg), "--out", str(out),
                       "--count", "1", "--size", "16x16") == 0
        images = [n for n in os.listdir(out) if n.endswith(".png")]
        assert len(images) == 2

    def test_unknown_key_lists_valid_ones(self, tmp_path, capsys):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("quality=high\n")
        assert run_cli("synth", "--config", str(cfg), "--out", "x") == 1
        err = capsys.readouterr().err
        assert "quality" in err and "count" in err and "style" in err

    def test_malformed_line_names_position(self, tmp_path, capsys):
        cfg = tmp_path / "synth.cfg"
        cfg.write_text("count=1\nnonsense\n")
        assert run_cli("synth", "--config", str(cfg), "--out", "x") == 1
        assert ":2:" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert run_cli("synth", "--config", str(tmp_path / "no.cfg"),
                       "--out", "x") == 1
        assert "cannot read" in capsys.readouterr().err


class TestSynth:
    def test_count_and_manifest(self, tmp_path):
        out = tmp_path / "d"
        assert run_cli("synth", "--out", str(out), "--count", "3",
                       "--size", "16x16") == 0
        names = sorted(os.listdir(out))
        assert names == ["clean_0000.png", "clean_0001.png", "clean_0002.png",
                         "hazy_0000.png", "hazy_0001.png", "hazy_0002.png",
                         "manifest.txt"]
        lines = (out / "manifest.txt").read_text().splitlines()
        assert lines[0].startswith("# style=blobs")
        assert len([l for l in lines if l and not l.startswith("#")]) == 3

    def test_same_seed_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run_cli("synth", "--out", str(out), "--count", "1",
                           "--size", "16x16", "--seed", "7") == 0
        assert (a / "hazy_0000.png").read_bytes() == (b / "hazy_0000.png").read_bytes()
        assert (a / "clean_0000.png").read_bytes() == (b / "clean_0000.png").read_bytes()

    def test_style_tag_reflects_flag(self, tmp_path):
        out = tmp_path / "d"
        assert run_cli("synth", "--out", str(out), "--count", "1",
                       "--size", "16x16", "--style", "homogeneous") == 0
        assert "style=homogeneous" in (out / "manifest.txt").read_text()


class TestTrain:
    def test_writes_checkpoint_and_log(self, workdir):
        ckpt = workdir / "tiny.ckpt"
        assert ckpt.exists()
        log = workdir / "tiny.ckpt.csv"
        lines = log.read_text().splitlines()
        assert lines[0] == "step,lr,l1,msssim,perc,adv,total,psnr_eval"
        assert lines[1].startswith("1,0.0001,")

    def test_checkpoint_recovers_preset(self, workdir):
        cfg = engine.checkpoint_config(str(workdir / "tiny.ckpt"))
        assert cfg.preset == "toy"

    def test_resume_continues_step_counter(self, workdir, tmp_path):
        out = tmp_path / "resumed.ckpt"
        code = run_cli("train", "--data", str(workdir / "data" / "manifest.txt"),
                       "--steps", "1", "--resume", str(workdir / "tiny.ckpt"),
                       "--out", str(out), "--seed", "0")
        assert code == 0
        lines = (tmp_path / "resumed.ckpt.csv").read_text().splitlines()
        assert lines[1].startswith("2,")
        tensors = engine.load_checkpoint(str(out))
        assert int(tensors["meta.step"][0]) == 2

    def test_numeric_halt_retains_checkpoint(self, workdir, tmp_path,
                                             monkeypatch, capsys):
        def explode(*args, **kwargs):
            for _ in range(2):
                kwargs["on_step"]({"step": 1, "lr": 1e-4, "l1": 0.1,
                                   "msssim": 0.1, "perc": 0.1, "adv": 0.1,
                                   "total": 0.1, "psnr_eval": None})
            raise NumericError("non-finite generator loss at step 3")

        monkeypatch.setattr(cli.engine, "train", explode)
        out = tmp_path / "halted.ckpt"
        code = run_cli("train", "--data", str(workdir / "data" / "manifest.txt"),
                       "--steps", "5", "--out", str(out))
        assert code == 3
        assert "non-finite" in capsys.readouterr().err
        assert int(engine.load_checkpoint(str(out))["meta.step"][0]) == 2
        assert (tmp_path / "halted.ckpt.csv").exists()

    def test_empty_manifest_is_data_error(self, tmp_path, capsys):
        manifest = tmp_path / "m.txt"
        manifest.write_text("# nothing here\n")
        assert run_cli("train", "--data", str(manifest)) == 2


class TestDehaze:
    def test_direct_forward(self, workdir, tmp_path):
        out = tmp_path / "out.png"
        code = run_cli("dehaze", "--model", str(workdir / "tiny.ckpt"),
                       "--in", str(workdir / "data" / "hazy_0000.png"),
                       "--out", str(out))
        assert code == 0
        img = read_image(str(out))
        assert img.pixels.shape == (32, 32, 3)

    def test_tiled_matches_image_size(self, workdir, tmp_path):
        out = tmp_path / "tiled.png"
        code = run_cli("dehaze", "--model", str(workdir / "tiny.ckpt"),
                       "--in", str(workdir / "data" / "hazy_0000.png"),
                       "--out", str(out), "--tile", "24x24", "--grid", "2x2")
        assert code == 0
        assert read_image(str(out)).pixels.shape == (32, 32, 3)

    def test_deterministic_output(self, workdir, tmp_path):
        outs = []
        for name in ("a.png", "b.png"):
            out = tmp_path / name
            assert run_cli("dehaze", "--model", str(workdir / "tiny.ckpt"),
                           "--in", str(workdir / "data" / "hazy_0000.png"),
                           "--out", str(out)) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_missing_input_is_data_error(self, workdir, tmp_path, capsys):
        assert run_cli("dehaze", "--model", str(workdir / "tiny.ckpt"),
                       "--in", str(tmp_path / "no.png"),
                       "--out", str(tmp_path / "o.png")) == 2


class TestEval:
    def test_report_format(self, workdir, capsys):
        code = run_cli("eval", "--model", str(workdir / "tiny.ckpt"),
                       "--data", str(workdir / "data" / "manifest.txt"))
        assert code == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("hazy_0000.png\tPSNR=")
        assert lines[-1].startswith("mean\tPSNR=")

    def test_missing_manifest_is_data_error(self, workdir, tmp_path):
        assert run_cli("eval", "--model", str(workdir / "tiny.ckpt"),
                       "--data", str(tmp_path / "no.txt")) == 2


class TestHarmonize:
    def test_constant_gray_reports_known_gamma(self, tmp_path, capsys):
        src, dst = tmp_path / "in", tmp_path / "out"
        os.makedirs(src)
        write_image(str(src / "gray.png"),
                    ImageU8(np.full((8, 8, 3), 64, np.uint8)))
        code = run_cli("harmonize", "--in", str(src), "--out", str(dst),
                       "--targets", "128,128,128")
        assert code == 0
        assert "gray.png\tgamma=0.4986,0.4986,0.4986" in capsys.readouterr().out
        result = read_image(str(dst / "gray.png"))
        assert abs(result.pixels.astype(np.float64).mean() - 128.0) <= 0.5

    def test_unreachable_target_is_flagged(self, tmp_path, capsys):
        src, dst = tmp_path / "in", tmp_path / "out"
        os.makedirs(src)
        write_image(str(src / "black.png"), ImageU8(np.zeros((4, 4, 3), np.uint8)))
        assert run_cli("harmonize", "--in", str(src), "--out", str(dst),
                       "--targets", "128,128,128") == 0
        assert "(clipped)" in capsys.readouterr().out

    def test_empty_directory_is_data_error(self, tmp_path, capsys):
        src = tmp_path / "empty"
        os.makedirs(src)
        assert run_cli("harmonize", "--in", str(src), "--out", str(tmp_path / "o"),
                       "--targets", "1,2,3") == 2


class TestDescribe:
    def test_matches_golden_tree(self, capsys):
        assert run_cli("describe", "--preset", "toy") == 0
        with open(GOLDEN, "r", encoding="utf-8") as fh:
            assert capsys.readouterr().out == fh.read()

    def test_repeat_calls_identical(self, capsys):
        run_cli("describe", "--preset", "full")
        first = capsys.readouterr().out
        run_cli("describe", "--preset", "full")
        assert capsys.readouterr().out == first


class TestSelftest:
    def test_all_checks_pass(self, capsys):
        assert run_cli("selftest") == 0
        out = capsys.readouterr().out
        assert "all 8 checks passed" in out
        assert "FAIL" not in out

    def test_failure_exits_nonzero(self, monkeypatch, capsys):
        def broken(rng):
            raise AssertionError("forced")

        monkeypatch.setattr(cli, "_check_loss_assembly", broken)
        assert run_cli("selftest") == 3
        assert "FAIL loss-assembly" in capsys.readouterr().out


class TestEntryPoint:
    def test_module_invocation(self):
        proc = subprocess.run(
            [sys.executable, "-m", "defog.cli", "describe", "--preset", "toy"],
            capture_output=True, text=True)
        assert proc.returncode == 0
        with open(GOLDEN, "r", encoding="utf-8") as fh:
            assert proc.stdout == fh.read()
