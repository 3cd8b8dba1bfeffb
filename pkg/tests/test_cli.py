"""Command-line workflows: artifact round trips, determinism under --seed,
flag/config precedence, gradcheck wiring, doc drift."""

import dataclasses
import os

import numpy as np
import pytest

from conftest import randomize_couplings
from invrescale.cli import build_parser, main
from invrescale.data import load_png, make_synthetic_corpus, save_png
from invrescale.network import LatentSpec, RescaleModel
from invrescale.trainer import AdamState, TrainConfig, save_checkpoint


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_synthetic_corpus(root / "train", 3, size=48, seed=1)
    make_synthetic_corpus(root / "eval", 2, size=48, seed=2)

    # Fresh (identity-coupling) checkpoint plus a briefly trained one.
    fresh = RescaleModel(scale=2, latent=LatentSpec(2), blocks_per_stage=2, growth=4,
                         seed=3)
    save_checkpoint(root / "fresh.ckpt", fresh, AdamState.init(fresh.parameters()), 0)
    trained = randomize_couplings(
        RescaleModel(scale=2, latent=LatentSpec(2), blocks_per_stage=2, growth=4,
                     seed=4), seed=4, amplitude=0.05)
    save_checkpoint(root / "random.ckpt", trained,
                    AdamState.init(trained.parameters()), 0)
    return root


class TestTrainCommand:
    def test_train_and_flags(self, workdir, tmp_path):
        rc = main(["train", "--train-dir", str(workdir / "train"),
                   "--eval-dir", str(workdir / "eval"), "--out", str(tmp_path / "run"),
                   "--iterations", "10", "--blocks-per-stage", "2", "--growth", "4",
                   "--batch-size", "2", "--patch-size", "32", "--halve-every", "5",
                   "--seed", "5"])
        assert rc == 0
        assert (tmp_path / "run" / "model.ckpt").exists()
        assert (tmp_path / "run" / "train_log.csv").exists()

    def test_config_file_precedence(self, workdir, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("iterations = 7\ngrowth = 4\nblocks_per_stage = 2\n"
                       "batch-size = 2\npatch_size = 32\nhalve_every = 5\n"
                       "quantize = false\n")
        rc = main(["train", "--config", str(cfg),
                   "--train-dir", str(workdir / "train"), "--out", str(tmp_path / "r1"),
                   "--iterations", "4"])  # flag beats file
        assert rc == 0
        log = (tmp_path / "r1" / "train_log.csv").read_text().strip().splitlines()
        assert len(log) - 1 == 4
        rc = main(["train", "--config", str(cfg),
                   "--train-dir", str(workdir / "train"), "--out", str(tmp_path / "r2")])
        assert rc == 0
        log = (tmp_path / "r2" / "train_log.csv").read_text().strip().splitlines()
        assert len(log) - 1 == 7  # file beats built-in default

    def test_unknown_config_key_rejected(self, workdir, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not_a_field = 1\n")
        with pytest.raises(SystemExit):
            main(["train", "--config", str(cfg),
                  "--train-dir", str(workdir / "train"), "--out", str(tmp_path / "r")])

    def test_help_enumerates_config_schema(self, capsys):
        # Doc-drift guard: every config field appears as a flag with its
        # default value in train --help.
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--help"])
        text = capsys.readouterr().out
        for f in dataclasses.fields(TrainConfig):
            if f.name in ("train_dir", "eval_dir", "seed"):
                continue
            flag = "--" + f.name.replace("_", "-")
            assert flag in text, f"missing flag {flag}"
            assert f"[default: {f.default}]" in text, f"missing default for {flag}"


class TestDownUp:
    def test_downscale_deterministic_bytes(self, workdir, tmp_path):
        src = sorted((workdir / "eval").glob("*.png"))[0]
        for name in ("a.png", "b.png"):
            rc = main(["downscale", "--ckpt", str(workdir / "random.ckpt"),
                       "--in", str(src), "--out", str(tmp_path / name),
                       "--seed", "9"])
            assert rc == 0
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_downscale_gray_constant_under_identity_couplings(self, workdir, tmp_path):
        gray = np.full((16, 16, 3), 100 / 255)
        save_png(tmp_path / "gray.png", gray)
        rc = main(["downscale", "--ckpt", str(workdir / "fresh.ckpt"),
                   "--in", str(tmp_path / "gray.png"), "--out", str(tmp_path / "lr.png"),
                   "--seed", "0"])
        assert rc == 0
        np.testing.assert_array_equal(load_png(tmp_path / "lr.png"),
                                      np.full((8, 8, 3), 100 / 255))

    def test_odd_size_center_cropped_with_warning(self, workdir, tmp_path, capsys):
        img = np.random.default_rng(0).random((17, 16, 3))
        save_png(tmp_path / "odd.png", img)
        rc = main(["downscale", "--ckpt", str(workdir / "random.ckpt"),
                   "--in", str(tmp_path / "odd.png"), "--out", str(tmp_path / "lr.png"),
                   "--seed", "0"])
        assert rc == 0
        assert "center-cropped" in capsys.readouterr().err
        assert load_png(tmp_path / "lr.png").shape == (8, 8, 3)

    def test_true_latent_restores_within_one_level(self, workdir, tmp_path):
        src = sorted((workdir / "eval").glob("*.png"))[0]
        rc = main(["downscale", "--ckpt", str(workdir / "fresh.ckpt"),
                   "--in", str(src), "--out", str(tmp_path / "lr.png"),
                   "--save-z", str(tmp_path / "z.blob"), "--seed", "4"])
        assert rc == 0
        rc = main(["upscale", "--ckpt", str(workdir / "fresh.ckpt"),
                   "--in", str(tmp_path / "lr.png"), "--zblob", str(tmp_path / "z.blob"),
                   "--out", str(tmp_path / "hr.png"), "--seed", "4"])
        assert rc == 0
        original = load_png(src)
        restored = load_png(tmp_path / "hr.png")
        assert np.abs(restored - original).max() <= 1 / 255 + 1e-12

    def test_upscale_zero_latent_deterministic(self, workdir, tmp_path):
        src = sorted((workdir / "eval").glob("*.png"))[0]
        main(["downscale", "--ckpt", str(workdir / "random.ckpt"), "--in", str(src),
              "--out", str(tmp_path / "lr.png"), "--seed", "1"])
        outs = []
        for name in ("u1.png", "u2.png"):
            rc = main(["upscale", "--ckpt", str(workdir / "random.ckpt"),
                       "--in", str(tmp_path / "lr.png"), "--zhat", "zero",
                       "--out", str(tmp_path / name), "--seed", "2"])
            assert rc == 0
            outs.append((tmp_path / name).read_bytes())
        assert outs[0] == outs[1]

    def test_upscale_gaussian_latents_differ_across_seeds(self, workdir, tmp_path):
        src = sorted((workdir / "eval").glob("*.png"))[0]
        main(["downscale", "--ckpt", str(workdir / "random.ckpt"), "--in", str(src),
              "--out", str(tmp_path / "lr.png"), "--seed", "1"])
        outs = []
        for seed in ("3", "4"):
            main(["upscale", "--ckpt", str(workdir / "random.ckpt"),
                  "--in", str(tmp_path / "lr.png"), "--zhat", "gaussian",
                  "--out", str(tmp_path / f"u{seed}.png"), "--seed", seed])
            outs.append(load_png(tmp_path / f"u{seed}.png"))
        assert np.abs(outs[0] - outs[1]).max() > 0

    def test_zblob_shape_mismatch_rejected(self, workdir, tmp_path):
        src = sorted((workdir / "eval").glob("*.png"))[0]
        main(["downscale", "--ckpt", str(workdir / "random.ckpt"), "--in", str(src),
              "--out", str(tmp_path / "lr.png"), "--save-z", str(tmp_path / "z.blob"),
              "--seed", "1"])
        big = np.zeros((40, 40, 3))
        save_png(tmp_path / "big.png", big)
        with pytest.raises(SystemExit):
            main(["upscale", "--ckpt", str(workdir / "random.ckpt"),
                  "--in", str(tmp_path / "big.png"), "--zblob", str(tmp_path / "z.blob"),
                  "--out", str(tmp_path / "hr.png")])

    def test_missing_input_nonzero_exit(self, workdir, tmp_path, capsys):
        rc = main(["downscale", "--ckpt", str(workdir / "random.ckpt"),
                   "--in", str(tmp_path / "absent.png"),
                   "--out", str(tmp_path / "x.png")])
        assert rc == 1
        assert "error" in capsys.readouterr().err


class TestRoundtrip:
    def test_float_true_z_hits_sentinel(self, workdir, tmp_path, capsys):
        src = sorted((workdir / "eval").glob("*.png"))[0]
        rc = main(["roundtrip", "--ckpt", str(workdir / "random.ckpt"),
                   "--in", str(src), "--report", str(tmp_path / "r.csv"),
                   "--no-quantize", "--use-true-z", "--seed", "5"])
        assert rc == 0
        row = (tmp_path / "r.csv").read_text().strip().splitlines()[1]
        assert row.split(",")[1] == "99.0"

    def test_quantized_true_z_above_45db(self, workdir, tmp_path):
        # Only LR rounding noise enters; needs a model whose LR stays inside
        # [0,1] (clipping would otherwise dominate), which the identity
        # couplings guarantee.
        src = sorted((workdir / "eval").glob("*.png"))[0]
        rc = main(["roundtrip", "--ckpt", str(workdir / "fresh.ckpt"),
                   "--in", str(src), "--report", str(tmp_path / "r.csv"),
                   "--use-true-z", "--seed", "5"])
        assert rc == 0
        value = float((tmp_path / "r.csv").read_text().strip().splitlines()[1].split(",")[1])
        assert value > 45.0

    def test_sampled_latent_still_reports(self, workdir, tmp_path):
        src = sorted((workdir / "eval").glob("*.png"))[0]
        rc = main(["roundtrip", "--ckpt", str(workdir / "random.ckpt"),
                   "--in", str(src), "--report", str(tmp_path / "r.csv"),
                   "--seed", "6"])
        assert rc == 0
        header, row = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert header == "name,psnr_db,ssim"
        assert float(row.split(",")[1]) > 0.0


class TestMetricsCommand:
    def test_directory_report(self, workdir, tmp_path):
        rc = main(["metrics", "--ref", str(workdir / "eval"),
                   "--test", str(workdir / "eval"), "--out", str(tmp_path / "m.csv"),
                   "--border", "2"])
        assert rc == 0
        lines = (tmp_path / "m.csv").read_text().strip().splitlines()
        assert lines[0] == "name,psnr_db,ssim"
        assert len(lines) == 3
        for row in lines[1:]:
            assert row.split(",")[1] == "99.0"

    def test_rgb_flag(self, workdir, tmp_path):
        rc = main(["metrics", "--ref", str(workdir / "eval"),
                   "--test", str(workdir / "eval"), "--out", str(tmp_path / "m.csv"),
                   "--rgb"])
        assert rc == 0
        for row in (tmp_path / "m.csv").read_text().strip().splitlines()[1:]:
            assert row.split(",")[2] == "1.0"


class TestGradcheckCommand:
    EXPECTED_PRIMITIVES = [
        "add", "sub", "mul", "scale", "shift", "exp", "sigmoid", "leaky_relu",
        "absolute", "sqrt", "concat", "narrow", "conv2d_1x1", "conv2d_3x3",
        "reduce_sum", "reduce_mean", "reduce_sumsq", "haar_forward", "haar_inverse",
    ]

    def test_passes_and_lists_each_primitive_once(self, capsys):
        rc = main(["gradcheck", "--size", "tiny"])
        assert rc == 0
        out = capsys.readouterr().out
        names = [line.split()[1] for line in out.strip().splitlines()
                 if line.startswith(("PASS", "FAIL"))]
        for prim in self.EXPECTED_PRIMITIVES:
            assert names.count(prim) == 1
        assert "invblock" in names

    def test_perturbed_gradient_fails(self, capsys, monkeypatch):
        monkeypatch.setenv("INVRESCALE_GRADCHECK_PERTURB", "mul")
        rc = main(["gradcheck", "--size", "tiny"])
        assert rc == 1
        out = capsys.readouterr().out
        assert "FAIL mul" in out


def test_seed_env_default(monkeypatch):
    monkeypatch.setenv("INVRESCALE_SEED", "123")
    args = build_parser().parse_args(["gradcheck"])
    assert args.seed == 123
