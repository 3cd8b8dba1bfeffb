"""Command-line surface: train, downscale, upscale, roundtrip, ablate,
metrics, gradcheck.

Every command honors --seed (default from INVRESCALE_SEED, then 0) and is
bit-reproducible.  Train options mirror the training config exactly; values
can also come from a flat `key = value` config file, with flags taking
precedence over the file and the file over built-in defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .data import load_png, rgb_to_y, save_png
from .gradcheck import run_all
from .metrics import MetricReport, evaluate_planes, evaluate_rgb, write_metrics_csv
from .network import sample_latent
from .tensor import Tensor
from .trainer import (TrainConfig, _center_crop_multiple, ablate, load_checkpoint,
                      load_tensor_blob, save_tensor_blob, table_grid, train)

SEED_ENV = "INVRESCALE_SEED"


def _default_seed() -> int:
    return int(os.environ.get(SEED_ENV, "0"))


def _add_seed(parser) -> None:
    parser.add_argument("--seed", type=int, default=_default_seed(),
                        help="RNG seed (env %s overrides the default)" % SEED_ENV)


_CONFIG_SKIP = {"train_dir", "eval_dir", "seed"}


def _add_train_config_args(parser) -> None:
    for f in dataclasses.fields(TrainConfig):
        if f.name in _CONFIG_SKIP:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, type=_parse_bool, default=f.default,
                                metavar="true|false", help=f"{f.name} [default: %(default)s]")
        else:
            parser.add_argument(flag, type=type(f.default), default=f.default,
                                help=f"{f.name} [default: %(default)s]")


def _parse_bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _read_config_file(path: str) -> dict:
    values = {}
    names = {f.name: f for f in dataclasses.fields(TrainConfig)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        val = val.strip()
        if key not in names:
            raise SystemExit(f"{path}:{lineno}: unknown config key {key!r}")
        f = names[key]
        if isinstance(f.default, bool):
            values[key] = _parse_bool(val)
        else:
            values[key] = type(f.default)(val)
    return values


def _config_from_args(args) -> TrainConfig:
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("train_dir", "eval_dir"):
            kwargs[f.name] = getattr(args, f.name)
        elif f.name == "seed":
            kwargs[f.name] = args.seed
        else:
            kwargs[f.name] = getattr(args, f.name)
    return TrainConfig(**kwargs)


def _load_image_cropped(path, scale: int) -> np.ndarray:
    img = load_png(path)
    h, w = img.shape[:2]
    if h % scale or w % scale:
        cropped = _center_crop_multiple(img, scale)
        print(f"warning: {path} is {w}x{h}, center-cropped to "
              f"{cropped.shape[1]}x{cropped.shape[0]} (multiple of {scale})",
              file=sys.stderr)
        return cropped
    return img


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = train(cfg, args.out)
    print(f"finished {cfg.iterations} iterations: loss {result.first_loss:.5g} -> "
          f"{result.last_loss:.5g}")
    if result.eval_log_path and cfg.eval_dir:
        print(f"held-out PSNR {result.final_psnr:.2f} dB, LR SSIM {result.final_ssim:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_downscale(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    img = _load_image_cropped(args.input, model.scale)
    rng = np.random.default_rng(args.seed)
    x = Tensor(img.transpose(2, 0, 1)[None], dtype=model.dtype)
    h, w = img.shape[:2]
    w_lat = None
    if model.latent.channels > 0:
        w_lat = sample_latent(model.latent.w_mode, model.w_shape(h, w), rng, model.dtype)
    y, z = model.forward(x, w_lat)
    y_img = y.data[0].transpose(1, 2, 0) / model.lf_gain
    save_png(args.out, np.clip(y_img, 0.0, 1.0))
    if args.save_z:
        save_tensor_blob(args.save_z, "z", z.data[0])
    print(f"wrote {args.out}")
    return 0


def cmd_upscale(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    lr = load_png(args.input)
    rng = np.random.default_rng(args.seed)
    y = Tensor(lr.transpose(2, 0, 1)[None] * model.lf_gain, dtype=model.dtype)
    b, _, h, w = y.data.shape
    if args.zblob:
        name, arr = load_tensor_blob(args.zblob)
        want = (model.z_channels, h, w)
        if tuple(arr.shape) != want:
            raise SystemExit(
                f"z blob {args.zblob} has shape {tuple(arr.shape)}, expected {want}"
            )
        zhat = Tensor(arr[None], dtype=model.dtype)
    else:
        zhat = sample_latent(args.zhat, (b, model.z_channels, h, w), rng, model.dtype)
    xhat, _ = model.inverse(y, zhat)
    save_png(args.out, np.clip(xhat.data[0].transpose(1, 2, 0), 0.0, 1.0))
    print(f"wrote {args.out}")
    return 0


def cmd_roundtrip(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    img = _load_image_cropped(args.input, model.scale)
    rng = np.random.default_rng(args.seed)
    from .trainer import rescale_image
    restored, _ = rescale_image(model, img, rng, quantize=not args.no_quantize,
                                use_true_z=args.use_true_z)
    report = evaluate_planes(Path(args.input).name, rgb_to_y(img), rgb_to_y(restored),
                             border=model.scale)
    write_metrics_csv(args.report, [report])
    from .metrics import psnr_display
    print(f"{report.name}: PSNR {psnr_display(report.psnr_db):.4f} dB, "
          f"SSIM {report.ssim:.6f} (border crop {report.border_crop})")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    rows = ablate(cfg, table_grid(cfg.scale), args.out)
    for r in rows:
        print(f"{r.setting}: PSNR {r.psnr_db:.3f} dB, SSIM {r.ssim:.4f}")
    print(f"wrote {Path(args.out) / 'ablation.csv'}")
    return 0


def cmd_metrics(args) -> int:
    ref_dir, test_dir = Path(args.ref), Path(args.test)
    reports: list[MetricReport] = []
    for ref_path in sorted(ref_dir.glob("*.png")):
        test_path = test_dir / ref_path.name
        if not test_path.exists():
            print(f"warning: {test_path} missing, skipped", file=sys.stderr)
            continue
        a = load_png(ref_path)
        b = load_png(test_path)
        if a.shape != b.shape:
            raise SystemExit(f"{ref_path.name}: size mismatch {a.shape} vs {b.shape}")
        if args.rgb:
            reports.append(evaluate_rgb(ref_path.name, a, b, border=args.border))
        else:
            reports.append(evaluate_planes(ref_path.name, rgb_to_y(a), rgb_to_y(b),
                                           border=args.border))
    if not reports:
        raise SystemExit(f"no comparable image pairs under {ref_dir} and {test_dir}")
    write_metrics_csv(args.out, reports)
    print(f"wrote {args.out} ({len(reports)} rows)")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_all(args.size)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<14} worst rel err {r.max_rel_err:.3e} "
              f"(tol {r.tolerance:g})")
        failed += not r.passed
    if failed:
        print(f"{failed} gradient check(s) failed")
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="invrescale",
        description="Invertible image rescaling with dual latent variables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a directory of PNGs")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--train-dir", dest="train_dir", required=True)
    p.add_argument("--eval-dir", dest="eval_dir", default="")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_config_args(p)
    _add_seed(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("downscale", help="downscale an HR PNG with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-z", dest="save_z", help="also store the true latent blob")
    _add_seed(p)
    p.set_defaults(func=cmd_downscale)

    p = sub.add_parser("upscale", help="restore an HR PNG from an LR PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--zhat", choices=["zero", "gaussian"], default="zero")
    p.add_argument("--zblob", help="use a stored true latent instead of sampling")
    _add_seed(p)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("roundtrip", help="downscale then upscale and score")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--report", required=True, help="CSV output path")
    p.add_argument("--no-quantize", action="store_true")
    p.add_argument("--use-true-z", action="store_true")
    _add_seed(p)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("ablate", help="train the reference setting grid")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--train-dir", dest="train_dir", required=True)
    p.add_argument("--eval-dir", dest="eval_dir", required=True)
    p.add_argument("--out", required=True)
    _add_train_config_args(p)
    _add_seed(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("metrics", help="PSNR/SSIM over paired directories")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--border", type=int, default=0, help="crop per side before scoring")
    p.add_argument("--rgb", action="store_true",
                   help="score full RGB instead of the luma channel")
    _add_seed(p)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--size", choices=["tiny", "full"], default="tiny")
    _add_seed(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    # Config file values become parser defaults so explicit flags win.
    if "--config" in argv:
        cfg_path = argv[argv.index("--config") + 1]
        file_values = _read_config_file(cfg_path)
        args, _ = parser.parse_known_args(argv)
        sub_actions = [a for a in parser._actions
                       if isinstance(a, argparse._SubParsersAction)]
        for action in sub_actions:
            subparser = action.choices.get(args.command)
            if subparser is not None:
                subparser.set_defaults(**file_values)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
