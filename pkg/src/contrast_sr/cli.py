"""Command-line entry points: train, eval, upscale, info.

Exit codes: 0 success, 2 usage/config problems, 3 runtime aborts.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import load_config_file, model_preset
from .errors import (ConfigError, ContractError, DataError, FormatError,
                     ShapeError, TrainingAborted)


def _data_manifest(data_table, default_scale):
    from .data import load_manifest, manifest_from_dir
    if "manifest" in data_table:
        return load_manifest(data_table["manifest"])
    if "root" in data_table:
        scale = int(data_table.get("scale", default_scale))
        m = manifest_from_dir(data_table["root"], scale)
        if "on_the_fly_lr" in data_table:
            m.on_the_fly_lr = bool(data_table["on_the_fly_lr"])
        return m
    raise ConfigError("the [data] table needs either 'manifest' or 'root'")


def cmd_train(args):
    from .trainer import train
    model_cfg, train_cfg, data_table = load_config_file(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    manifest = _data_manifest(data_table, model_cfg.scale)
    if manifest.scale != model_cfg.scale:
        raise ConfigError(f"data scale {manifest.scale} != model scale {model_cfg.scale}")
    records = train(model_cfg, train_cfg, manifest, args.out,
                    resume=args.resume, quiet=False)
    print(f"finished at iteration {records[-1]['iter']}, "
          f"final loss {records[-1]['loss']:.5f}")
    return 0


def cmd_eval(args):
    from .data import bicubic_resize, load_manifest
    from .metrics import evaluate_dataset
    manifest = load_manifest(args.manifest)
    if args.baseline == "bicubic":
        scale = manifest.scale

        def model_fn(lr):
            h, w = lr.shape[:2]
            return bicubic_resize(lr, scale * h, scale * w)
    else:
        from .model import load_model, upscale_image
        net = load_model(args.checkpoint)
        if net.cfg.scale != manifest.scale:
            raise ConfigError(f"checkpoint scale {net.cfg.scale} != "
                              f"manifest scale {manifest.scale}")

        def model_fn(lr):
            return upscale_image(net, lr)

    reports, aggregate = evaluate_dataset(model_fn, manifest,
                                          report_path=args.report,
                                          quantize_first=args.quantize_y)
    print(f"{'image':<24} {'psnr_db':>9} {'ssim':>8}")
    for r in (*reports, aggregate):
        print(f"{r.name:<24} {r.psnr_db:>9.4f} {r.ssim:>8.5f}")
    return 0


def cmd_upscale(args):
    from .data import load_png, save_png
    from .model import load_model, upscale_image
    net = load_model(args.checkpoint)
    img = load_png(args.input)
    sr = upscale_image(net, img)
    save_png(args.output, sr)
    print(f"{args.input} {img.shape[1]}x{img.shape[0]} -> "
          f"{args.output} {sr.shape[1]}x{sr.shape[0]} (x{net.cfg.scale})")
    return 0


def cmd_info(args):
    from .model import count_flops, count_params, flops_breakdown
    if args.config:
        cfg, _, _ = load_config_file(args.config)
    else:
        cfg = model_preset(args.preset)
    try:
        c, h, w = (int(v) for v in args.out_size.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--out-size must look like 3x256x256, got {args.out_size!r}")
    if c != 3:
        raise ConfigError("only 3-channel outputs are supported")
    params = count_params(cfg)
    flops = count_flops(cfg, h, w)
    print(f"parameters: {params:,} ({params / 1e6:.2f} M)")
    print(f"flops @ {args.out_size}: {flops:,} ({flops / 1e9:.2f} G)")
    parts = flops_breakdown(cfg, h, w)
    for key, macs in parts.items():
        note = "  (not in headline)" if key == "attention_matmuls" else ""
        print(f"  {key:<20} {2 * macs / 1e9:>10.2f} G{note}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="contrast-sr",
                                     description="Hybrid state-space / windowed-attention "
                                                 "super-resolution toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or bicubic baseline) on a manifest")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", choices=["bicubic"], default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True, help="JSON-lines report path")
    p.add_argument("--quantize-y", action="store_true",
                   help="quantize RGB to 8-bit before the Y transform")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("upscale", help="upscale a single PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("info", help="parameter and FLOP accounting")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config")
    group.add_argument("--preset")
    p.add_argument("--out-size", default="3x256x256")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and (args.checkpoint is None) == (args.baseline is None):
        print("eval needs exactly one of --checkpoint or --baseline", file=sys.stderr)
        return 2
    env_seed = os.environ.get("CONTRAST_SEED")
    if env_seed is not None and getattr(args, "seed", None) is None and hasattr(args, "seed"):
        try:
            args.seed = int(env_seed)
        except ValueError:
            print(f"CONTRAST_SEED must be an integer, got {env_seed!r}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except (ConfigError, FormatError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingAborted, ShapeError, ContractError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
