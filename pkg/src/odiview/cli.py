"""Command-line surface: downscale, render, train, eval, probe-ssr, oracle.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command prints its resolved configuration before doing work, so runs
are reproducible from the log alone.  `ODIVIEW_SEED` overrides the default
seed.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .autodiff import Tensor
from .codec import (
    MalformedStream,
    decode,
    encode,
    fit_quant_tables,
    stream_bpp,
    tables_for_quality,
)
from .geometry import ViewportSpec
from .imageio import read_image, write_png
from .probes import ORACLES, ssr_latitude_table
from .renderer import render_viewport_baseline
from .resample import ErpImage, bicubic_downscale
from .training import (
    TrainConfig,
    evaluate,
    format_config,
    load_config,
    load_model,
    train,
    write_eval_csv,
)

USAGE_ERROR, RUNTIME_ERROR = 2, 1


def _default_seed() -> int:
    return int(os.environ.get("ODIVIEW_SEED", "0"))


def _print_resolved(name: str, args: argparse.Namespace):
    pairs = ", ".join(f"{k}={v}" for k, v in sorted(vars(args).items())
                      if k != "func" and v is not None)
    print(f"[{name}] resolved config: {pairs}")


def _load_train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if getattr(args, "paper_scale", False):
        cfg = TrainConfig.paper_scale(
            **{k: getattr(cfg, k) for k in ("seed", "quality", "descriptor")})
    if getattr(args, "seed", None) is not None:
        import dataclasses
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _load_images(data_dir) -> list[ErpImage]:
    names = sorted(n for n in os.listdir(data_dir)
                   if os.path.splitext(n)[1].lower() in (".png", ".ppm"))
    if not names:
        raise FileNotFoundError(f"no .png/.ppm images in {data_dir}")
    return [read_image(os.path.join(data_dir, n)) for n in names]


# ---------------------------------------------------------------- commands --

def cmd_downscale(args) -> int:
    img = read_image(args.input)
    if args.baseline:
        lr = bicubic_downscale(img, args.scale)
    else:
        model = load_model(_load_train_config(args), args.ckpt)
        lr_px = model.down(Tensor(img.pixels), wrap_x=True).data
        lr = ErpImage(pixels=np.clip(lr_px, 0.0, 1.0))
    if args.target_bpp is not None:
        _, quality, bpp, stream = fit_quant_tables(
            lr, args.target_bpp, img.h, img.w)
    else:
        quality = args.quality
        _, stream = encode(lr, tables_for_quality(quality))
        bpp = stream_bpp(stream, img.h, img.w)
    with open(args.output, "wb") as fh:
        fh.write(stream)
    print(f"wrote {args.output}: {len(stream)} bytes, quality {quality:.2f}, "
          f"achieved {bpp:.4f} bpp")
    return 0


def _spec_from_args(args) -> ViewportSpec:
    return ViewportSpec(
        theta_c=float(np.deg2rad(args.theta)),
        phi_c=float(np.deg2rad(args.phi)),
        fov_h=float(np.deg2rad(args.fov_h)),
        fov_v=float(np.deg2rad(args.fov_v)),
        h_v=args.height, w_v=args.width,
    )


def cmd_render(args) -> int:
    ext = os.path.splitext(args.input)[1].lower()
    if ext in (".jfif", ".jpg", ".jpeg"):
        with open(args.input, "rb") as fh:
            lr = decode(fh.read())
    else:
        lr = read_image(args.input)
    spec = _spec_from_args(args)
    if args.baseline is not None:
        out = render_viewport_baseline(lr, spec, method=args.baseline)
    else:
        model = load_model(_load_train_config(args), args.ckpt)
        out = model.rend.render_viewport(lr, spec)
    write_png(args.output, out)
    print(f"wrote {args.output}: {spec.w_v}x{spec.h_v} viewport at "
          f"theta={args.theta} phi={args.phi}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    print(format_config(cfg), end="")
    if args.dry_run:
        print("config ok (dry run)")
        return 0
    images = _load_images(args.data)
    every = max(1, cfg.iters // 20)

    def progress(row):
        if row["iter"] % every == 0 or row["iter"] + 1 == cfg.iters:
            print(f"iter {row['iter']:6d}  total {row['loss_total']:.5f}  "
                  f"pix {row['loss_pix']:.5f}  guide {row['loss_guide']:.5f}  "
                  f"bpp {row['bpp_est']:.4f}")

    train(cfg, images, out_dir=args.out, resume=args.resume, progress=progress)
    print(f"checkpoint and log written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_train_config(args)
    print(format_config(cfg), end="")
    model = load_model(cfg, args.ckpt)
    images = _load_images(args.data)
    rows, summary = evaluate(model, images)
    write_eval_csv(args.out, rows)
    print(f"wrote {args.out} ({len(rows)} direction rows)")
    for k, v in summary.items():
        print(f"  mean {k}: {v:.4f}")
    return 0


def cmd_probe_ssr(args) -> int:
    print("descriptor error vs finite differences of the sphere map")
    print(f"{'latitude':>9} {'spherical':>12} {'planar':>12}")
    for r in ssr_latitude_table(fov_deg=args.fov):
        print(f"{r['latitude_deg']:8.0f}d {r['spherical_rel_err']:12.3e} "
              f"{r['planar_rel_err']:12.3e}")
    return 0


def cmd_oracle(args) -> int:
    checks = ORACLES if args.check == "all" else {args.check: ORACLES[args.check]}
    failed = False
    for name, fn in checks.items():
        ok, detail = fn()
        print(f"{name}: {'PASS' if ok else 'FAIL'} - {detail}")
        failed |= not ok
    return RUNTIME_ERROR if failed else 0


# ------------------------------------------------------------------ parser --

def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="odiview",
        description="Joint panorama downscaling/compression and implicit "
                    "viewport rendering.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_model_flags(p):
        p.add_argument("--config", help="flat key=value training config file")
        p.add_argument("--ckpt", help="checkpoint produced by `train`")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("downscale", help="downscale + compress a panorama")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--baseline", action="store_true",
                   help="plain bicubic instead of the learned downsampler")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--quality", type=float, default=85.0)
    g.add_argument("--target-bpp", type=float, default=None,
                   help="bisect quality to hit this rate (HR-pixel bpp)")
    add_model_flags(p)
    p.set_defaults(func=cmd_downscale)

    p = sub.add_parser("render", help="render a viewport from a LR panorama")
    p.add_argument("--in", dest="input", required=True,
                   help=".jfif compressed stream or .png/.ppm image")
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--theta", type=float, required=True, help="degrees")
    p.add_argument("--phi", type=float, required=True, help="degrees")
    p.add_argument("--fov-h", type=float, default=90.0)
    p.add_argument("--fov-v", type=float, default=90.0)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--baseline", choices=("bilinear", "bicubic"), default=None)
    add_model_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("train", help="run the end-to-end training loop")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="directory of .png/.ppm panoramas")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None)
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--paper-scale", action="store_true",
                   help="full-protocol defaults instead of desk scale")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score fixed view directions vs ground truth")
    p.add_argument("--config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe-ssr",
                       help="descriptor accuracy by latitude, both variants")
    p.add_argument("--fov", type=float, default=90.0)
    p.set_defaults(func=cmd_probe_ssr)

    p = sub.add_parser("oracle", help="run self-check oracles")
    p.add_argument("--check", choices=tuple(ORACLES) + ("all",), default="all")
    p.set_defaults(func=cmd_oracle)

    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = _default_seed()
    _print_resolved(args.command, args)
    if args.command in ("downscale", "render") and not args.baseline \
            and not args.ckpt:
        print("error: need --ckpt (with --config) or --baseline", file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except MalformedStream as e:
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    except (ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except RuntimeError as e:  # includes TargetUnreachable
        print(f"error: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
