"""Command line: ``mgstream scene gen | fit | stream | render | eval``.

Exit codes: 0 success, 2 configuration error, 3 data-format error,
4 training divergence. ``MGS_THREADS`` caps the tile worker threads.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config, parse_config
from .formats import FormatError, save_png
from .gsplat import Camera
from .ntc import TrainingDivergenceError
from .raster import render
from .scenesim import build_scene, mover_variant, standard_scenes
from .stream import FitConfig, evaluate, export_scene, fit_scene, load_gaussians, run_stream

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGED = 0, 2, 3, 4


def scene_specs():
    specs = standard_scenes()
    specs["mover-x2"] = mover_variant(2)
    return specs


def cmd_scene_gen(args) -> int:
    specs = scene_specs()
    if args.name not in specs:
        raise ConfigError(f"unknown scene {args.name!r}; choose from {', '.join(sorted(specs))}")
    scene = export_scene(build_scene(specs[args.name]), args.outdir)
    print(f"wrote scene {scene.name!r}: {scene.n_frames} frames, {len(scene.cameras)} cameras -> {args.outdir}")
    return EXIT_OK


def cmd_fit(args) -> int:
    if args.iters < 0:
        raise ConfigError("--iters must be >= 0")
    _, info = fit_scene(args.dir, args.iters, FitConfig(iters=args.iters, n_gaussians=args.gaussians,
                                                        seed=args.seed))
    print(json.dumps(info))
    return EXIT_OK


def cmd_stream(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if overrides:
        kept = [line for line in cfg.to_text().splitlines() if line.partition("=")[0].strip() not in overrides]
        cfg = parse_config("".join(f"{line}\n" for line in kept)
                           + "".join(f"{k} = {v}\n" for k, v in overrides.items()))
    report = run_stream(args.dir, cfg)
    for row in report.rows:
        print(f"frame {row['frame']:4d}  psnr {row['psnr_full']:.2f} dB  |G_m| {row['g_m']:5d}  "
              f"|G_new| {row['g_new']:4d}  {row['bytes']} B")
    print(f"E_warp {report.e_warp:.6f}  report -> {report.out_dir / 'report.json'}")
    return EXIT_OK


def cmd_render(args) -> int:
    gs = load_gaussians(args.gaussians)
    try:
        cam = Camera.from_dict(json.loads(Path(args.camera).read_text()))
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"cannot read camera {args.camera}: {exc}") from None
    save_png(render(gs, cam).rgb, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    result = evaluate(args.dir, cfg)
    print(json.dumps(result, indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgstream", description="Motion-aware streaming Gaussian splatting")
    sub = p.add_subparsers(dest="command", required=True)

    scene = sub.add_parser("scene", help="synthetic scenes")
    scene_sub = scene.add_subparsers(dest="scene_command", required=True)
    gen = scene_sub.add_parser("gen", help="generate a pinned scene directory")
    gen.add_argument("name")
    gen.add_argument("outdir")
    gen.set_defaults(func=cmd_scene_gen)

    fit = sub.add_parser("fit", help="fit frame-0 Gaussians from the training views")
    fit.add_argument("dir")
    fit.add_argument("--iters", type=int, default=2000)
    fit.add_argument("--gaussians", type=int, default=200)
    fit.add_argument("--seed", type=int, default=0)
    fit.set_defaults(func=cmd_fit)

    stream = sub.add_parser("stream", help="run the per-frame stream and write deltas")
    stream.add_argument("dir")
    stream.add_argument("--config")
    stream.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    stream.set_defaults(func=cmd_stream)

    rend = sub.add_parser("render", help="render a Gaussian file from a camera")
    rend.add_argument("gaussians")
    rend.add_argument("camera")
    rend.add_argument("out")
    rend.set_defaults(func=cmd_render)

    ev = sub.add_parser("eval", help="replay deltas and score the held-out view")
    ev.add_argument("dir")
    ev.add_argument("--config")
    ev.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, FileNotFoundError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
