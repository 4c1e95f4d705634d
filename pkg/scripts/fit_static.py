"""Fit frame-0 Gaussians of the "static" scene from its training views.

    python3 scripts/fit_static.py [outdir] [--iters N] [--gaussians N]
"""
import argparse
import json
from pathlib import Path

from mgstream.scenesim import build_scene, standard_scenes
from mgstream.stream import FitConfig, export_scene, fit_scene


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("outdir", nargs="?", default="runs/static")
    ap.add_argument("--iters", type=int, default=2000)
    ap.add_argument("--gaussians", type=int, default=200)
    args = ap.parse_args()
    root = Path(args.outdir)
    export_scene(build_scene(standard_scenes()["static"]), root)
    _, info = fit_scene(root, args.iters, FitConfig(iters=args.iters, n_gaussians=args.gaussians))
    print(json.dumps(info, indent=1))


if __name__ == "__main__":
    main()
