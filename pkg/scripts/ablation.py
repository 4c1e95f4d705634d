"""Sweep eps and GIM top-N on one frame of the "mover" scene.

Writes ablation.csv with |G_m|, |G_new|, delta bytes and held-out PSNR per
setting.

    python3 scripts/ablation.py [outdir] [--frames N]
"""
import argparse
import csv
from pathlib import Path

from mgstream.config import PipelineConfig
from mgstream.scenesim import build_scene, standard_scenes
from mgstream.stream import export_scene, run_stream

EPS = [0.5, 1.0, 2.0, 5.0, 10.0]
TOP_N = [1, 2, 3, 4, 5]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("outdir", nargs="?", default="runs/ablation")
    ap.add_argument("--frames", type=int, default=2)
    args = ap.parse_args()

    root = Path(args.outdir)
    export_scene(build_scene(standard_scenes()["mover"]), root)
    settings = [("eps", v) for v in EPS] + [("top_n", v) for v in TOP_N]
    rows = []
    for key, value in settings:
        cfg = PipelineConfig(frames=args.frames, output=f"{key}_{value}").replace(**{key: value})
        report = run_stream(root, cfg)
        for r in report.rows:
            rows.append({"param": key, "value": value, "frame": r["frame"], "g_m": r["g_m"],
                         "g_new": r["g_new"], "bytes": r["bytes"], "psnr_full": round(r["psnr_full"], 3)})
            print(rows[-1])
    with open(root / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
