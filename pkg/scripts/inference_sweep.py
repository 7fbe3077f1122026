"""Inference-time sweep of sliding-window length and refinement iterations.

Both knobs can be changed after training (the refiner is shared across
iterations and windows overlap by half), so this measures the quality /
runtime trade-off on a fixed checkpoint.

    python3 scripts/inference_sweep.py --data /tmp/demo/data \
        --checkpoint /tmp/demo/run/model.mvck \
        --windows 8,12,16 --iters 1,2,4,6
"""

import argparse
import itertools
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mvpt import metrics as mx
from mvpt import scene_io
from mvpt import tracker as trk
from mvpt import training as tr


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", required=True, help="dataset directory")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--windows", default="8,12,16")
    ap.add_argument("--iters", default="1,2,4,6")
    ap.add_argument("--scenes", type=int, default=0,
                    help="cap on scenes to evaluate (0 = all)")
    return ap.parse_args()


def main():
    args = parse_args()
    windows = [int(w) for w in args.windows.split(",")]
    iter_counts = [int(i) for i in args.iters.split(",")]
    model = trk.MultiViewTracker.load(args.checkpoint)

    scene_dirs = sorted(Path(args.data).glob("scene_*"))
    if args.scenes:
        scene_dirs = scene_dirs[: args.scenes]
    if not scene_dirs:
        raise SystemExit(f"no scene_* directories under {args.data}")
    samples = [tr.load_sample(d) for d in scene_dirs]
    manifest = scene_io.read_manifest(scene_dirs[0] / "manifest.json")
    eval_cfg = mx.EvalConfig().scaled(float(manifest.get("threshold_scale", 1.0)))
    print(f"{len(samples)} scenes, trained window={model.tracker_cfg.window} "
          f"iters={model.tracker_cfg.iters}")

    print(f"{'window':>7s} {'iters':>6s} {'MTE':>8s} {'delta_avg':>10s} "
          f"{'AJ':>8s} {'sec':>7s}")
    for window, iters in itertools.product(windows, iter_counts):
        t0 = time.perf_counter()
        reports = {i: tr.evaluate_sample(model, s, config=eval_cfg,
                                         window=window, iters=iters)
                   for i, s in enumerate(samples)}
        dt = time.perf_counter() - t0
        agg = mx.aggregate_dataset(reports)
        print(f"{window:7d} {iters:6d} {agg['mte']:8.4f} "
              f"{agg['delta_avg']:10.4f} {agg['aj']:8.4f} {dt:7.1f}")


if __name__ == "__main__":
    main()
