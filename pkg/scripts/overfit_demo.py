"""End-to-end demo: simulate a tiny dataset, overfit the tracker on it,
and print the training-set metrics.

Small by default so it finishes in a few minutes on one core:

    python3 scripts/overfit_demo.py --out /tmp/demo
    python3 scripts/overfit_demo.py --out /tmp/demo --quick   # ~1 min
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from mvpt import metrics as mx
from mvpt import scenesim as sim
from mvpt import tracker as trk
from mvpt import training as tr
from mvpt.encoder import EncoderConfig


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="working directory")
    ap.add_argument("--scenes", type=int, default=2)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--size", type=int, default=64, help="image height=width")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true",
                    help="32x32 images and 120 steps")
    return ap.parse_args()


def main():
    args = parse_args()
    out = Path(args.out)
    size, steps = (32, 120) if args.quick else (args.size, args.steps)

    scfg = sim.SimConfig(scenes=args.scenes, views=3, frames=12, height=size,
                         width=size, tracks=12, seed=args.seed,
                         threshold_scale=3.0)
    print(f"simulating {scfg.scenes} scenes at {size}x{size} ...")
    scene_dirs = sim.generate_dataset(scfg, out / "data")
    samples = [tr.load_sample(d) for d in scene_dirs]

    ecfg = EncoderConfig(stem_width=16, width=32, feature_dim=32, n_blocks=1,
                         n_scales=2)
    tcfg = trk.TrackerConfig(feature_dim=32, num_freqs=8, n_scales=2, k=12,
                             hidden=128, heads=4, blocks=2, v_virt=16,
                             mlp_ratio=4, window=12, iters=4)
    model = trk.MultiViewTracker(ecfg, tcfg, seed=args.seed)
    cfg = tr.TrainConfig(steps=steps, lr=1e-3, weight_decay=1e-4,
                         grad_clip=10.0, seed=args.seed, lr_schedule="cosine",
                         warmup=min(40, steps // 10), checkpoint_every=0)
    eval_cfg = mx.EvalConfig().scaled(scfg.threshold_scale)

    def progress(step, rec, m):
        if (step + 1) % max(1, steps // 6):
            return False
        reports = {i: tr.evaluate_sample(m, s, config=eval_cfg)
                   for i, s in enumerate(samples)}
        agg = mx.aggregate_dataset(reports)
        print(f"  step {step + 1:4d}  loss {rec['loss']:.4f}  "
              f"MTE {agg['mte']:.4f}  delta_avg {agg['delta_avg']:.3f}  "
              f"AJ {agg['aj']:.3f}")
        return False

    print(f"training {steps} steps ...")
    t0 = time.perf_counter()
    tr.train(model, samples, cfg, out / "run", hook=progress)
    print(f"trained in {time.perf_counter() - t0:.0f}s; "
          f"checkpoint at {out / 'run' / 'model.mvck'}")

    reports = {i: tr.evaluate_sample(model, s, config=eval_cfg)
               for i, s in enumerate(samples)}
    agg = mx.aggregate_dataset(reports)
    print("\ntraining-set metrics (thresholds x"
          f"{scfg.threshold_scale:g}):")
    for key in ("mte", "oa", "delta_avg", "aj"):
        print(f"  {key:10s} {agg[key]:.4f}")


if __name__ == "__main__":
    main()
