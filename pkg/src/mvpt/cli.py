"""Command line wiring for the whole pipeline.

Five subcommands: `simulate` renders synthetic scenes, `train` fits a
model on them, `track` runs a checkpoint over a scene, `eval` scores
predictions, and `bench` measures throughput. Configuration comes from
an optional JSON file with individual flags overriding it.

Every run writes a run_manifest.json recording the command, a hash of
the resolved configuration, seeds, input paths, and wall-clock timings,
so any output directory explains itself.

Exit codes: 0 success, 1 validation error, 2 IO error, 3 numeric
divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import geometry as geo
from . import metrics as mx
from . import scene_io
from . import scenesim
from . import tracker as trk
from . import training
from .encoder import EncoderConfig

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flags or flag values; mapped to the validation exit code."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2), stealing our IO code
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    config_sha256: str
    seed: int | None
    inputs: list
    version: str
    timings_s: dict


def _manifest(command, argv, config, seed, inputs, timings) -> RunManifest:
    canon = json.dumps(config, sort_keys=True)
    return RunManifest(
        command=command,
        argv=list(argv),
        config=config,
        config_sha256=hashlib.sha256(canon.encode()).hexdigest(),
        seed=seed,
        inputs=[str(p) for p in inputs],
        version=__version__,
        timings_s={k: round(v, 6) for k, v in timings.items()},
    )


def _write_run_manifest(out_dir, man: RunManifest):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_manifest.json", "w") as fh:
        json.dump(asdict(man), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config_file(path) -> dict:
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    return cfg


def _merge_config(defaults: dict, file_cfg: dict, flag_values: dict) -> dict:
    """defaults < config file < explicitly given flags."""
    unknown = sorted(set(file_cfg) - set(defaults))
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    merged = dict(defaults)
    merged.update(file_cfg)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return merged


def _dataclass_defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


def _parse_views(spec: str | None):
    """'all' (or nothing) keeps every view; otherwise a comma list of ids."""
    if spec is None or spec == "" or spec == "all":
        return None
    try:
        ids = [int(p) for p in spec.split(",")]
    except ValueError:
        raise ValueError(f"bad view list {spec!r}; expected e.g. '0,2' or 'all'")
    return ids


def _noisy_depth(depth: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Additive Gaussian noise on valid pixels, as a robustness probe."""
    if sigma < 0:
        raise ValueError(f"depth noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return depth
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=depth.shape).astype(depth.dtype)
    valid = np.isfinite(depth) & (depth > 0)
    return np.where(valid, depth + noise, depth)


# ---------------------------------------------------------------------------
# simulate

_SIM_FLAGS = ("scenes", "views", "frames", "height", "width", "tracks", "seed",
              "threshold_scale", "threads")


def cmd_simulate(args, argv) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    flag_values = {k: getattr(args, k) for k in _SIM_FLAGS}
    merged = _merge_config(_dataclass_defaults(scenesim.SimConfig), file_cfg, flag_values)
    cfg = scenesim.SimConfig(**merged)
    cfg.validate()

    t0 = time.perf_counter()
    dirs = scenesim.generate_dataset(cfg, args.out)
    dt = time.perf_counter() - t0

    for d in dirs:
        print(d)
    man = _manifest("simulate", argv, asdict(cfg), cfg.seed, [], {"simulate": dt})
    _write_run_manifest(args.out, man)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_FLAGS = ("steps", "lr", "weight_decay", "grad_clip", "seed", "gamma",
                "lambda_vis", "window", "iters", "view_drop", "depth_sigma",
                "sim_jitter", "checkpoint_every", "lr_schedule", "warmup")


def cmd_train(args, argv) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    sections = sorted(set(file_cfg) - {"train", "encoder", "tracker"})
    if sections:
        raise ValueError(f"unknown config sections: {sections}")

    flag_values = {k: getattr(args, k) for k in _TRAIN_FLAGS}
    train_merged = _merge_config(
        _dataclass_defaults(training.TrainConfig), file_cfg.get("train", {}), flag_values
    )
    cfg = training.TrainConfig(**train_merged)

    out = Path(args.out)
    ckpt = out / "model.mvck"
    if args.resume:
        if not ckpt.exists():
            raise FileNotFoundError(f"{ckpt}: nothing to resume from")
        model = trk.MultiViewTracker.load(ckpt)
    else:
        enc_cfg = _merge_config(
            _dataclass_defaults(EncoderConfig), file_cfg.get("encoder", {}), {}
        )
        trk_cfg = _merge_config(
            _dataclass_defaults(trk.TrackerConfig), file_cfg.get("tracker", {}), {}
        )
        model = trk.MultiViewTracker(
            EncoderConfig(**enc_cfg), trk.TrackerConfig(**trk_cfg), seed=cfg.seed
        )

    t0 = time.perf_counter()
    samples = [
        training.load_sample(d, depth_source=args.depth_source)
        for d in scene_io.list_scenes(args.data)
    ]
    t1 = time.perf_counter()
    history = training.train(model, samples, cfg, out, resume=args.resume)
    t2 = time.perf_counter()

    config = {
        "train": asdict(cfg),
        "encoder": asdict(model.encoder_cfg),
        "tracker": asdict(model.tracker_cfg),
    }
    man = _manifest("train", argv, config, cfg.seed, [args.data],
                    {"load": t1 - t0, "train": t2 - t1})
    _write_run_manifest(out, man)
    if history:
        print(f"trained {len(history)} steps, final loss {history[-1]['loss']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# track

def cmd_track(args, argv) -> int:
    t0 = time.perf_counter()
    model = trk.MultiViewTracker.load(args.checkpoint)
    scene = scene_io.load_scene(
        args.scene, views=_parse_views(args.views), depth_source=args.depth_source
    )
    queries = scene_io.read_queries_csv(args.queries) if args.queries else scene.queries
    if not queries:
        raise ValueError(f"{args.scene}: no queries.csv; pass --queries")
    if args.depth_noise_sigma:
        scene = replace(
            scene, depth=_noisy_depth(scene.depth, args.depth_noise_sigma, args.seed)
        )
    t1 = time.perf_counter()
    states, _, _ = trk.track_scene(
        model, scene, window=args.window, iters=args.iters, queries=queries
    )
    t2 = time.perf_counter()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trk.states_to_csv(states, out / "tracks.csv", threshold=args.vis_threshold)

    config = {
        "views": args.views, "depth_source": args.depth_source,
        "depth_noise_sigma": args.depth_noise_sigma, "window": args.window,
        "iters": args.iters, "seed": args.seed, "vis_threshold": args.vis_threshold,
        "threads": args.threads,
    }
    inputs = [args.scene, args.checkpoint] + ([args.queries] if args.queries else [])
    man = _manifest("track", argv, config, args.seed, inputs,
                    {"load": t1 - t0, "track": t2 - t1})
    _write_run_manifest(out, man)
    print(out / "tracks.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval

def _gt_records(gt_tracks: dict, queries) -> dict:
    t_q = {int(q[0]): int(q[1]) for q in queries or []}
    return {
        tid: mx.TrackRecord(xyz, vis, t_q=t_q.get(int(tid), 0))
        for tid, (ts, xyz, vis) in gt_tracks.items()
    }


def _pred_records(pred: dict, vis_threshold: float | None) -> dict:
    out = {}
    for tid, (ts, xyz, vis, conf) in pred.items():
        if vis_threshold is not None:
            vis = conf >= vis_threshold
        out[tid] = mx.TrackRecord(xyz, vis)
    return out


def cmd_eval(args, argv) -> int:
    if (args.scene is None) == (args.gt is None):
        raise ValueError("pass exactly one of --scene or --gt")

    t0 = time.perf_counter()
    cams_per_frame = None
    scale = 1.0
    if args.scene:
        scene_dir = Path(args.scene)
        name = scene_dir.name
        gt_path = scene_dir / "gt_tracks.csv"
        queries = scene_io.read_queries_csv(scene_dir / "queries.csv")
        manifest = scene_io.read_manifest(scene_dir / "manifest.json")
        scale = float(manifest.get("threshold_scale", 1.0))
        calibs = geo.load_cameras(scene_dir / "cameras.json")
        h, w = manifest["resolution"]
        n_frames = int(manifest["n_frames"])
        cams_per_frame = [
            [c.at(t, width=w, height=h) for c in calibs] for t in range(n_frames)
        ]
    else:
        gt_path = Path(args.gt)
        name = gt_path.parent.name or "scene"
        queries = scene_io.read_queries_csv(args.queries) if args.queries else []
    if args.threshold_scale is not None:
        scale = args.threshold_scale

    gt = _gt_records(scene_io.read_tracks_csv(gt_path), queries)
    pred = _pred_records(scene_io.read_predicted_csv(args.pred), args.vis_threshold)

    thresholds = mx.DISTANCE_THRESHOLDS
    if args.thresholds:
        thresholds = tuple(float(x) for x in args.thresholds.split(","))
    cfg = mx.EvalConfig(thresholds=thresholds).scaled(scale)

    t1 = time.perf_counter()
    rep = mx.evaluate_scene(pred, gt, cfg, cams_per_frame=cams_per_frame)
    t2 = time.perf_counter()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mx.write_report(out / "report.json", out / "report.csv", {name: rep})

    config = {
        "thresholds": list(cfg.thresholds), "threshold_scale": scale,
        "vis_threshold": args.vis_threshold,
        "pixel_thresholds": list(cfg.pixel_thresholds) if cams_per_frame else None,
    }
    inputs = [args.pred] + [p for p in (args.scene, args.gt, args.queries) if p]
    man = _manifest("eval", argv, config, None, inputs,
                    {"load": t1 - t0, "eval": t2 - t1})
    _write_run_manifest(out, man)

    agg = rep.aggregates
    parts = [f"{k} {agg[k]:.4f}" for k in ("mte", "oa", "delta_avg", "aj")
             if agg.get(k) is not None]
    print(f"{name}: " + "  ".join(parts))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

def cmd_bench(args, argv) -> int:
    t0 = time.perf_counter()
    model = trk.MultiViewTracker.load(args.checkpoint)
    scene = scene_io.load_scene(args.scene, views=_parse_views(args.views))
    if args.frames is not None:
        if not 1 <= args.frames <= scene.n_frames:
            raise ValueError(f"--frames must be in 1..{scene.n_frames}, got {args.frames}")
        scene = replace(
            scene,
            rgb=scene.rgb[:, : args.frames],
            depth=scene.depth[:, : args.frames],
            queries=[q for q in (scene.queries or []) if q[1] < args.frames],
        )
    if not scene.queries:
        raise ValueError(f"{args.scene}: no queries to track")
    t_load = time.perf_counter() - t0

    # timed separately: feature clouds (per-frame encode+fuse) and refinement.
    # dataset load stays out of the FPS; depth comes from files, so there is
    # no depth-estimation time to exclude.
    t1 = time.perf_counter()
    clouds = trk.build_clouds(
        model, scene.rgb, scene.depth,
        [scene.cameras_at(t) for t in range(scene.n_frames)],
    )
    t2 = time.perf_counter()
    queries = scene.queries
    states, _ = trk.run_windowed(
        model, clouds,
        np.array([q[0] for q in queries]),
        np.array([q[1] for q in queries]),
        np.array([q[2] for q in queries], np.float64),
        window=args.window, iters=args.iters,
    )
    t3 = time.perf_counter()

    window = args.window or model.tracker_cfg.window
    n_windows = len(trk.plan_windows(scene.n_frames, window))
    tracked = t3 - t1
    report = {
        "frames": scene.n_frames,
        "views": scene.n_views,
        "tracks": len(queries),
        "window": window,
        "iters": args.iters or model.tracker_cfg.iters,
        "windows": n_windows,
        "timings_s": {
            "load": round(t_load, 6),
            "clouds": round(t2 - t1, 6),
            "refine": round(t3 - t2, 6),
            "tracked_total": round(tracked, 6),
        },
        "effective_fps": scene.n_frames / tracked,
    }
    print(json.dumps(report, indent=2, sort_keys=True))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    config = {"views": args.views, "frames": args.frames, "window": args.window,
              "iters": args.iters, "threads": args.threads}
    man = _manifest("bench", argv, config, None, [args.scene, args.checkpoint],
                    {"load": t_load, "clouds": t2 - t1, "refine": t3 - t2})
    _write_run_manifest(out, man)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap; 1 (the default) guarantees bit-determinism")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvpt", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    for name in ("scenes", "views", "frames", "height", "width", "tracks", "seed"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--threshold-scale", type=float, dest="threshold_scale")
    _add_common(p)
    p.set_defaults(func=cmd_simulate, threads=None)

    p = sub.add_parser("train", help="fit a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--depth-source", default="depth", dest="depth_source")
    for name, typ in (("steps", int), ("lr", float), ("weight-decay", float),
                      ("grad-clip", float), ("seed", int), ("gamma", float),
                      ("lambda-vis", float), ("window", int), ("iters", int),
                      ("depth-sigma", float), ("sim-jitter", float),
                      ("checkpoint-every", int), ("lr-schedule", str),
                      ("warmup", int)):
        p.add_argument(f"--{name}", type=typ, dest=name.replace("-", "_"))
    p.add_argument("--view-drop", action=argparse.BooleanOptionalAction,
                   dest="view_drop")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run a checkpoint over one scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--queries", help="queries CSV; defaults to the scene's own")
    p.add_argument("--views", default="all", help="comma list of view ids, or 'all'")
    p.add_argument("--depth-source", default="depth", dest="depth_source")
    p.add_argument("--depth-noise-sigma", type=float, default=0.0,
                   dest="depth_noise_sigma")
    p.add_argument("--window", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int, default=0, help="depth-noise seed")
    p.add_argument("--vis-threshold", type=float, default=0.5, dest="vis_threshold")
    _add_common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score predicted tracks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scene", help="scene directory with ground truth and cameras")
    p.add_argument("--gt", help="ground-truth tracks CSV (alternative to --scene)")
    p.add_argument("--queries", help="queries CSV giving each track's t_q")
    p.add_argument("--thresholds", help="comma list of distance thresholds")
    p.add_argument("--threshold-scale", type=float, dest="threshold_scale")
    p.add_argument("--vis-threshold", type=float, dest="vis_threshold",
                   help="re-threshold predicted confidence; default keeps the CSV's flags")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="measure tracking throughput")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, help="use only the first N frames")
    p.add_argument("--views", default="all")
    p.add_argument("--window", type=int)
    p.add_argument("--iters", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args, argv)
    except (trk.NumericDivergenceError, training.TrainingDivergenceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
