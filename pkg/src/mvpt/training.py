"""Losses and unrolled training over windowed track refinement.

The position loss is a gamma-discounted l1 over every refinement
iteration of every window, so early iterations are supervised but the
final one carries the most weight. Visibility uses class-rebalanced BCE
on the per-window final logits. Both divide by the count of unmasked
terms, which reduces to the plain J*M*N*T normalization when every
track is active for the whole window.

unrolled_train_step runs all windows of one sample with state handoff,
takes a single backward pass through the full unrolled graph, and makes
one optimizer step. The loop draws its per-step randomness from
SeedSequence([seed, step]), so an interrupted run resumed from a
checkpoint replays the exact same sample and augmentation sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from . import metrics
from . import scene_io
from .geometry import Similarity, apply_similarity
from .optim import AdamW, assign_checkpoint, clip_global_norm, load_checkpoint, save_checkpoint
from .tracker import (
    MultiViewTracker,
    NumericDivergenceError,
    build_clouds,
    predict_visibility,
    run_windowed,
)


class TrainingDivergenceError(RuntimeError):
    """Non-finite loss or update during training."""

    def __init__(self, step: int, detail: str = ""):
        self.step = step
        msg = f"training diverged at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


@dataclass
class LossConfig:
    gamma: float = 0.8
    lambda_vis: float = 1.0

    def validate(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.lambda_vis < 0:
            raise ValueError(f"lambda_vis must be >= 0, got {self.lambda_vis}")


def loss_xyz(preds, gts, masks, gamma: float = 0.8):
    """Discounted l1 position loss.

    preds: per-window lists of per-iteration (N, T, 3) position tensors;
    gts: per-window (N, T, 3) arrays; masks: per-window (N, T) bool with
    False on pre-query frames. Each unmasked (window, iteration, track,
    frame) term contributes gamma^(M-m) * |p_hat - p|_1; the sum divides
    by the number of unmasked terms.
    """
    total = None
    count = 0
    for window_preds, gt, mask in zip(preds, gts, masks, strict=True):
        gt = np.asarray(gt, np.float64)
        mask = np.asarray(mask, bool)
        m_iters = len(window_preds)
        count += m_iters * int(mask.sum())
        mask3 = ad.tensor(mask[:, :, None].astype(np.float64))
        gt_t = ad.tensor(gt)
        for mi, pos in enumerate(window_preds, start=1):
            if tuple(pos.shape) != gt.shape:
                raise ad.ShapeError(f"predictions {pos.shape} vs ground truth {gt.shape}")
            term = ad.sum_(ad.absval(pos - gt_t) * mask3)
            w = gamma ** (m_iters - mi)
            total = term * w if total is None else total + term * w
    if total is None or count == 0:
        return ad.tensor(0.0)
    return total * (1.0 / count)


def loss_vis(logits, gts, masks):
    """Class-rebalanced BCE on per-window final visibility logits.

    Weights are N_tot/(2*N_c) computed over the unmasked entries of the
    whole batch; if one class is absent the present class gets weight 1.
    The sum divides by the number of unmasked entries.
    """
    gts = [np.asarray(g, bool) for g in gts]
    masks = [np.asarray(m, bool) for m in masks]
    n1 = sum(int((g & m).sum()) for g, m in zip(gts, masks, strict=True))
    n0 = sum(int((~g & m).sum()) for g, m in zip(gts, masks))
    n_tot = n1 + n0
    if n_tot == 0:
        return ad.tensor(0.0)
    if n1 == 0 or n0 == 0:
        w1 = w0 = 1.0
    else:
        w1 = n_tot / (2.0 * n1)
        w0 = n_tot / (2.0 * n0)
    total = None
    for lg, g, m in zip(logits, gts, masks, strict=True):
        if tuple(lg.shape) != g.shape:
            raise ad.ShapeError(f"logits {lg.shape} vs labels {g.shape}")
        w = np.where(g, w1, w0) * m
        term = ad.sum_(ad.sigmoid_bce(ad.astype(lg, np.float64), g.astype(np.float64), weights=w))
        total = term if total is None else total + term
    return total * (1.0 / n_tot)


def window_losses(traces, gt_positions, gt_visible, cfg: LossConfig):
    """Total, position, and visibility losses for one tracked sample."""
    gt_positions = np.asarray(gt_positions, np.float64)
    gt_visible = np.asarray(gt_visible, bool)
    preds = [tr.iter_positions for tr in traces]
    gts = [gt_positions[:, tr.start : tr.end] for tr in traces]
    masks = [tr.active for tr in traces]
    lx = loss_xyz(preds, gts, masks, cfg.gamma)
    lv = loss_vis(
        [tr.logits for tr in traces],
        [gt_visible[:, tr.start : tr.end] for tr in traces],
        masks,
    )
    return lx + lv * cfg.lambda_vis, lx, lv


# ---------------------------------------------------------------------------
# samples and augmentation


@dataclass
class TrainSample:
    """One scene with aligned ground truth, ready for the tracker."""

    scene_id: str
    rgb: np.ndarray  # (V, F, H, W, 3) uint8
    depth: np.ndarray  # (V, F, H, W) float32, NaN invalid
    cams_per_frame: list
    track_ids: np.ndarray  # (N,)
    t_q: np.ndarray  # (N,)
    queries: np.ndarray  # (N, 3)
    gt_positions: np.ndarray  # (N, F, 3)
    gt_visible: np.ndarray  # (N, F) bool


def load_sample(scene_dir, views=None, depth_source: str = "depth") -> TrainSample:
    sd = scene_io.load_scene(scene_dir, views=views, depth_source=depth_source)
    if sd.tracks is None or sd.queries is None:
        raise scene_io.SceneLayoutError(f"{scene_dir}: missing ground truth")
    track_ids = np.array([q[0] for q in sd.queries])
    t_q = np.array([q[1] for q in sd.queries])
    queries = np.array([q[2] for q in sd.queries], np.float64)
    gt_pos = np.stack([sd.tracks[int(i)][1] for i in track_ids])
    gt_vis = np.stack([sd.tracks[int(i)][2] for i in track_ids])
    return TrainSample(
        scene_id=str(Path(scene_dir).name),
        rgb=sd.rgb,
        depth=sd.depth,
        cams_per_frame=[sd.cameras_at(t) for t in range(sd.n_frames)],
        track_ids=track_ids,
        t_q=t_q,
        queries=queries,
        gt_positions=gt_pos,
        gt_visible=gt_vis,
    )


def evaluate_sample(model, sample: TrainSample, config=None,
                    window=None, iters=None) -> "metrics.SceneReport":
    """Track the sample's own queries and score them against its labels.

    Bridges the tracker to the metric suite without the CSV round trip,
    which is what the training-progress hooks and experiment scripts want.
    """
    clouds = build_clouds(model, sample.rgb, sample.depth, sample.cams_per_frame)
    states, _ = run_windowed(model, clouds, sample.track_ids, sample.t_q,
                             sample.queries, window=window, iters=iters)
    vis = predict_visibility(states.logits)
    pred, gt = {}, {}
    for i, tid in enumerate(states.track_ids):
        tq = int(sample.t_q[i])
        pred[int(tid)] = metrics.TrackRecord(states.positions[i], vis[i], t_q=tq)
        gt[int(tid)] = metrics.TrackRecord(sample.gt_positions[i], sample.gt_visible[i], t_q=tq)
    return metrics.evaluate_scene(pred, gt, config=config)


def augment_sample(sample: TrainSample, rng, view_drop: bool = True,
                   depth_sigma: float = 0.0, sim_jitter: float = 0.0) -> TrainSample:
    """Random view subset, depth noise on valid pixels, optional world
    similarity jitter. The jitter re-expresses the whole scene (cameras,
    depth scale, labels) in a new world frame, so GT stays consistent."""
    rgb, depth = sample.rgb, sample.depth
    cams_pf = sample.cams_per_frame
    queries, gt_pos = sample.queries, sample.gt_positions
    if view_drop and rgb.shape[0] > 1:
        n_views = rgb.shape[0]
        n_keep = int(rng.integers(1, n_views + 1))
        keep = np.sort(rng.choice(n_views, size=n_keep, replace=False))
        rgb = rgb[keep]
        depth = depth[keep]
        cams_pf = [[cams[i] for i in keep] for cams in cams_pf]
    if depth_sigma > 0:
        noise = rng.normal(0.0, depth_sigma, size=depth.shape).astype(depth.dtype)
        valid = np.isfinite(depth) & (depth > 0)
        depth = np.where(valid, depth + noise, depth)
    if sim_jitter > 0:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = float(rng.uniform(0.0, sim_jitter))
        scale = float(np.exp(rng.uniform(-sim_jitter, sim_jitter)))
        tvec = rng.uniform(-sim_jitter, sim_jitter, size=3)
        sim = Similarity(scale=scale, rotation=Rotation.from_rotvec(axis * angle).as_matrix(),
                         translation=tvec)
        cams_pf = [[apply_similarity(c, sim) for c in cams] for cams in cams_pf]
        depth = (depth * depth.dtype.type(scale)).astype(depth.dtype)
        queries = sim.apply(queries)
        gt_pos = sim.apply(gt_pos)
    return TrainSample(
        scene_id=sample.scene_id,
        rgb=rgb,
        depth=depth,
        cams_per_frame=cams_pf,
        track_ids=sample.track_ids,
        t_q=sample.t_q,
        queries=queries,
        gt_positions=gt_pos,
        gt_visible=sample.gt_visible,
    )


# ---------------------------------------------------------------------------
# optimization


def unrolled_train_step(model, opt, sample: TrainSample, loss_cfg: LossConfig,
                        step: int = 0, window=None, iters=None, grad_clip: float = 0.0):
    """All windows of one sample forward with handoff, one backward, one
    optimizer step. Returns the scalar losses."""
    clouds = build_clouds(model, sample.rgb, sample.depth, sample.cams_per_frame)
    try:
        _, traces = run_windowed(
            model, clouds, sample.track_ids, sample.t_q, sample.queries,
            window=window, iters=iters, training=True,
        )
    except NumericDivergenceError as e:
        raise TrainingDivergenceError(step, str(e)) from e
    total, lx, lv = window_losses(traces, sample.gt_positions, sample.gt_visible, loss_cfg)
    rec = {
        "loss": float(total.data),
        "loss_xyz": float(lx.data),
        "loss_vis": float(lv.data),
    }
    if not math.isfinite(rec["loss"]):
        raise TrainingDivergenceError(step, "non-finite loss")
    ad.backward(total)
    if grad_clip > 0:
        clip_global_norm(opt.params, grad_clip)
    opt.step()
    return rec


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 3e-3
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    seed: int = 0
    gamma: float = 0.8
    lambda_vis: float = 1.0
    window: int | None = None  # None: the model's window
    iters: int | None = None
    view_drop: bool = False
    depth_sigma: float = 0.0
    sim_jitter: float = 0.0
    checkpoint_every: int = 500
    lr_schedule: str = "constant"  # or "cosine": warmup then cosine decay
    warmup: int = 0

    def loss_config(self) -> LossConfig:
        cfg = LossConfig(gamma=self.gamma, lambda_vis=self.lambda_vis)
        cfg.validate()
        return cfg

    def lr_at(self, step: int) -> float:
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        if self.lr_schedule == "constant":
            return self.lr
        span = max(1, self.steps - self.warmup)
        frac = (step - self.warmup) / span
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def train(model: MultiViewTracker, samples, cfg: TrainConfig, out_dir,
          resume: bool = False, hook=None):
    """Run the training loop; returns the list of per-step records.

    Writes train_log.csv (step,loss,loss_xyz,loss_vis) plus model.mvck /
    model.opt.mvck checkpoints. With resume=True the loop restarts from
    the checkpoint's optimizer step and appends to the log; because each
    step reseeds from (seed, step), the resumed run replays the original
    sample sequence exactly. An optional hook(step, record, model) may
    return True to stop early.
    """
    if not samples:
        raise ValueError("no training samples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "model.mvck"
    opt_path = out / "model.opt.mvck"
    log_path = out / "train_log.csv"
    loss_cfg = cfg.loss_config()
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    start = 0
    if resume and ckpt_path.exists():
        assign_checkpoint(params, load_checkpoint(ckpt_path), strict=True)
        opt.load_state(load_checkpoint(opt_path))
        start = opt.step_count
    fresh_log = not (resume and start > 0 and log_path.exists())
    log = open(log_path, "w" if fresh_log else "a")
    history = []
    try:
        if fresh_log:
            log.write("step,loss,loss_xyz,loss_vis\n")
        for step in range(start, cfg.steps):
            opt.lr = cfg.lr_at(step)
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step]))
            sample = samples[int(rng.integers(len(samples)))]
            if cfg.view_drop or cfg.depth_sigma > 0 or cfg.sim_jitter > 0:
                sample = augment_sample(
                    sample, rng, view_drop=cfg.view_drop,
                    depth_sigma=cfg.depth_sigma, sim_jitter=cfg.sim_jitter,
                )
            rec = unrolled_train_step(
                model, opt, sample, loss_cfg, step=step,
                window=cfg.window, iters=cfg.iters, grad_clip=cfg.grad_clip,
            )
            log.write(
                f"{step},{rec['loss']:.9g},{rec['loss_xyz']:.9g},{rec['loss_vis']:.9g}\n"
            )
            log.flush()
            history.append({"step": step, **rec})
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                model.save(ckpt_path)
                save_checkpoint(opt_path, opt.state_parameters())
            if hook is not None and hook(step, rec, model):
                break
    finally:
        log.close()
    model.save(ckpt_path)
    save_checkpoint(opt_path, opt.state_parameters())
    return history


def cast_model(model, dtype=np.float64):
    """Cast every parameter in place; gradients are dropped.

    The pipeline's compute dtype follows the parameters, so a float64
    model runs entirely in float64 (finite-difference territory).
    """
    for p in model.parameters():
        p.tensor.data = np.asarray(p.tensor.data, dtype)
        p.tensor.grad = None
    return model
