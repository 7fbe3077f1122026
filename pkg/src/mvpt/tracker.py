"""Iterative transformer refinement of 3D tracks over sliding windows.

Each track/frame pair becomes a token: sinusoidal encoding of the
displacement from the query point, the per-frame track feature, the
flattened multi-scale kNN correlation, and the current visibility logit.
A small transformer alternates temporal self-attention (frames of one
track) with cross-attention against a set of learned virtual tracks that
carry information between real tracks, and emits residual position and
feature updates. Visibility is read off the refined feature only after
the final iteration.

Long videos run in windows of T frames at stride T/2; each window's
final state seeds the next (overlap frames directly, the rest by
carrying the last estimate forward), and overlapped frames report the
later window's output. Tracks whose query frame lies inside a window
activate mid-window: earlier frames hold the query position and are
masked out of attention and updates.

Positions stay float64 end to end; model compute is float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import correlation as corr
from .autodiff import Tensor
from .encoder import EncoderConfig, FeatureEncoder, preprocess_images
from .optim import Parameter, assign_checkpoint, load_checkpoint, save_checkpoint
from .pointcloud import SceneClouds, build_scene_clouds, init_track_features


class NumericDivergenceError(RuntimeError):
    """Refinement produced non-finite values."""

    def __init__(self, iteration: int, detail: str = ""):
        self.iteration = iteration
        msg = f"numeric divergence at refinement iteration {iteration}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class QueryFrameError(ValueError):
    """One or more query frames fall outside the video."""

    def __init__(self, track_ids, n_frames):
        self.track_ids = list(track_ids)
        super().__init__(
            f"query frames outside video of length {n_frames} for tracks {self.track_ids}"
        )


@dataclass
class TrackerConfig:
    feature_dim: int = 128
    num_freqs: int = 10
    n_scales: int = 4
    k: int = 16
    corr_mode: str = "offset_only"
    hidden: int = 256
    heads: int = 8  # hidden must split evenly across heads
    blocks: int = 6
    v_virt: int = 64
    mlp_ratio: int = 4
    window: int = 12
    iters: int = 4

    @property
    def token_width(self) -> int:
        return (
            6 * self.num_freqs
            + self.feature_dim
            + corr.embed_width(self.n_scales, self.k, self.corr_mode)
            + 1
        )

    def validate(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.heads} heads")
        if self.window < 2 or self.window % 2:
            raise ValueError(f"window must be even and >= 2, got {self.window}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.corr_mode not in corr.MODES:
            raise ValueError(f"unknown correlation mode {self.corr_mode!r}")
        if self.v_virt < 1 or self.blocks < 1:
            raise ValueError("need at least one virtual track and one block")


def _lin(rng, shape, fan_in):
    return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(np.float32)


class Refiner:
    """Transformer over track tokens producing (delta position, delta feature)."""

    def __init__(self, cfg: TrackerConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h, d, r = cfg.hidden, cfg.feature_dim, cfg.mlp_ratio
        P = {}
        P["in.w"] = _lin(rng, (cfg.token_width, h), cfg.token_width)
        P["in.b"] = np.zeros(h, np.float32)
        P["time"] = (0.02 * rng.standard_normal((cfg.window, h))).astype(np.float32)
        P["virtual"] = (0.02 * rng.standard_normal((cfg.v_virt, h))).astype(np.float32)
        for i in range(cfg.blocks):
            if i % 2 == 0:
                self._init_attn(P, rng, f"block{i}")
            else:
                self._init_attn(P, rng, f"block{i}.pull", cross=True)
                self._init_attn(P, rng, f"block{i}.push", cross=True)
        P["out.ln.g"] = np.ones(h, np.float32)
        P["out.ln.o"] = np.zeros(h, np.float32)
        # zero-init head: iteration 1 of an untrained model is a no-op
        P["out.w"] = np.zeros((h, 3 + d), np.float32)
        P["out.b"] = np.zeros(3 + d, np.float32)
        P["vis.w"] = _lin(rng, (d, 1), d)
        self.params = {k: ad.tensor(v, requires_grad=True) for k, v in P.items()}

    def _init_attn(self, P, rng, pre, cross=False):
        h, r = self.cfg.hidden, self.cfg.mlp_ratio
        if cross:
            P[pre + ".lnq.g"] = np.ones(h, np.float32)
            P[pre + ".lnq.o"] = np.zeros(h, np.float32)
            P[pre + ".lnk.g"] = np.ones(h, np.float32)
            P[pre + ".lnk.o"] = np.zeros(h, np.float32)
        else:
            P[pre + ".ln1.g"] = np.ones(h, np.float32)
            P[pre + ".ln1.o"] = np.zeros(h, np.float32)
        for nm in ("wq", "wk", "wv", "wo"):
            P[pre + ".attn." + nm] = _lin(rng, (h, h), h)
        for nm in ("bq", "bk", "bv", "bo"):
            P[pre + ".attn." + nm] = np.zeros(h, np.float32)
        P[pre + ".ln2.g"] = np.ones(h, np.float32)
        P[pre + ".ln2.o"] = np.zeros(h, np.float32)
        P[pre + ".mlp.w1"] = _lin(rng, (h, r * h), h)
        P[pre + ".mlp.b1"] = np.zeros(r * h, np.float32)
        P[pre + ".mlp.w2"] = _lin(rng, (r * h, h), r * h)
        P[pre + ".mlp.b2"] = np.zeros(h, np.float32)

    def parameters(self) -> list[Parameter]:
        return [Parameter("refiner." + k, v) for k, v in sorted(self.params.items())]

    def n_parameters(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.params.values())

    # -- building blocks ---------------------------------------------------

    def _ln(self, x, pre):
        P = self.params
        return ad.layer_norm(x, P[pre + ".g"], P[pre + ".o"], axis=-1)

    def _mha(self, q_in, kv_in, pre, key_mask=None):
        """q_in (B, Lq, h), kv_in (B, Lk, h); key_mask broadcastable to scores."""
        P, cfg = self.params, self.cfg
        nh, dh = cfg.heads, cfg.hidden // cfg.heads
        b, lq = q_in.shape[0], q_in.shape[1]
        lk = kv_in.shape[1]

        def heads(x, l):
            return ad.transpose(ad.reshape(x, (b, l, nh, dh)), (0, 2, 1, 3))

        q = heads(ad.matmul(q_in, P[pre + ".wq"]) + P[pre + ".bq"], lq)
        k = heads(ad.matmul(kv_in, P[pre + ".wk"]) + P[pre + ".bk"], lk)
        v = heads(ad.matmul(kv_in, P[pre + ".wv"]) + P[pre + ".bv"], lk)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        if key_mask is None:
            att = ad.softmax(scores, axis=-1)
        else:
            att = ad.masked_softmax(scores, key_mask, axis=-1)
        out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, lq, cfg.hidden))
        return ad.matmul(out, P[pre + ".wo"]) + P[pre + ".bo"]

    def _mlp(self, x, pre):
        P = self.params
        h1 = ad.gelu(ad.matmul(x, P[pre + ".w1"]) + P[pre + ".b1"])
        return ad.matmul(h1, P[pre + ".w2"]) + P[pre + ".b2"]

    def _time_block(self, x, pre, key_mask):
        # key_mask (B, T): inactive frames contribute no keys
        xn = self._ln(x, pre + ".ln1")
        x = x + self._mha(xn, xn, pre + ".attn", key_mask[:, None, None, :])
        return x + self._mlp(self._ln(x, pre + ".ln2"), pre + ".mlp")

    def _cross_block(self, q_x, kv_x, pre, key_mask=None):
        qn = self._ln(q_x, pre + ".lnq")
        kn = self._ln(kv_x, pre + ".lnk")
        mask = None if key_mask is None else key_mask[:, None, None, :]
        q_x = q_x + self._mha(qn, kn, pre + ".attn", mask)
        return q_x + self._mlp(self._ln(q_x, pre + ".ln2"), pre + ".mlp")

    def forward(self, tokens: Tensor, active: np.ndarray) -> Tensor:
        """tokens (N, T, token_width) float32, active (N, T) bool ->
        residual updates (N, T, 3 + d) float32."""
        P, cfg = self.params, self.cfg
        n, t = tokens.shape[0], tokens.shape[1]
        if t > cfg.window:
            raise ValueError(f"window of {t} frames exceeds model maximum {cfg.window}")
        if tokens.shape[2] != cfg.token_width:
            raise ad.ShapeError(f"tokens {tokens.shape}, expected width {cfg.token_width}")
        active = np.asarray(active, bool)
        time = ad.reshape(P["time"][:t], (1, t, cfg.hidden))
        x = ad.matmul(tokens, P["in.w"]) + P["in.b"] + time
        virt = ad.reshape(P["virtual"], (cfg.v_virt, 1, cfg.hidden)) + time
        for i in range(cfg.blocks):
            if i % 2 == 0:
                full = ad.concat([x, virt], axis=0)
                mask = np.concatenate([active, np.ones((cfg.v_virt, t), bool)], axis=0)
                full = self._time_block(full, f"block{i}", mask)
                x, virt = full[:n], full[n:]
            else:
                # per-frame exchange: virtual tracks pool the active real
                # tracks, then broadcast back
                xr = ad.transpose(x, (1, 0, 2))
                xv = ad.transpose(virt, (1, 0, 2))
                xv = self._cross_block(xv, xr, f"block{i}.pull", key_mask=active.T)
                xr = self._cross_block(xr, xv, f"block{i}.push")
                x = ad.transpose(xr, (1, 0, 2))
                virt = ad.transpose(xv, (1, 0, 2))
        return ad.matmul(self._ln(x, "out.ln"), P["out.w"]) + P["out.b"]


# ---------------------------------------------------------------------------
# tokens and window refinement


def build_tokens(scene, positions, features, logit_slot, queries, frames, cfg) -> Tensor:
    """Assemble (N, T, token_width) tokens from the current track state.

    positions (N, T, 3) f64, features (N, T, d) f32, logit_slot (N, T, 1)
    f32, queries (N, 3) world points. Correlation is recomputed from the
    positions and features passed in.
    """
    cemb = corr.correlate_tracks(
        scene, positions, frames, features, k=cfg.k, mode=cfg.corr_mode
    )
    disp = positions - ad.tensor(np.asarray(queries, np.float64)[:, None, :])
    enc = ad.encode_positions(ad.astype(disp, features.dtype), cfg.num_freqs)
    return ad.concat([enc, features, cemb, logit_slot], axis=2)


def refine_window(refiner, scene, frames, positions, features, logit_slot, queries, t_q, iters):
    """Run M refinement iterations inside one window.

    positions (N, T, 3) f64 tensor, features (N, T, d) f32 tensor,
    logit_slot (N, T, 1) f32 tensor, frames the T absolute indices.
    Returns (per-iteration positions, final features, final logits (N, T)).

    Frames at t < t_q hold the query position and receive no updates;
    the t_q frame itself is pinned by masking its position delta, so the
    query constraint is exact rather than re-applied approximately.
    """
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    cfg = refiner.cfg
    n, tw = positions.shape[0], positions.shape[1]
    frames = np.asarray(frames)
    t_q = np.asarray(t_q)
    queries = np.asarray(queries, np.float64)
    active = frames[None, :] >= t_q[:, None]
    free = frames[None, :] > t_q[:, None]
    # entry clamp: frames at or before t_q start exactly at the query
    fmask = ad.tensor(free[:, :, None].astype(np.float64))
    pos = positions * fmask + ad.tensor(
        np.where(free[:, :, None], 0.0, queries[:, None, :])
    )
    amask = ad.tensor(active[:, :, None].astype(features.dtype))
    iter_positions = []
    for m in range(1, iters + 1):
        tokens = build_tokens(scene, pos, features, logit_slot, queries, frames, cfg)
        delta = refiner.forward(tokens, active)
        if not np.isfinite(delta.data).all():
            raise NumericDivergenceError(m, "non-finite update")
        pos = pos + ad.astype(delta[..., :3], np.float64) * fmask
        features = features + delta[..., 3:] * amask
        if not np.isfinite(pos.data).all():
            raise NumericDivergenceError(m, "non-finite positions")
        iter_positions.append(pos)
    logits = ad.reshape(ad.matmul(features, refiner.params["vis.w"]), (n, tw))
    return iter_positions, features, logits


def plan_windows(n_frames: int, window: int) -> list[tuple[int, int]]:
    """Spans (start, end) at stride window/2; the last span clamps to the
    video end. Videos no longer than the window give a single span."""
    if n_frames < 1:
        raise ValueError(f"empty video: {n_frames} frames")
    if n_frames <= window:
        return [(0, n_frames)]
    if window % 2:
        raise ValueError(f"window must be even, got {window}")
    spans = []
    start = 0
    while True:
        if start + window >= n_frames:
            spans.append((n_frames - window, n_frames))
            break
        spans.append((start, start + window))
        start += window // 2
    return spans


# ---------------------------------------------------------------------------
# full-video tracking


@dataclass
class TrackStates:
    """Final per-track estimates over the whole video."""

    track_ids: np.ndarray  # (N,)
    t_q: np.ndarray  # (N,)
    queries: np.ndarray  # (N, 3) float64
    positions: np.ndarray  # (N, F, 3) float64
    logits: np.ndarray  # (N, F) float32, 0 before activation
    active: np.ndarray  # (N, F) bool, t >= t_q

    @property
    def n_tracks(self) -> int:
        return len(self.track_ids)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[1]


@dataclass
class WindowTrace:
    """Graph-linked per-window outputs kept for the training loss."""

    start: int
    end: int
    frames: np.ndarray  # (T,)
    active: np.ndarray  # (N, T) bool
    iter_positions: list  # M tensors (N, T, 3) float64
    logits: Tensor  # (N, T) float32


def predict_visibility(logits, threshold: float = 0.5) -> np.ndarray:
    """sigmoid(logit) >= threshold; the 0-logit boundary counts visible."""
    return expit(np.asarray(logits, np.float64)) >= threshold


def _carry(tensor, offset, fresh, dtype):
    """Slice a previous window's tensor from `offset` and extend it by
    `fresh` copies of its last column."""
    head = tensor[:, offset:]
    if fresh == 0:
        return head
    last = tensor[:, tensor.shape[1] - 1 : tensor.shape[1]]
    shape = (1, fresh) + (1,) * (tensor.ndim - 2)
    return ad.concat([head, last * ad.tensor(np.ones(shape, dtype))], axis=1)


def run_windowed(
    model,
    scene: SceneClouds,
    track_ids,
    t_q,
    queries,
    window: int | None = None,
    iters: int | None = None,
    training: bool = False,
):
    """Track all queries through the video in overlapping windows.

    Returns (TrackStates, [WindowTrace]). With training=True every window
    stays graph-linked to the previous one so gradients flow through the
    handoff; otherwise each window starts from detached state.
    """
    cfg = model.refiner.cfg
    T = cfg.window if window is None else int(window)
    M = cfg.iters if iters is None else int(iters)
    n_frames = scene.n_frames
    track_ids = np.asarray(track_ids)
    t_q = np.asarray(t_q, np.int64)
    queries = np.asarray(queries, np.float64)
    n = len(track_ids)
    bad = (t_q < 0) | (t_q >= n_frames)
    if bad.any():
        raise QueryFrameError(track_ids[bad], n_frames)

    f0 = init_track_features(scene, t_q, queries)  # (N, d), graph-linked
    d = f0.shape[1]
    dt = f0.dtype
    pos_g = np.tile(queries[:, None, :], (1, n_frames, 1))
    logit_g = np.zeros((n, n_frames), np.float32)
    traces = []
    prev = None
    for start, end in plan_windows(n_frames, T):
        tw = end - start
        frames = np.arange(start, end)
        if prev is None:
            p0 = ad.tensor(np.tile(queries[:, None, :], (1, tw, 1)))
            fe0 = ad.reshape(f0, (n, 1, d)) * ad.tensor(np.ones((1, tw, 1), dt))
            lg0 = ad.tensor(np.zeros((n, tw, 1), dt))
        else:
            p_start, p_end, p_pos, p_feat, p_log = prev
            offset, fresh = start - p_start, end - p_end
            p0 = _carry(p_pos, offset, fresh, np.float64)
            fe0 = _carry(p_feat, offset, fresh, dt)
            lg0 = _carry(p_log, offset, fresh, dt)
        if not training:
            p0 = ad.tensor(p0.data)
            fe0 = ad.tensor(fe0.data)
            lg0 = ad.tensor(lg0.data)
        iter_pos, feats, logits = refine_window(
            model.refiner, scene, frames, p0, fe0, lg0, queries, t_q, M
        )
        active_w = frames[None, :] >= t_q[:, None]
        traces.append(WindowTrace(start, end, frames, active_w, iter_pos, logits))
        pos_g[:, start:end] = iter_pos[-1].data
        logit_g[:, start:end] = logits.data
        prev = (start, end, iter_pos[-1], feats, ad.reshape(logits, (n, tw, 1)))

    inactive = np.arange(n_frames)[None, :] < t_q[:, None]
    pos_g = np.where(inactive[:, :, None], queries[:, None, :], pos_g)
    logit_g = np.where(inactive, np.float32(0.0), logit_g)
    states = TrackStates(
        track_ids=track_ids,
        t_q=t_q,
        queries=queries,
        positions=pos_g,
        logits=logit_g,
        active=~inactive,
    )
    return states, traces


# ---------------------------------------------------------------------------
# model bundle


class MultiViewTracker:
    """Feature encoder + transformer refiner with checkpoint round trips."""

    def __init__(self, encoder_cfg: EncoderConfig | None = None,
                 tracker_cfg: TrackerConfig | None = None, seed: int = 0):
        self.encoder_cfg = encoder_cfg if encoder_cfg is not None else EncoderConfig()
        self.tracker_cfg = tracker_cfg if tracker_cfg is not None else TrackerConfig()
        if self.encoder_cfg.feature_dim != self.tracker_cfg.feature_dim:
            raise ValueError(
                f"encoder feature_dim {self.encoder_cfg.feature_dim} != "
                f"tracker feature_dim {self.tracker_cfg.feature_dim}"
            )
        if self.encoder_cfg.n_scales != self.tracker_cfg.n_scales:
            raise ValueError(
                f"encoder n_scales {self.encoder_cfg.n_scales} != "
                f"tracker n_scales {self.tracker_cfg.n_scales}"
            )
        self.encoder = FeatureEncoder(self.encoder_cfg, seed=seed)
        self.refiner = Refiner(self.tracker_cfg, seed=seed + 1)

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.refiner.parameters()

    def save(self, path):
        save_checkpoint(path, self.parameters())
        with open(str(path) + ".json", "w") as f:
            json.dump(
                {"encoder": asdict(self.encoder_cfg), "tracker": asdict(self.tracker_cfg)},
                f,
                indent=1,
                sort_keys=True,
            )
            f.write("\n")

    @classmethod
    def load(cls, path) -> "MultiViewTracker":
        with open(str(path) + ".json") as f:
            cfgs = json.load(f)
        model = cls(EncoderConfig(**cfgs["encoder"]), TrackerConfig(**cfgs["tracker"]))
        assign_checkpoint(model.parameters(), load_checkpoint(path), strict=True)
        return model


def build_clouds(model, rgb, depth, cams_per_frame) -> SceneClouds:
    """Encode every frame and fuse per-scale clouds for a whole video.

    rgb (V, F, H, W, 3) uint8, depth (V, F, H, W); invalid depth is NaN
    or non-positive.
    """
    n_frames = rgb.shape[1]
    pyramids = []
    for t in range(n_frames):
        pyramids.append(model.encoder.pyramid(preprocess_images(rgb[:, t])))
    return build_scene_clouds(pyramids, depth, cams_per_frame)


def track_scene(model, scene_data, window=None, iters=None, training=False, queries=None):
    """End-to-end tracking of one loaded scene.

    queries defaults to the scene's query list [(track_id, t_q, xyz)].
    Returns (TrackStates, traces, SceneClouds).
    """
    clouds = build_clouds(
        model,
        scene_data.rgb,
        scene_data.depth,
        [scene_data.cameras_at(t) for t in range(scene_data.n_frames)],
    )
    if queries is None:
        queries = scene_data.queries
    track_ids = np.array([q[0] for q in queries])
    t_q = np.array([q[1] for q in queries])
    q_xyz = np.array([q[2] for q in queries], np.float64)
    states, traces = run_windowed(
        model, clouds, track_ids, t_q, q_xyz,
        window=window, iters=iters, training=training,
    )
    return states, traces, clouds


def states_to_csv(states: TrackStates, path, threshold: float = 0.5):
    """Predicted-tracks CSV: track_id,t,x,y,z,visible,confidence."""
    from . import scene_io

    conf = expit(states.logits.astype(np.float64))
    scene_io.write_predicted_csv(
        path, states.track_ids, states.positions, conf >= threshold, conf
    )
