"""Synthetic rigid-body scenes with analytic ray-cast rendering.

Scenes are a ground plane plus a handful of spheres and boxes moving on
piecewise-linear rigid trajectories. Rendering casts one ray per pixel
against every body; depth is camera-space z; ground truth tracks are
points sampled uniformly by area on body surfaces and advected with the
body pose. Everything is a pure function of the seed, so a dataset
regenerates byte-identically.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo
from . import scene_io

RAY_EPS = 1e-4  # world units; guards self-intersection in occlusion tests
AMBIENT = 0.3


@dataclass(frozen=True)
class Sphere:
    radius: float

    def area(self) -> float:
        return 4.0 * np.pi * self.radius**2


@dataclass(frozen=True)
class Box:
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "half_extents", np.asarray(self.half_extents, dtype=np.float64)
        )

    def area(self) -> float:
        hx, hy, hz = self.half_extents
        return 8.0 * (hx * hy + hy * hz + hx * hz)


@dataclass(frozen=True)
class GroundPlane:
    height: float = 0.0


def rodrigues(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n < 1e-12 or angle == 0.0:
        return np.eye(3)
    k = axis / n
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def _rotation_log(R: np.ndarray):
    """Axis-angle of a rotation matrix."""
    cos_a = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_a))
    if angle < 1e-9:
        return np.array([0.0, 0.0, 1.0]), 0.0
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    n = np.linalg.norm(axis)
    if n < 1e-9:  # angle near pi; fall back to eigenvector
        w, v = np.linalg.eigh(R + R.T)
        axis = v[:, -1]
    else:
        axis = axis / n
    return axis, angle


@dataclass
class KeyframeMotion:
    """Piecewise-linear rigid motion through (frame, rotation, translation) keys.

    Translation interpolates linearly inside each segment; rotation
    interpolates along the relative axis-angle, so every pose is an exact
    rotation matrix.
    """

    times: np.ndarray
    rotations: np.ndarray  # (n, 3, 3)
    translations: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.translations = np.asarray(self.translations, dtype=np.float64)
        if not (len(self.times) == len(self.rotations) == len(self.translations)):
            raise ValueError("keyframe arrays disagree in length")
        if len(self.times) < 1 or np.any(np.diff(self.times) <= 0):
            raise ValueError("keyframe times must be strictly increasing")

    @staticmethod
    def static(position=(0.0, 0.0, 0.0)) -> "KeyframeMotion":
        return KeyframeMotion([0.0], np.eye(3)[None], np.asarray(position, dtype=np.float64)[None])

    def pose_at(self, t: float):
        times = self.times
        if len(times) == 1 or t <= times[0]:
            return self.rotations[0], self.translations[0] + 0.0
        if t >= times[-1]:
            return self.rotations[-1], self.translations[-1] + 0.0
        i = int(np.searchsorted(times, t, side="right")) - 1
        t0, t1 = times[i], times[i + 1]
        u = (t - t0) / (t1 - t0)
        # translation evaluated as p0 + (t - t0) * slope so exact steps stay exact
        slope = (self.translations[i + 1] - self.translations[i]) / (t1 - t0)
        trans = self.translations[i] + (t - t0) * slope
        rel = self.rotations[i].T @ self.rotations[i + 1]
        axis, angle = _rotation_log(rel)
        rot = self.rotations[i] @ rodrigues(axis, u * angle)
        return rot, trans


@dataclass
class Albedo:
    kind: str = "solid"  # "solid" | "checker"
    color_a: np.ndarray = field(default_factory=lambda: np.array([0.8, 0.3, 0.2]))
    color_b: np.ndarray = field(default_factory=lambda: np.array([0.9, 0.9, 0.85]))
    cell: float = 0.12
    noise_amp: float = 0.25

    def __call__(self, p_local: np.ndarray) -> np.ndarray:
        p_local = np.atleast_2d(p_local)
        if self.kind == "checker":
            parity = np.floor(p_local / self.cell).sum(axis=1).astype(np.int64) & 1
            return np.where(parity[:, None] == 0, self.color_a, self.color_b)
        # solid with a deterministic positional hash for texture
        q = np.floor(p_local / self.cell)
        h = np.sin(q @ np.array([12.9898, 78.233, 37.719])) * 43758.5453
        h = h - np.floor(h)
        return np.clip(self.color_a[None, :] + self.noise_amp * (h[:, None] - 0.5), 0.0, 1.0)


@dataclass
class RigidBody:
    body_id: int
    shape: object  # Sphere | Box
    motion: KeyframeMotion
    albedo: Albedo = field(default_factory=Albedo)


@dataclass
class Scene:
    bodies: list
    n_frames: int
    ground: GroundPlane | None = None

    def poses_at(self, t: float):
        return [b.motion.pose_at(t) for b in self.bodies]


# ---------------------------------------------------------------------------
# ray intersections (all take (N, 3) origins/directions, return t or inf)


def ray_sphere(o: np.ndarray, d: np.ndarray, radius: float, t_min=1e-6) -> np.ndarray:
    a = (d * d).sum(axis=1)
    b = 2.0 * (o * d).sum(axis=1)
    c = (o * o).sum(axis=1) - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    t = np.full(len(o), np.inf)
    if hit.any():
        sq = np.sqrt(np.maximum(disc[hit], 0.0))
        a_h, b_h = a[hit], b[hit]
        t0 = (-b_h - sq) / (2.0 * a_h)
        t1 = (-b_h + sq) / (2.0 * a_h)
        tt = np.where(t0 > t_min, t0, np.where(t1 > t_min, t1, np.inf))
        t[hit] = tt
    return t


def ray_box(o: np.ndarray, d: np.ndarray, half: np.ndarray, t_min=1e-6) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        lo = (-half - o) * inv
        hi = (half - o) * inv
    near = np.minimum(lo, hi)
    far = np.maximum(lo, hi)
    # rays parallel to a slab: inside iff |o| <= half on that axis
    parallel = d == 0.0
    inside = np.abs(o) <= half
    near = np.where(parallel, np.where(inside, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside, np.inf, -np.inf), far)
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    t = np.where(t_near > t_min, t_near, t_far)
    miss = (t_far < t_near) | (t <= t_min) | ~np.isfinite(t)
    return np.where(miss, np.inf, t)


def ray_plane(o: np.ndarray, d: np.ndarray, height: float, t_min=1e-6) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - o[:, 2]) / d[:, 2]
    return np.where((d[:, 2] != 0) & (t > t_min), t, np.inf)


def _intersect_body(body: RigidBody, pose, O: np.ndarray, D: np.ndarray) -> np.ndarray:
    R, tau = pose
    o_l = (O - tau) @ R
    d_l = D @ R
    if isinstance(body.shape, Sphere):
        return ray_sphere(o_l, d_l, body.shape.radius)
    if isinstance(body.shape, Box):
        return ray_box(o_l, d_l, body.shape.half_extents)
    raise TypeError(f"unsupported shape {type(body.shape).__name__}")


def _local_normal(shape, p_local: np.ndarray) -> np.ndarray:
    if isinstance(shape, Sphere):
        return p_local / shape.radius
    ratios = np.abs(p_local) / shape.half_extents
    axis = np.argmax(ratios, axis=1)
    n = np.zeros_like(p_local)
    n[np.arange(len(p_local)), axis] = np.sign(p_local[np.arange(len(p_local)), axis])
    return n


def cast_rays(scene: Scene, poses, O: np.ndarray, D: np.ndarray):
    """Nearest hit over all bodies and the ground; returns (t, body_index).

    body_index is -1 for the ground plane and -2 for a miss.
    """
    best_t = np.full(len(O), np.inf)
    best_idx = np.full(len(O), -2, dtype=np.int64)
    for i, body in enumerate(scene.bodies):
        t = _intersect_body(body, poses[i], O, D)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_idx[closer] = i
    if scene.ground is not None:
        t = ray_plane(O, D, scene.ground.height)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_idx[closer] = -1
    return best_t, best_idx


GROUND_ALBEDO = Albedo(
    kind="checker",
    color_a=np.array([0.35, 0.38, 0.42]),
    color_b=np.array([0.55, 0.57, 0.6]),
    cell=0.4,
)


def render_view(scene: Scene, cam: geo.Camera, frame: int, resolution):
    """Ray-cast one view; returns (H, W, 3) uint8 rgb and float32 depth (NaN = miss).

    Ray directions carry camera-space z of 1, so the ray parameter at a hit
    is exactly the camera-space depth.
    """
    h, w = resolution
    poses = scene.poses_at(frame)
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix = np.stack([us.ravel(), vs.ravel(), np.ones(h * w)], axis=1)
    d_cam = pix @ cam._K_inv.T
    D = d_cam @ cam.E[:3, :3]  # rows times R gives R^T columns
    C = cam.center
    O = np.broadcast_to(C, D.shape)

    t, idx = cast_rays(scene, poses, O, D)
    depth = np.where(np.isfinite(t), t, np.nan).astype(np.float32).reshape(h, w)

    color = np.zeros((h * w, 3))
    d_unit = D / np.linalg.norm(D, axis=1, keepdims=True)
    for i in range(-1, len(scene.bodies)):
        mask = idx == i
        if not mask.any():
            continue
        hits = C + t[mask, None] * D[mask]
        if i == -1:
            n_world = np.zeros((mask.sum(), 3))
            n_world[:, 2] = 1.0
            alb = GROUND_ALBEDO(hits)
        else:
            R, tau = poses[i]
            p_local = (hits - tau) @ R
            n_local = _local_normal(scene.bodies[i].shape, p_local)
            n_world = n_local @ R.T
            alb = scene.bodies[i].albedo(p_local)
        facing = -(n_world * d_unit[mask]).sum(axis=1)
        lambert = np.abs(facing)
        shade = AMBIENT + (1.0 - AMBIENT) * lambert
        color[mask] = alb * shade[:, None]
    rgb = (np.clip(color, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8).reshape(h, w, 3)
    return rgb, depth


# ---------------------------------------------------------------------------
# ground-truth tracks


def sample_surface_point(shape, rng) -> np.ndarray:
    if isinstance(shape, Sphere):
        v = rng.standard_normal(3)
        v /= np.linalg.norm(v)
        return v * shape.radius
    if isinstance(shape, Box):
        hx, hy, hz = shape.half_extents
        face_areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
        face = rng.choice(6, p=face_areas / face_areas.sum())
        u, v = rng.uniform(-1.0, 1.0, size=2)
        axis = face // 2
        sign = 1.0 if face % 2 == 0 else -1.0
        p = np.empty(3)
        p[axis] = sign * shape.half_extents[axis]
        others = [a for a in range(3) if a != axis]
        p[others[0]] = u * shape.half_extents[others[0]]
        p[others[1]] = v * shape.half_extents[others[1]]
        return p
    raise TypeError(f"cannot sample surface of {type(shape).__name__}")


def point_visibility(scene: Scene, poses, cams: list, points: np.ndarray) -> np.ndarray:
    """Visibility of world points, OR-reduced over the given cameras.

    A point is visible in a view when it projects inside the image in
    front of the camera and no body surface lies closer along the ray
    (with an epsilon of RAY_EPS world units for the point's own surface).
    """
    n = len(points)
    vis = np.zeros(n, dtype=bool)
    for cam in cams:
        pix, depth, behind = geo.project_points(cam, points)
        ok = ~behind
        if cam.has_bounds():
            with np.errstate(invalid="ignore"):
                ok &= (
                    (pix[:, 0] >= -0.5)
                    & (pix[:, 0] < cam.width - 0.5)
                    & (pix[:, 1] >= -0.5)
                    & (pix[:, 1] < cam.height - 0.5)
                )
        cand = np.where(ok & ~vis)[0]
        if cand.size == 0:
            continue
        C = cam.center
        D = points[cand] - C
        O = np.broadcast_to(C, D.shape)
        t, _ = cast_rays(scene, poses, O, D)
        dist = np.linalg.norm(D, axis=1)
        clear = t >= 1.0 - RAY_EPS / np.maximum(dist, 1e-12)
        vis[cand[clear]] = True
    return vis


@dataclass
class GroundTruthTrack:
    track_id: int
    body_id: int
    positions: np.ndarray  # (F, 3)
    visible: np.ndarray  # (F,) bool
    t_q: int


def sample_tracks(scene: Scene, cams_per_frame, n_tracks: int, rng, query_mode="first"):
    """Sample track points on body surfaces and advect them through all frames.

    cams_per_frame: callable frame -> list of Cameras. Points that are never
    visible in any view are resampled a few times, then kept (callers may
    exclude them downstream).
    """
    bodies = scene.bodies
    if not bodies:
        raise ValueError("scene has no bodies to sample tracks from")
    areas = np.array([b.shape.area() for b in bodies])
    probs = areas / areas.sum()
    F = scene.n_frames
    all_poses = [scene.poses_at(t) for t in range(F)]
    cams = [cams_per_frame(t) for t in range(F)]

    tracks = []
    for tid in range(n_tracks):
        for _attempt in range(20):
            bi = int(rng.choice(len(bodies), p=probs))
            p_local = sample_surface_point(bodies[bi].shape, rng)
            pos = np.empty((F, 3))
            for t in range(F):
                R, tau = all_poses[t][bi]
                pos[t] = R @ p_local + tau
            visible = np.empty(F, dtype=bool)
            for t in range(F):
                visible[t] = point_visibility(scene, all_poses[t], cams[t], pos[t][None])[0]
            if visible.any():
                break
        if visible.any():
            if query_mode == "first":
                t_q = int(np.argmax(visible))
            elif query_mode == "random":
                t_q = int(rng.choice(np.where(visible)[0]))
            else:
                raise ValueError(f"unknown query_mode {query_mode!r}")
        else:
            t_q = 0
        tracks.append(
            GroundTruthTrack(tid, bodies[bi].body_id, pos, visible, t_q)
        )
    return tracks


# ---------------------------------------------------------------------------
# random scene construction and dataset generation


@dataclass
class SimConfig:
    scenes: int = 8
    views: int = 4
    frames: int = 24
    height: int = 64
    width: int = 64
    tracks: int = 32
    seed: int = 0
    max_step: float = 0.05  # per-frame displacement cap, world units
    max_spin: float = 0.08  # per-frame rotation cap, radians
    min_bodies: int = 3
    max_bodies: int = 5
    static_fraction: float = 0.35
    query_mode: str = "first"
    threshold_scale: float = 1.0
    threads: int = 1

    def validate(self):
        if not 1 <= self.views <= 8:
            raise ValueError(f"views must be in 1..8, got {self.views}")
        if self.frames < 1 or self.scenes < 1 or self.tracks < 1:
            raise ValueError("scenes, frames, and tracks must be positive")
        if self.height % 32 or self.width % 32:
            raise ValueError("resolution must be divisible by 32 for the feature pyramid")


def build_cameras(rng, cfg: SimConfig) -> list:
    calibs = []
    f = 0.9 * cfg.width
    K = np.array(
        [[f, 0.0, (cfg.width - 1) / 2.0], [0.0, f, (cfg.height - 1) / 2.0], [0.0, 0.0, 1.0]]
    )
    for v in range(cfg.views):
        azim = 2.0 * np.pi * v / cfg.views + rng.uniform(-0.25, 0.25)
        elev = rng.uniform(0.35, 0.85)
        radius = rng.uniform(2.9, 3.5)
        center = np.array(
            [
                radius * np.cos(azim) * np.cos(elev),
                radius * np.sin(azim) * np.cos(elev),
                radius * np.sin(elev),
            ]
        )
        target = np.array([0.0, 0.0, 0.45]) + rng.uniform(-0.15, 0.15, size=3)
        E = geo.look_at(center, target)
        calibs.append(geo.ViewCalibration(v, K.copy(), E=E))
    return calibs


def build_scene(rng, cfg: SimConfig) -> Scene:
    n_bodies = int(rng.integers(cfg.min_bodies, cfg.max_bodies + 1))
    moving = rng.random(n_bodies) >= cfg.static_fraction
    if not moving.any():
        moving[0] = True
    if moving.all() and n_bodies > 1:
        moving[-1] = False

    palette = np.array(
        [
            [0.85, 0.3, 0.25],
            [0.25, 0.55, 0.85],
            [0.3, 0.75, 0.4],
            [0.9, 0.7, 0.2],
            [0.7, 0.4, 0.8],
            [0.9, 0.5, 0.6],
        ]
    )
    bodies = []
    F = cfg.frames
    for i in range(n_bodies):
        if rng.random() < 0.5:
            shape = Sphere(radius=float(rng.uniform(0.16, 0.34)))
            extent = shape.radius
        else:
            half = rng.uniform(0.12, 0.28, size=3)
            shape = Box(half_extents=half)
            extent = float(half.max())
        base = np.array(
            [
                rng.uniform(-0.75, 0.75),
                rng.uniform(-0.75, 0.75),
                rng.uniform(extent + 0.05, 1.0),
            ]
        )
        if not moving[i] or F < 2:
            motion = KeyframeMotion.static(base)
        else:
            times = [0.0, float(F - 1)]
            if F > 8 and rng.random() < 0.5:
                times = [0.0, float(F // 2), float(F - 1)]
            positions = [base]
            for a, b in zip(times[:-1], times[1:]):
                span = b - a
                step = rng.standard_normal(3)
                step /= max(np.linalg.norm(step), 1e-9)
                step *= rng.uniform(0.3, 1.0) * cfg.max_step
                nxt = positions[-1] + step * span
                nxt = np.clip(nxt, [-0.85, -0.85, extent + 0.05], [0.85, 0.85, 1.15])
                positions.append(nxt)
            axis = rng.standard_normal(3)
            axis /= max(np.linalg.norm(axis), 1e-9)
            rate = rng.uniform(0.0, cfg.max_spin)
            rotations = [rodrigues(axis, rate * t) for t in times]
            motion = KeyframeMotion(times, np.stack(rotations), np.stack(positions))
        kind = "checker" if rng.random() < 0.5 else "solid"
        albedo = Albedo(
            kind=kind,
            color_a=palette[i % len(palette)].copy(),
            color_b=palette[(i + 3) % len(palette)].copy(),
            cell=float(rng.uniform(0.08, 0.18)),
        )
        bodies.append(RigidBody(body_id=i, shape=shape, motion=motion, albedo=albedo))
    return Scene(bodies=bodies, n_frames=F, ground=GroundPlane(0.0))


def generate_scene(cfg: SimConfig, scene_index: int, out_dir) -> Path:
    """Build, render, and write one scene directory."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, scene_index]))
    scene = build_scene(rng, cfg)
    calibs = build_cameras(rng, cfg)

    scene_dir = Path(out_dir) / f"scene_{scene_index:04d}"
    for calib in calibs:
        (scene_dir / "rgb" / f"view{calib.view_id}").mkdir(parents=True, exist_ok=True)
        (scene_dir / "depth" / f"view{calib.view_id}").mkdir(parents=True, exist_ok=True)

    for t in range(cfg.frames):
        for calib in calibs:
            cam = calib.at(t, width=cfg.width, height=cfg.height)
            rgb, depth = render_view(scene, cam, t, (cfg.height, cfg.width))
            scene_io.write_ppm(scene_dir / "rgb" / f"view{calib.view_id}" / f"frame{t}.ppm", rgb)
            scene_io.write_mvd(
                scene_dir / "depth" / f"view{calib.view_id}" / f"frame{t}.mvd", depth
            )

    def cams_at(t):
        return [c.at(t, width=cfg.width, height=cfg.height) for c in calibs]

    tracks = sample_tracks(scene, cams_at, cfg.tracks, rng, query_mode=cfg.query_mode)

    track_rows = []
    query_rows = []
    for tr in tracks:
        for t in range(cfg.frames):
            track_rows.append(
                (tr.track_id, t, tr.positions[t, 0], tr.positions[t, 1], tr.positions[t, 2], int(tr.visible[t]))
            )
        q = tr.positions[tr.t_q]
        query_rows.append((tr.track_id, tr.t_q, q[0], q[1], q[2]))
    scene_io.write_tracks_csv(scene_dir / "gt_tracks.csv", track_rows)
    scene_io.write_queries_csv(scene_dir / "queries.csv", query_rows)

    geo.save_cameras(scene_dir / "cameras.json", calibs)
    scene_io.write_manifest(
        scene_dir / "manifest.json",
        {
            "scene_id": f"scene_{scene_index:04d}",
            "seed": cfg.seed,
            "scene_index": scene_index,
            "n_views": cfg.views,
            "n_frames": cfg.frames,
            "resolution": [cfg.height, cfg.width],
            "n_tracks": cfg.tracks,
            "units": "scene_units",
            "threshold_scale": cfg.threshold_scale,
            "formats": {"rgb": "P6", "depth": "MVD1"},
        },
    )
    return scene_dir


def generate_dataset(cfg: SimConfig, out_dir) -> list[Path]:
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    indices = list(range(cfg.scenes))
    if cfg.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            dirs = list(pool.map(lambda i: generate_scene(cfg, i, out_dir), indices))
    else:
        dirs = [generate_scene(cfg, i, out_dir) for i in indices]
    return dirs
