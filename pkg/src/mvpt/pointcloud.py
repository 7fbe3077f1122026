"""Fusing per-view features and depth into 3D point clouds, plus exact kNN.

Each pyramid scale of each frame becomes one fused cloud: every feature
cell with a valid depth sample is unprojected at its cell center into
world space and keeps its feature vector. Positions are float64 end to
end; features stay on the autodiff tape.

kNN is exact. Small clouds use brute force; larger ones a uniform voxel
grid with shell expansion, with ties broken by array order in both paths
so results are interchangeable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import geometry as geo
from .autodiff import Tensor
from .scene_io import _fmt

BRUTE_FORCE_LIMIT = 512  # below this many points an index buys nothing


class EmptyCloudError(ValueError):
    """A pyramid scale produced no valid fused points."""


@dataclass
class FusedPointCloud:
    scale: int  # 1-indexed pyramid scale
    positions: np.ndarray  # (N, 3) float64 world coordinates
    features: Tensor  # (N, d) float32, graph-connected
    origins: np.ndarray  # (N, 3) int32 rows of (view, cell_row, cell_col)

    def __len__(self) -> int:
        return len(self.positions)


def fuse_views(feats: Tensor, depth_full: np.ndarray, cams: list, scale: int) -> FusedPointCloud:
    """Fuse one frame's per-view feature maps at one scale.

    feats: (V, d, h, w) feature tensor; depth_full: (V, H, W) full-resolution
    depth with NaN for invalid pixels. Depth is sampled at the pixel nearest
    each cell center, the cell center itself is unprojected.
    """
    v_count, d, h, w = feats.shape
    if len(cams) != v_count or depth_full.shape[0] != v_count:
        raise ValueError(
            f"got {v_count} feature maps, {len(cams)} cameras, "
            f"{depth_full.shape[0]} depth maps"
        )
    cell = enc.BASE_STRIDE * 2 ** (scale - 1)
    H, W = depth_full.shape[1], depth_full.shape[2]
    if h * cell != H or w * cell != W:
        raise ValueError(f"scale {scale}: {h}x{w} cells do not tile {H}x{W} pixels")

    # cell centers in full-res pixel coordinates, and the depth sample pixel
    us = enc.cell_center_pixel(np.arange(w), scale)
    vs = enc.cell_center_pixel(np.arange(h), scale)
    iu = (np.arange(w) * cell + cell // 2).astype(np.intp)
    iv = (np.arange(h) * cell + cell // 2).astype(np.intp)

    uu, vv = np.meshgrid(us, vs)
    centers = np.stack([uu.ravel(), vv.ravel()], axis=1)  # (h*w, 2)

    masks = []
    positions = []
    origins = []
    for view in range(v_count):
        dmap = depth_full[view][np.ix_(iv, iu)].astype(np.float64).ravel()
        valid = np.isfinite(dmap) & (dmap > 0)
        masks.append(valid)
        if valid.any():
            positions.append(geo.unproject_pixels(cams[view], centers[valid], dmap[valid]))
            rows, cols = np.divmod(np.nonzero(valid)[0], w)
            org = np.empty((valid.sum(), 3), dtype=np.int32)
            org[:, 0] = view
            org[:, 1] = rows
            org[:, 2] = cols
            origins.append(org)

    if not positions:
        raise EmptyCloudError(f"no valid depth at scale {scale} in any view")

    # (V, d, h, w) -> (V*h*w, d), then one boolean gather over all views
    flat = ad.reshape(ad.transpose(feats, (0, 2, 3, 1)), (v_count * h * w, d))
    features = flat[np.concatenate(masks)]
    return FusedPointCloud(
        scale=scale,
        positions=np.concatenate(positions),
        features=features,
        origins=np.concatenate(origins),
    )


def fuse_frame(pyramid: list, depth_full: np.ndarray, cams: list) -> list:
    """One frame's pyramid (list of (V, d, h, w) tensors) to one cloud per scale."""
    return [fuse_views(f, depth_full, cams, scale=s + 1) for s, f in enumerate(pyramid)]


def dump_csv(cloud: FusedPointCloud, path):
    with open(path, "w") as f:
        f.write("x,y,z,view,row,col\n")
        for org, pos in zip(cloud.origins, cloud.positions):
            f.write(
                f"{_fmt(pos[0])},{_fmt(pos[1])},{_fmt(pos[2])},{org[0]},{org[1]},{org[2]}\n"
            )


# ---------------------------------------------------------------------------
# exact kNN


def brute_force_knn(positions: np.ndarray, query: np.ndarray, k: int):
    """Indices and squared distances of the k nearest points, ties broken by
    index order. Returns fewer than k when the cloud is smaller."""
    d2 = ((positions - query) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")[: min(k, len(positions))]
    return order, d2[order]


class VoxelIndex:
    """Uniform voxel grid over a fixed point set for exact kNN queries.

    Cells are cubes sized so the average occupancy is near ``target_per_cell``.
    Queries expand outward in Chebyshev shells; a shell at radius r can hold
    no point closer than (r-1)*cell to the query, which bounds termination.
    """

    def __init__(self, positions: np.ndarray, target_per_cell: int = 8):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError(f"positions must be (N, 3), got {positions.shape}")
        if len(positions) == 0:
            raise EmptyCloudError("cannot index an empty cloud")
        self.positions = positions
        lo = positions.min(axis=0)
        hi = positions.max(axis=0)
        extent = np.maximum(hi - lo, 1e-12)
        n_cells = max(1, len(positions) // target_per_cell)
        self.cell = float((extent.prod() / n_cells) ** (1.0 / 3.0))
        if not np.isfinite(self.cell) or self.cell <= 0:
            self.cell = 1.0
        self.lo = lo
        self.dims = np.maximum(np.ceil(extent / self.cell).astype(np.int64), 1)
        coords = self._cell_of(positions)
        flat = (coords[:, 0] * self.dims[1] + coords[:, 1]) * self.dims[2] + coords[:, 2]
        self.order = np.argsort(flat, kind="stable")  # stable keeps id order inside a cell
        self.sorted_flat = flat[self.order]

    def _cell_of(self, pts):
        c = np.floor((pts - self.lo) / self.cell).astype(np.int64)
        return np.clip(c, 0, self.dims - 1)

    def _cell_points(self, cx, cy, cz):
        flat = (cx * self.dims[1] + cy) * self.dims[2] + cz
        a = np.searchsorted(self.sorted_flat, flat, side="left")
        b = np.searchsorted(self.sorted_flat, flat, side="right")
        return self.order[a:b]

    def _shell_cells(self, center, r):
        x0, y0, z0 = center
        dims = self.dims
        if r == 0:
            if 0 <= x0 < dims[0] and 0 <= y0 < dims[1] and 0 <= z0 < dims[2]:
                yield (x0, y0, z0)
            return
        for dx in range(-r, r + 1):
            x = x0 + dx
            if not 0 <= x < dims[0]:
                continue
            on_x = abs(dx) == r
            for dy in range(-r, r + 1):
                y = y0 + dy
                if not 0 <= y < dims[1]:
                    continue
                on_y = abs(dy) == r
                if on_x or on_y:
                    for dz in range(-r, r + 1):
                        z = z0 + dz
                        if 0 <= z < dims[2]:
                            yield (x, y, z)
                else:
                    for dz in (-r, r):
                        z = z0 + dz
                        if 0 <= z < dims[2]:
                            yield (x, y, z)

    def query(self, q: np.ndarray, k: int):
        q = np.asarray(q, dtype=np.float64)
        center = tuple(self._cell_of(q[None])[0])
        found: list[np.ndarray] = []
        n_found = 0
        dk2 = np.inf
        max_r = int(self.dims.max())
        r = 0
        while r <= max_r:
            # a point in shell r is at least (r-1)*cell away
            if n_found >= k and ((r - 1) * self.cell) ** 2 > dk2:
                break
            ids = [self._cell_points(*c) for c in self._shell_cells(center, r)]
            ids = [i for i in ids if len(i)]
            if ids:
                batch = np.concatenate(ids)
                found.append(batch)
                n_found += len(batch)
                if n_found >= k:
                    d2_all = ((self.positions[np.concatenate(found)] - q) ** 2).sum(axis=1)
                    dk2 = np.partition(d2_all, k - 1)[k - 1] if n_found >= k else np.inf
            r += 1
        if not found:
            return np.empty(0, dtype=np.int64), np.empty(0)
        ids = np.sort(np.concatenate(found))  # ascending ids so ties match brute force
        d2 = ((self.positions[ids] - q) ** 2).sum(axis=1)
        sel = np.argsort(d2, kind="stable")[: min(k, len(ids))]
        return ids[sel], d2[sel]


def knn(positions: np.ndarray, query: np.ndarray, k: int):
    """Exact k nearest neighbors of one query point."""
    if len(positions) == 0:
        raise EmptyCloudError("kNN query against an empty cloud")
    if len(positions) < BRUTE_FORCE_LIMIT:
        return brute_force_knn(positions, query, k)
    return VoxelIndex(positions).query(query, k)


def knn_query(cloud: FusedPointCloud, q: np.ndarray, k: int):
    """The k nearest cloud points to q, ascending by Euclidean distance.

    Ties break by (view, row, col) ascending, which is exactly the cloud's
    storage order. Returns (indices, positions, feature rows, distances),
    each of length min(k, N).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    idx, d2 = knn(cloud.positions, np.asarray(q, dtype=np.float64), k)
    return idx, cloud.positions[idx], cloud.features.data[idx], np.sqrt(d2)


def init_track_feature(cloud: FusedPointCloud, query_xyz: np.ndarray):
    """Anchor for a new track: the nearest cloud point and its feature."""
    idx, pos, feats, _ = knn_query(cloud, query_xyz, 1)
    return int(idx[0]), pos[0], feats[0]


def knn_batch(positions: np.ndarray, queries: np.ndarray, k: int, chunk: int = 256):
    """Exact kNN for many queries; identical results to per-query brute force.

    Returns (Q, k') indices and squared distances with k' = min(k, N).
    """
    if len(positions) == 0:
        raise EmptyCloudError("kNN query against an empty cloud")
    queries = np.asarray(queries, dtype=np.float64)
    kk = min(k, len(positions))
    idx = np.empty((len(queries), kk), dtype=np.int64)
    d2 = np.empty((len(queries), kk), dtype=np.float64)
    for a in range(0, len(queries), chunk):
        qs = queries[a : a + chunk]
        diff = positions[None, :, :] - qs[:, None, :]
        dist = (diff * diff).sum(axis=2)
        order = np.argsort(dist, kind="stable", axis=1)[:, :kk]
        idx[a : a + len(qs)] = order
        d2[a : a + len(qs)] = np.take_along_axis(dist, order, axis=1)
    return idx, d2


# ---------------------------------------------------------------------------
# whole-video clouds


@dataclass
class SceneClouds:
    """Per-frame fused clouds with per-scale concatenated features.

    cat_features[s] stacks frame clouds at scale s along rows, so one
    gather serves every (track, frame) pair during refinement. offsets[s]
    maps frame t to its row range [offsets[s][t], offsets[s][t+1]).
    """

    clouds: list  # [frame][scale] FusedPointCloud
    cat_features: list  # [scale] Tensor (sum N_t, d)
    cat_positions: list  # [scale] (sum N_t, 3) float64
    offsets: list  # [scale] (F+1,) int64

    @property
    def n_frames(self) -> int:
        return len(self.clouds)

    @property
    def n_scales(self) -> int:
        return len(self.cat_features)

    @property
    def feature_dim(self) -> int:
        return self.cat_features[0].shape[1]

    def frame_positions(self, scale_i: int, frame: int) -> np.ndarray:
        o = self.offsets[scale_i]
        return self.cat_positions[scale_i][o[frame] : o[frame + 1]]

    def global_rows(self, scale_i: int, frame: int, local_idx: np.ndarray) -> np.ndarray:
        return local_idx + self.offsets[scale_i][frame]


def build_scene_clouds(pyramids: list, depth: np.ndarray, cams_per_frame: list) -> SceneClouds:
    """pyramids: per frame, list of per-scale (V, d, h, w) tensors.
    depth: (V, F, H, W) with NaN invalid. cams_per_frame: per frame camera list."""
    n_frames = len(pyramids)
    n_scales = len(pyramids[0])
    clouds = []
    for t in range(n_frames):
        clouds.append(fuse_frame(pyramids[t], depth[:, t], cams_per_frame[t]))

    cat_features, cat_positions, offsets = [], [], []
    for s in range(n_scales):
        offs = np.zeros(n_frames + 1, dtype=np.int64)
        for t in range(n_frames):
            offs[t + 1] = offs[t] + len(clouds[t][s])
        cat_features.append(ad.concat([clouds[t][s].features for t in range(n_frames)], axis=0))
        cat_positions.append(np.concatenate([clouds[t][s].positions for t in range(n_frames)]))
        offsets.append(offs)
    return SceneClouds(
        clouds=clouds, cat_features=cat_features, cat_positions=cat_positions, offsets=offsets
    )


def init_track_features(scene: SceneClouds, query_frames: np.ndarray, query_points: np.ndarray) -> Tensor:
    """Starting features for a batch of tracks: each track takes the feature
    of the nearest scale-1 cloud point in its query frame (graph-connected)."""
    rows = np.empty(len(query_points), dtype=np.int64)
    for i in range(len(query_points)):
        t = int(query_frames[i])
        idx, _ = knn(scene.frame_positions(0, t), query_points[i], 1)
        rows[i] = scene.global_rows(0, t, idx[0])
    return ad.gather_rows(scene.cat_features[0], rows)
