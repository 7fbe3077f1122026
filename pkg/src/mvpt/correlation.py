"""Multi-scale kNN feature correlation around track position estimates.

For each track and frame, the K nearest cloud points at every pyramid
scale contribute a dot-product similarity with the track's feature and a
3D offset from the current position estimate. Entries are flattened in
ascending-distance order, scales concatenated. Neighbor *positions* are
deliberately absent from the default encoding: offsets keep the features
translation-invariant.

Clouds smaller than K are padded with zero similarity and zero offset;
the zeroed similarity slot doubles as the validity signal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .pointcloud import FusedPointCloud, SceneClouds, knn_batch, knn_query

MODES = ("offset_only", "no_offset", "offset_location")
_SLOT_WIDTH = {"offset_only": 4, "no_offset": 1, "offset_location": 7}


def embed_width(n_scales: int, k: int, mode: str = "offset_only") -> int:
    """Length of the flattened correlation vector."""
    if mode not in MODES:
        raise ValueError(f"unknown correlation mode {mode!r}")
    return n_scales * k * _SLOT_WIDTH[mode]


@dataclass
class CorrelationSet:
    """Per-scale kNN correlations of one track at one frame."""

    sims: np.ndarray  # (S, K) float32, padded entries 0
    offsets: np.ndarray  # (S, K, 3) float64, x_k - p̂, padded entries 0
    locations: np.ndarray  # (S, K, 3) float64, x_k, padded entries 0
    valid: np.ndarray  # (S, K) bool


def correlate(track_feature: np.ndarray, position: np.ndarray, clouds: list, k: int) -> CorrelationSet:
    """Correlate one track feature at one position against per-scale clouds.

    Reference (non-differentiable) path; the training path is
    correlate_tracks. Both produce identical numbers.
    """
    f = np.asarray(track_feature, dtype=np.float32)
    p = np.asarray(position, dtype=np.float64)
    S = len(clouds)
    sims = np.zeros((S, k), dtype=np.float32)
    offsets = np.zeros((S, k, 3), dtype=np.float64)
    locations = np.zeros((S, k, 3), dtype=np.float64)
    valid = np.zeros((S, k), dtype=bool)
    for s, cloud in enumerate(clouds):
        idx, pos, feats, _ = knn_query(cloud, p, k)
        n = len(idx)
        sims[s, :n] = (feats * f).sum(axis=1)
        offsets[s, :n] = pos - p
        locations[s, :n] = pos
        valid[s, :n] = True
    return CorrelationSet(sims=sims, offsets=offsets, locations=locations, valid=valid)


def embed_correlation(cset: CorrelationSet, mode: str = "offset_only") -> np.ndarray:
    """Flatten a CorrelationSet: per neighbor (sim[, offset][, location]),
    neighbors in ascending-distance order, scales concatenated."""
    if mode not in MODES:
        raise ValueError(f"unknown correlation mode {mode!r}")
    if mode == "no_offset":
        return cset.sims.reshape(-1).copy()
    parts = [cset.sims[:, :, None], cset.offsets.astype(np.float32)]
    if mode == "offset_location":
        parts.append(cset.locations.astype(np.float32))
    return np.concatenate(parts, axis=2).reshape(-1)


def correlate_tracks(
    scene: SceneClouds,
    positions: Tensor,
    frames: np.ndarray,
    track_feats: Tensor,
    k: int = 16,
    mode: str = "offset_only",
) -> Tensor:
    """Differentiable batched correlation for a whole window.

    positions: (N, F, 3) float64 tensor of current estimates; frames: the F
    absolute frame indices; track_feats: (N, F, d) per-frame track features.
    Returns (N, F, width) float32. Gradients flow into track_feats, the
    fused features, and (via offsets) the position estimates. kNN selection
    itself is detached.
    """
    if mode not in MODES:
        raise ValueError(f"unknown correlation mode {mode!r}")
    n, f_count = positions.shape[0], positions.shape[1]
    if len(frames) != f_count:
        raise ValueError(f"{f_count} position columns vs {len(frames)} frames")
    p_np = positions.data
    # model compute dtype follows the fused features (float64 when the
    # whole model is cast for finite-difference checks)
    dt = scene.cat_features[0].dtype
    per_scale = []
    for s in range(scene.n_scales):
        rows = np.zeros((n, f_count, k), dtype=np.int64)
        valid = np.zeros((n, f_count, k), dtype=bool)
        for i, t in enumerate(frames):
            t = int(t)
            idx, _ = knn_batch(scene.frame_positions(s, t), p_np[:, i, :], k)
            kk = idx.shape[1]
            rows[:, i, :kk] = scene.global_rows(s, t, idx)
            valid[:, i, :kk] = True
        flat_rows = rows.reshape(-1)
        gathered = ad.reshape(
            ad.gather_rows(scene.cat_features[s], flat_rows),
            (n, f_count, k, scene.feature_dim),
        )
        sims = ad.sum_(gathered * track_feats[:, :, None, :], axis=3)
        sims = sims * ad.tensor(valid.astype(dt))
        locs = scene.cat_positions[s][flat_rows].reshape(n, f_count, k, 3)
        offs = ad.tensor(locs) - positions[:, :, None, :]
        offs = ad.astype(offs * ad.tensor(valid[:, :, :, None].astype(np.float64)), dt)
        if mode == "no_offset":
            per_scale.append(sims)
        else:
            parts = [ad.reshape(sims, (n, f_count, k, 1)), offs]
            if mode == "offset_location":
                masked_locs = locs * valid[:, :, :, None]
                parts.append(ad.tensor(masked_locs.astype(dt)))
            emb = ad.concat(parts, axis=3)
            per_scale.append(ad.reshape(emb, (n, f_count, k * emb.shape[3])))
    return ad.concat(per_scale, axis=2)
