"""Evaluation of predicted 3D tracks against ground truth.

Four per-track scores: median trajectory error over ground-truth-visible
frames, occlusion accuracy, the fraction of visible frames within each
distance threshold, and the Jaccard score combining both. Everything is
computed per track, averaged within a scene, then averaged across scenes;
pooling all points first gives different (and misleading) numbers.

Frames before a track's query frame never count: the tracker does not
predict there, so every metric is restricted to t >= t_q.

Distance thresholds default to 1/2/5/10/20 cm in world units and scale
with the scene's threshold_scale so synthetic scenes of different extent
stay comparable. Thresholds are strict: an error exactly at x fails.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import geometry as geo

DISTANCE_THRESHOLDS = (0.01, 0.02, 0.05, 0.10, 0.20)
PIXEL_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)


class MissingTracksError(KeyError):
    """Ground-truth tracks with no matching prediction."""

    def __init__(self, track_ids):
        self.track_ids = sorted(track_ids)
        super().__init__(f"missing predicted tracks: {self.track_ids}")

    def __str__(self) -> str:
        return self.args[0]


@dataclass(frozen=True)
class EvalConfig:
    thresholds: tuple = DISTANCE_THRESHOLDS
    vis_threshold: float = 0.5
    pixel_thresholds: tuple | None = PIXEL_THRESHOLDS

    def __post_init__(self):
        for name in ("thresholds", "pixel_thresholds"):
            xs = getattr(self, name)
            if xs is None:
                continue
            xs = tuple(float(x) for x in xs)
            object.__setattr__(self, name, xs)
            if not xs or min(xs) <= 0:
                raise ValueError(f"{name} must be positive, got {xs}")
            if any(b <= a for a, b in zip(xs, xs[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {xs}")

    def scaled(self, scale: float) -> "EvalConfig":
        """Distance thresholds in a world rescaled by `scale`; pixels unchanged."""
        if not scale > 0:
            raise ValueError(f"threshold scale must be positive, got {scale}")
        return replace(self, thresholds=tuple(x * scale for x in self.thresholds))


@dataclass(frozen=True)
class TrackRecord:
    """One track's trajectory over the full frame range of a scene."""

    positions: np.ndarray  # (F, 3)
    visible: np.ndarray  # (F,) bool
    t_q: int = 0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=bool)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "visible", vis)
        if pos.ndim != 2 or pos.shape[1] != 3 or vis.shape != (pos.shape[0],):
            raise ValueError(f"track shapes {pos.shape} / {vis.shape}")
        if not 0 <= self.t_q < pos.shape[0]:
            raise ValueError(f"query frame {self.t_q} outside 0..{pos.shape[0] - 1}")

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]


def track_errors(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-frame Euclidean error, float64."""
    d = np.asarray(pred, np.float64) - np.asarray(gt, np.float64)
    return np.linalg.norm(d, axis=-1)


def mte(pred: np.ndarray, gt: np.ndarray, gt_vis: np.ndarray) -> float | None:
    """Median error over GT-visible frames; None when no frame is visible.

    Even counts take the mean of the two central values.
    """
    gt_vis = np.asarray(gt_vis, bool)
    if not gt_vis.any():
        return None
    return float(np.median(track_errors(pred, gt)[gt_vis]))


def occlusion_accuracy(pred_vis: np.ndarray, gt_vis: np.ndarray) -> float:
    """Fraction of frames where binary visibility matches."""
    pred_vis = np.asarray(pred_vis, bool)
    gt_vis = np.asarray(gt_vis, bool)
    if pred_vis.shape != gt_vis.shape or pred_vis.size == 0:
        raise ValueError(f"visibility shapes {pred_vis.shape} / {gt_vis.shape}")
    return float(np.mean(pred_vis == gt_vis))


def delta_profile(pred, gt, gt_vis, thresholds) -> list[float] | None:
    """Fraction of GT-visible frames with error strictly below each threshold."""
    gt_vis = np.asarray(gt_vis, bool)
    if not gt_vis.any():
        return None
    err = track_errors(pred, gt)[gt_vis]
    return [float(np.mean(err < x)) for x in thresholds]


def delta(pred, gt, gt_vis, threshold: float) -> float | None:
    prof = delta_profile(pred, gt, gt_vis, (threshold,))
    return None if prof is None else prof[0]


def average_jaccard(pred, gt, pred_vis, gt_vis, thresholds) -> list[float] | None:
    """Jaccard score per threshold: true positives need both visibility and
    position within x; misses, false alarms, and off-position hits all land
    in the denominator. None when no GT-visible frame exists (score undefined
    rather than zero)."""
    pred_vis = np.asarray(pred_vis, bool)
    gt_vis = np.asarray(gt_vis, bool)
    if not gt_vis.any():
        return None
    err = track_errors(pred, gt)
    out = []
    for x in thresholds:
        close = err < x
        num = np.sum(gt_vis & pred_vis & close)
        den = np.sum(gt_vis) + np.sum(~gt_vis & pred_vis) + np.sum(gt_vis & pred_vis & ~close)
        out.append(float(num / den))
    return out


def project_tracks_2d(positions: np.ndarray, cams_per_frame):
    """Project (N, F, 3) tracks into every view.

    Returns pixels (V, N, F, 2) with NaN behind the camera, and an
    in-front mask (V, N, F).
    """
    positions = np.asarray(positions, np.float64)
    n, f, _ = positions.shape
    if len(cams_per_frame) != f:
        raise ValueError(f"{len(cams_per_frame)} camera frames for {f} track frames")
    v = len(cams_per_frame[0])
    pixels = np.full((v, n, f, 2), np.nan)
    in_front = np.zeros((v, n, f), bool)
    for t, cams in enumerate(cams_per_frame):
        if len(cams) != v:
            raise ValueError(f"frame {t} has {len(cams)} views, expected {v}")
        for vi, cam in enumerate(cams):
            pix, _, behind = geo.project_points(cam, positions[:, t])
            pixels[vi, :, t] = pix
            in_front[vi, :, t] = ~behind
    return pixels, in_front


def delta_2d(pred_px, gt_px, gt_vis, gt_front, thresholds) -> list[float] | None:
    """Pixel-space delta for one track, averaged over views.

    pred_px/gt_px are (V, F, 2); gt_front (V, F) excludes frames where the
    GT point sits behind that camera. Views with no usable frame drop out
    of the average; a NaN predicted pixel counts as a miss.
    """
    gt_vis = np.asarray(gt_vis, bool)
    per_view = []
    for v in range(gt_px.shape[0]):
        m = gt_vis & gt_front[v]
        if not m.any():
            continue
        err = np.linalg.norm(pred_px[v][m] - gt_px[v][m], axis=-1)
        per_view.append([float(np.mean(err < x)) for x in thresholds])
    if not per_view:
        return None
    return [float(np.mean(col)) for col in zip(*per_view)]


def _mean(values) -> float | None:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else None


def _mean_profile(profiles) -> list[float] | None:
    kept = [p for p in profiles if p is not None]
    if not kept:
        return None
    return [float(np.mean(col)) for col in zip(*kept)]


@dataclass
class SceneReport:
    tracks: dict  # track id -> metric dict (JSON-ready)
    aggregates: dict
    exclusions: dict  # metric family -> sorted excluded track ids
    thresholds: tuple
    pixel_thresholds: tuple | None


def evaluate_scene(
    pred_tracks: dict,
    gt_tracks: dict,
    config: EvalConfig | None = None,
    cams_per_frame=None,
) -> SceneReport:
    """Score every ground-truth track against its prediction.

    Both arguments map track id -> TrackRecord over the same frame range;
    the GT record's t_q bounds the evaluated window. Tracks with zero
    GT-visible frames keep their occlusion accuracy but are excluded from
    the distance metrics and listed under exclusions. 2D deltas are added
    when per-frame cameras are supplied.
    """
    config = config or EvalConfig()
    missing = set(gt_tracks) - set(pred_tracks)
    if missing:
        raise MissingTracksError(missing)

    want_2d = cams_per_frame is not None and config.pixel_thresholds is not None
    if want_2d:
        order = sorted(gt_tracks)
        stack = np.stack([pred_tracks[t].positions for t in order])
        pred_px, _ = project_tracks_2d(stack, cams_per_frame)
        gt_px, gt_front = project_tracks_2d(
            np.stack([gt_tracks[t].positions for t in order]), cams_per_frame
        )
        row = {t: i for i, t in enumerate(order)}

    tracks = {}
    zero_vis = []
    no_view = []
    for tid in sorted(gt_tracks):
        gt = gt_tracks[tid]
        pr = pred_tracks[tid]
        if pr.positions.shape != gt.positions.shape:
            raise ValueError(
                f"track {tid}: prediction spans {pr.positions.shape[0]} frames, "
                f"ground truth {gt.positions.shape[0]}"
            )
        s = slice(gt.t_q, None)
        p, g = pr.positions[s], gt.positions[s]
        pv, gv = pr.visible[s], gt.visible[s]
        entry = {
            "oa": occlusion_accuracy(pv, gv),
            "mte": mte(p, g, gv),
            "delta": delta_profile(p, g, gv, config.thresholds),
            "aj": average_jaccard(p, g, pv, gv, config.thresholds),
        }
        entry["delta_avg"] = _mean(entry["delta"] or [None])
        entry["aj_avg"] = _mean(entry["aj"] or [None])
        if entry["mte"] is None:
            zero_vis.append(tid)
        if want_2d:
            i = row[tid]
            entry["delta2d"] = delta_2d(
                pred_px[:, i, s], gt_px[:, i, s], gv, gt_front[:, i, s],
                config.pixel_thresholds,
            )
            entry["delta2d_avg"] = _mean(entry["delta2d"] or [None])
            if entry["delta2d"] is None and tid not in zero_vis:
                no_view.append(tid)
        tracks[tid] = entry

    aggregates = {
        "mte": _mean(e["mte"] for e in tracks.values()),
        "oa": _mean(e["oa"] for e in tracks.values()),
        "delta_avg": _mean(e["delta_avg"] for e in tracks.values()),
        "aj": _mean(e["aj_avg"] for e in tracks.values()),
        "delta_by_threshold": _mean_profile(e["delta"] for e in tracks.values()),
        "aj_by_threshold": _mean_profile(e["aj"] for e in tracks.values()),
    }
    if want_2d:
        aggregates["delta2d_avg"] = _mean(e["delta2d_avg"] for e in tracks.values())
        aggregates["delta2d_by_threshold"] = _mean_profile(
            e["delta2d"] for e in tracks.values()
        )
    exclusions = {"zero_visible": zero_vis}
    if want_2d:
        exclusions["no_view"] = no_view
    return SceneReport(
        tracks=tracks,
        aggregates=aggregates,
        exclusions=exclusions,
        thresholds=config.thresholds,
        pixel_thresholds=config.pixel_thresholds if want_2d else None,
    )


def aggregate_dataset(scene_reports: dict) -> dict:
    """Dataset values are plain means of scene means, blind to track counts."""
    reps = list(scene_reports.values())
    keys = sorted({k for r in reps for k in r.aggregates})
    out = {}
    for k in keys:
        vals = [r.aggregates.get(k) for r in reps]
        if k.endswith("by_threshold"):
            out[k] = _mean_profile(vals)
        else:
            out[k] = _mean(vals)
    return out


def dataset_exclusions(scene_reports: dict) -> dict:
    out = {}
    for rep in scene_reports.values():
        for k, ids in rep.exclusions.items():
            out[k] = out.get(k, 0) + len(ids)
    return out


def report_to_json(scene_reports: dict) -> dict:
    scenes = {}
    for name, rep in sorted(scene_reports.items()):
        scenes[str(name)] = {
            "tracks": {str(tid): entry for tid, entry in rep.tracks.items()},
            "aggregates": rep.aggregates,
            "exclusions": {k: list(v) for k, v in rep.exclusions.items()},
            "thresholds": list(rep.thresholds),
        }
    return {
        "scenes": scenes,
        "aggregates": aggregate_dataset(scene_reports),
        "exclusions": dataset_exclusions(scene_reports),
    }


def _metric_rows(entry, thresholds, pixel_thresholds):
    yield "mte", entry["mte"]
    yield "oa", entry["oa"]
    yield "delta_avg", entry["delta_avg"]
    yield "aj", entry["aj_avg"]
    for label in ("delta", "aj"):
        vals = entry[label]
        if vals is None:
            continue
        for x, v in zip(thresholds, vals):
            yield f"{label}_{x:g}", v
    if "delta2d" in entry and entry["delta2d"] is not None:
        yield "delta2d_avg", entry["delta2d_avg"]
        for x, v in zip(pixel_thresholds, entry["delta2d"]):
            yield f"delta2d_{x:g}px", v


def report_rows(scene_reports: dict) -> list:
    """Flat (scene, track, metric, value) rows; excluded metrics are omitted."""
    rows = []
    for name, rep in sorted(scene_reports.items()):
        for tid, entry in sorted(rep.tracks.items()):
            for metric, value in _metric_rows(entry, rep.thresholds, rep.pixel_thresholds):
                if value is not None:
                    rows.append((str(name), int(tid), metric, float(value)))
    return rows


def write_report(json_path, csv_path, scene_reports: dict) -> None:
    with open(json_path, "w") as fh:
        json.dump(report_to_json(scene_reports), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w") as fh:
        fh.write("scene,track,metric,value\n")
        for scene, track, metric, value in report_rows(scene_reports):
            fh.write(f"{scene},{track},{metric},{repr(value)}\n")
