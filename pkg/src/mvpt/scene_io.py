"""Scene directory layout and file formats.

A scene directory holds:
    manifest.json
    cameras.json
    rgb/view<k>/frame<t>.ppm       binary P6, 8-bit
    depth/view<k>/frame<t>.mvd     MVD1: magic, u32 LE height, u32 LE width,
                                   float32 LE row-major, NaN marks invalid
    gt_tracks.csv                  track_id,t,x,y,z,visible
    queries.csv                    track_id,t_q,x,y,z

Float columns are written with repr (shortest round-trip form), so a
fixed seed produces byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo

MVD_MAGIC = b"MVD1"


class DepthFileError(IOError):
    """An .mvd file does not parse as MVD1."""


class SceneLayoutError(IOError):
    """A scene directory is missing required pieces."""


def write_ppm(path, rgb: np.ndarray):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"write_ppm expects (H, W, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if not buf.startswith(b"P6"):
        raise IOError(f"{path}: not a binary PPM")
    # header: magic, width, height, maxval, separated by whitespace
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":  # comment to end of line
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(buf[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise IOError(f"{path}: unsupported maxval {maxval}")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).copy()


def write_mvd(path, depth: np.ndarray):
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError(f"write_mvd expects (H, W), got {depth.shape}")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(MVD_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(np.ascontiguousarray(depth).tobytes())


def read_mvd(path) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MVD_MAGIC:
        raise DepthFileError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 12:
        raise DepthFileError(f"{path}: truncated header")
    h, w = struct.unpack_from("<II", buf, 4)
    expect = 12 + 4 * h * w
    if len(buf) != expect:
        raise DepthFileError(f"{path}: expected {expect} bytes for {h}x{w}, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", count=h * w, offset=12).reshape(h, w).copy()


def _fmt(x) -> str:
    return repr(float(x))


def write_tracks_csv(path, rows):
    """rows: iterable of (track_id, t, x, y, z, visible)."""
    with open(path, "w") as f:
        f.write("track_id,t,x,y,z,visible\n")
        for tid, t, x, y, z, vis in rows:
            f.write(f"{int(tid)},{int(t)},{_fmt(x)},{_fmt(y)},{_fmt(z)},{int(vis)}\n")


def read_tracks_csv(path):
    """Return {track_id: (ts, xyz (T,3), visible (T,))} sorted by frame."""
    out = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != "track_id,t,x,y,z,visible":
            raise IOError(f"{path}: unexpected header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            tid, t, x, y, z, vis = line.split(",")
            out.setdefault(int(tid), []).append((int(t), float(x), float(y), float(z), int(vis)))
    tracks = {}
    for tid, rows in out.items():
        rows.sort(key=lambda r: r[0])
        arr = np.array(rows, dtype=np.float64)
        tracks[tid] = (arr[:, 0].astype(int), arr[:, 1:4], arr[:, 4].astype(bool))
    return tracks


def write_predicted_csv(path, track_ids, positions, visible, confidence):
    """Write tracker output: positions (N, F, 3), visible (N, F) bool,
    confidence (N, F) in [0, 1] at six significant digits."""
    positions = np.asarray(positions, dtype=np.float64)
    n, frames = positions.shape[0], positions.shape[1]
    with open(path, "w") as f:
        f.write("track_id,t,x,y,z,visible,confidence\n")
        for i in range(n):
            tid = int(track_ids[i])
            for t in range(frames):
                x, y, z = positions[i, t]
                f.write(
                    f"{tid},{t},{_fmt(x)},{_fmt(y)},{_fmt(z)},"
                    f"{int(visible[i, t])},{float(confidence[i, t]):.6g}\n"
                )


def read_predicted_csv(path):
    """Return {track_id: (ts, xyz (F,3), visible (F,), confidence (F,))}."""
    out = {}
    with open(path) as f:
        header = f.readline().strip()
        if header != "track_id,t,x,y,z,visible,confidence":
            raise IOError(f"{path}: unexpected header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            tid, t, x, y, z, vis, conf = line.split(",")
            out.setdefault(int(tid), []).append(
                (int(t), float(x), float(y), float(z), int(vis), float(conf))
            )
    tracks = {}
    for tid, rows in out.items():
        rows.sort(key=lambda r: r[0])
        arr = np.array(rows, dtype=np.float64)
        tracks[tid] = (
            arr[:, 0].astype(int),
            arr[:, 1:4],
            arr[:, 4].astype(bool),
            arr[:, 5],
        )
    return tracks


def write_queries_csv(path, rows):
    """rows: iterable of (track_id, t_q, x, y, z)."""
    with open(path, "w") as f:
        f.write("track_id,t_q,x,y,z\n")
        for tid, tq, x, y, z in rows:
            f.write(f"{int(tid)},{int(tq)},{_fmt(x)},{_fmt(y)},{_fmt(z)}\n")


def read_queries_csv(path):
    """Return list of (track_id, t_q, xyz) in file order."""
    out = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "track_id,t_q,x,y,z":
            raise IOError(f"{path}: unexpected header {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            tid, tq, x, y, z = line.split(",")
            out.append((int(tid), int(tq), np.array([float(x), float(y), float(z)])))
    return out


def write_manifest(path, manifest: dict):
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def read_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)


@dataclass
class SceneData:
    """A scene loaded into memory."""

    scene_dir: Path
    manifest: dict
    calibs: list  # geo.ViewCalibration, one per loaded view
    rgb: np.ndarray  # (V, F, H, W, 3) uint8
    depth: np.ndarray  # (V, F, H, W) float32, NaN invalid
    tracks: dict | None  # gt_tracks.csv contents, if present
    queries: list | None  # queries.csv contents, if present

    @property
    def n_views(self) -> int:
        return self.rgb.shape[0]

    @property
    def n_frames(self) -> int:
        return self.rgb.shape[1]

    def cameras_at(self, frame: int) -> list:
        h, w = self.rgb.shape[2], self.rgb.shape[3]
        return [c.at(frame, width=w, height=h) for c in self.calibs]


def load_scene(scene_dir, views=None, depth_source="depth") -> SceneData:
    """Read a scene directory; ``views`` optionally selects view ids.

    ``depth_source`` names the depth subdirectory, so externally estimated
    depth in the same MVD1 layout can be swapped in.
    """
    scene_dir = Path(scene_dir)
    manifest_path = scene_dir / "manifest.json"
    if not manifest_path.exists():
        raise SceneLayoutError(f"{scene_dir}: missing manifest.json")
    manifest = read_manifest(manifest_path)
    calibs = geo.load_cameras(scene_dir / "cameras.json")
    if views is not None:
        want = set(int(v) for v in views)
        have = {c.view_id for c in calibs}
        missing = want - have
        if missing:
            raise SceneLayoutError(f"{scene_dir}: no such views {sorted(missing)}")
        calibs = [c for c in calibs if c.view_id in want]
    n_frames = int(manifest["n_frames"])
    depth_dir = scene_dir / depth_source
    if not depth_dir.exists():
        raise SceneLayoutError(f"{scene_dir}: missing depth source {depth_source!r}")

    rgbs, depths = [], []
    for c in calibs:
        vr, vd = [], []
        for t in range(n_frames):
            rgb_path = scene_dir / "rgb" / f"view{c.view_id}" / f"frame{t}.ppm"
            mvd_path = depth_dir / f"view{c.view_id}" / f"frame{t}.mvd"
            if not rgb_path.exists() or not mvd_path.exists():
                raise SceneLayoutError(f"{scene_dir}: missing frame {t} of view {c.view_id}")
            vr.append(read_ppm(rgb_path))
            vd.append(read_mvd(mvd_path))
        rgbs.append(np.stack(vr))
        depths.append(np.stack(vd))

    tracks_path = scene_dir / "gt_tracks.csv"
    queries_path = scene_dir / "queries.csv"
    return SceneData(
        scene_dir=scene_dir,
        manifest=manifest,
        calibs=calibs,
        rgb=np.stack(rgbs),
        depth=np.stack(depths),
        tracks=read_tracks_csv(tracks_path) if tracks_path.exists() else None,
        queries=read_queries_csv(queries_path) if queries_path.exists() else None,
    )


def list_scenes(dataset_dir) -> list[Path]:
    dataset_dir = Path(dataset_dir)
    if (dataset_dir / "manifest.json").exists():
        return [dataset_dir]
    scenes = sorted(p for p in dataset_dir.glob("scene_*") if p.is_dir())
    if not scenes:
        raise SceneLayoutError(f"{dataset_dir}: no scene_* directories")
    return scenes
