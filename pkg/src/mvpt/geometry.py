"""Pinhole cameras: projection, unprojection, similarity transforms.

Conventions: E maps world to camera coordinates (x_cam = R x_world + t,
as the top 3x4 of a 4x4 matrix), K is the usual upper-triangular
intrinsic matrix, pixel coordinates put integer values at pixel centers,
and depth means camera-space z. All geometry runs in float64.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class CameraError(ValueError):
    """Camera matrices violate the pinhole invariants."""


class CameraFileError(IOError):
    """cameras.json could not be parsed."""


@dataclass(frozen=True)
class Similarity:
    """x -> scale * R x + t."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.scale <= 0:
            raise ValueError(f"similarity scale must be positive, got {self.scale}")
        _check_rotation(self.rotation)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    def compose(self, other: "Similarity") -> "Similarity":
        """Return self applied after other: (self . other)(x) = self(other(x))."""
        return Similarity(
            scale=self.scale * other.scale,
            rotation=self.rotation @ other.rotation,
            translation=self.scale * self.rotation @ other.translation + self.translation,
        )

    @staticmethod
    def translate(t) -> "Similarity":
        return Similarity(translation=np.asarray(t, dtype=np.float64))


def _check_rotation(r: np.ndarray, tol=1e-5):
    if r.shape != (3, 3):
        raise CameraError(f"rotation must be 3x3, got {r.shape}")
    err = np.abs(r @ r.T - np.eye(3)).max()
    if err > tol:
        raise CameraError(f"rotation not orthonormal (max deviation {err:.2e})")
    if np.linalg.det(r) < 0:
        raise CameraError("rotation has negative determinant")


@dataclass(frozen=True)
class Camera:
    """One pinhole view. width/height are optional image bounds in pixels."""

    view_id: int
    K: np.ndarray
    E: np.ndarray
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        E = np.asarray(self.E, dtype=np.float64)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "E", E)
        if K.shape != (3, 3):
            raise CameraError(f"K must be 3x3, got {K.shape}")
        if E.shape != (4, 4):
            raise CameraError(f"E must be 4x4, got {E.shape}")
        if abs(K[2, 2] - 1.0) > 1e-9 or abs(K[1, 0]) > 1e-9 or np.abs(K[2, :2]).max() > 1e-9:
            raise CameraError("K is not an upper-triangular intrinsic matrix")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise CameraError("focal lengths must be positive")
        _check_rotation(E[:3, :3])
        if np.abs(E[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise CameraError("last row of E must be (0, 0, 0, 1)")
        object.__setattr__(self, "_K_inv", np.linalg.inv(K))
        object.__setattr__(self, "_R_inv", E[:3, :3].T)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self._R_inv @ self.E[:3, 3]

    def has_bounds(self) -> bool:
        return self.width is not None and self.height is not None


@dataclass(frozen=True)
class Projection:
    pixel: np.ndarray  # (u, v)
    depth: float
    behind: bool
    in_bounds: bool | None  # None when the camera has no bounds


def unproject_pixel(cam: Camera, pixel, depth: float) -> np.ndarray:
    """Lift one pixel at the given camera-space depth to world coordinates."""
    if not depth > 0:
        raise ValueError(f"unproject needs positive depth, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    if cam.has_bounds() and not (-0.5 <= u < cam.width - 0.5 and -0.5 <= v < cam.height - 0.5):
        raise ValueError(f"pixel ({u}, {v}) outside {cam.width}x{cam.height} image")
    ray = cam._K_inv @ np.array([u, v, 1.0])
    cam_pt = ray * depth
    return cam._R_inv @ (cam_pt - cam.E[:3, 3])


def unproject_pixels(cam: Camera, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorized unprojection; caller guarantees positive depths."""
    pixels = np.asarray(pixels, dtype=np.float64)
    depths = np.asarray(depths, dtype=np.float64)
    ones = np.ones((pixels.shape[0], 1))
    rays = np.concatenate([pixels, ones], axis=1) @ cam._K_inv.T
    cam_pts = rays * depths[:, None]
    return (cam_pts - cam.E[:3, 3]) @ cam._R_inv.T


def project_point(cam: Camera, x) -> Projection:
    pix, depth, behind = project_points(cam, np.asarray(x, dtype=np.float64)[None, :])
    in_bounds = None
    if cam.has_bounds():
        u, v = pix[0]
        in_bounds = bool(
            not behind[0] and -0.5 <= u < cam.width - 0.5 and -0.5 <= v < cam.height - 0.5
        )
    return Projection(pix[0], float(depth[0]), bool(behind[0]), in_bounds)


def project_points(cam: Camera, X: np.ndarray):
    """Project (N, 3) world points; returns pixels, depths, behind flags.

    Pixels for behind-camera points are NaN and flagged rather than raised.
    """
    X = np.asarray(X, dtype=np.float64)
    cam_pts = X @ cam.E[:3, :3].T + cam.E[:3, 3]
    depth = cam_pts[:, 2]
    behind = depth <= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        hom = cam_pts @ cam.K.T
        pix = hom[:, :2] / depth[:, None]
    pix[behind] = np.nan
    return pix, depth, behind


def apply_similarity(cam: Camera, sim: Similarity) -> Camera:
    """Camera observing similarity-transformed world points identically.

    Pixels are preserved exactly; depths scale by sim.scale.
    """
    S = np.eye(4)
    S[:3, :3] = sim.scale * sim.rotation
    S[:3, 3] = sim.translation
    E_new = cam.E @ np.linalg.inv(S)
    E_new[:3] *= sim.scale  # restore an orthonormal rotation block
    return Camera(cam.view_id, cam.K.copy(), E_new, cam.width, cam.height)


# ---------------------------------------------------------------------------
# cameras.json


@dataclass
class ViewCalibration:
    """Per-view intrinsics plus static or per-frame extrinsics."""

    view_id: int
    K: np.ndarray
    E: np.ndarray | None = None  # (4, 4) static
    E_per_frame: np.ndarray | None = None  # (F, 4, 4)

    def at(self, frame: int, width=None, height=None) -> Camera:
        if self.E_per_frame is not None:
            if not 0 <= frame < len(self.E_per_frame):
                raise IndexError(f"view {self.view_id}: no extrinsics for frame {frame}")
            E = self.E_per_frame[frame]
        else:
            E = self.E
        return Camera(self.view_id, self.K, E, width, height)


def save_cameras(path, calibs: list[ViewCalibration]):
    views = []
    for c in calibs:
        entry = {"view_id": int(c.view_id), "K": np.asarray(c.K).reshape(-1).tolist()}
        if c.E_per_frame is not None:
            entry["E_per_frame"] = [np.asarray(e).reshape(-1).tolist() for e in c.E_per_frame]
        else:
            entry["E"] = np.asarray(c.E).reshape(-1).tolist()
        views.append(entry)
    with open(path, "w") as f:
        json.dump(views, f, indent=1, sort_keys=True)
        f.write("\n")


def load_cameras(path) -> list[ViewCalibration]:
    try:
        with open(path) as f:
            views = json.load(f)
    except json.JSONDecodeError as e:
        raise CameraFileError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(views, list):
        raise CameraFileError(f"{path}: expected a top-level array of views")
    out = []
    for entry in views:
        try:
            K = np.array(entry["K"], dtype=np.float64).reshape(3, 3)
            if "E_per_frame" in entry:
                E_pf = np.array(entry["E_per_frame"], dtype=np.float64).reshape(-1, 4, 4)
                out.append(ViewCalibration(int(entry["view_id"]), K, E_per_frame=E_pf))
            else:
                E = np.array(entry["E"], dtype=np.float64).reshape(4, 4)
                out.append(ViewCalibration(int(entry["view_id"]), K, E=E))
        except (KeyError, ValueError) as e:
            raise CameraFileError(f"{path}: malformed view entry ({e})") from e
    return out


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera extrinsics for a camera at center looking at target."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight along up; pick any perpendicular
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    E = np.eye(4)
    E[:3, :3] = R
    E[:3, 3] = -R @ center
    return E
