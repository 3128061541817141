"""Pinhole cameras and pixel rays.

Conventions used throughout the package:

* ``R``, ``t`` map world to camera coordinates, ``x_cam = R x_world + t``;
  the camera looks down its +z axis.
* Pixel coordinates are continuous; integer pixel ``(i, j)`` (column, row)
  is sampled at its centre ``(i + 0.5, j + 0.5)``.
* Ray directions are unit vectors, so a depth ``d`` is the Euclidean
  distance from the camera centre, not the camera-frame z.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise CameraError("R must be a rotation (orthonormal, det +1)")
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if fx <= 0 or fy <= 0:
            raise CameraError(f"focal lengths must be positive, got fx={fx} fy={fy}")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise CameraError(f"principal point ({cx}, {cy}) outside {self.width}x{self.height} image")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R[2]

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, focal, width, height):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # Looking straight along the up vector.
            right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        K = np.array([[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye, width, height)

    def pixel_centers(self) -> np.ndarray:
        """(H*W, 2) centres of all pixels in row-major order."""
        jj, ii = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1).astype(np.float64)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-12:
            raise CameraError("ray direction must be unit length")
        if not 0 < self.near < self.far:
            raise CameraError(f"ray interval must satisfy 0 < near < far, got [{self.near}, {self.far}]")

    def at(self, d):
        return self.origin + np.multiply.outer(d, self.direction)


def _check_inside(camera: Camera, uv: np.ndarray) -> None:
    bad = (uv[:, 0] < 0) | (uv[:, 0] > camera.width) | (uv[:, 1] < 0) | (uv[:, 1] > camera.height)
    if bad.any():
        raise CameraError(f"pixel {uv[np.argmax(bad)].tolist()} outside {camera.width}x{camera.height} image")


def pixel_directions(camera: Camera, uv) -> np.ndarray:
    """Unit world-space directions through continuous pixel coordinates (B, 2)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    _check_inside(camera, uv)
    homog = np.concatenate([uv, np.ones((len(uv), 1))], axis=1)
    cam = np.linalg.solve(camera.K, homog.T).T
    world = cam @ camera.R
    return world / np.linalg.norm(world, axis=1, keepdims=True)


def pixel_to_ray(camera: Camera, uv, near: float = 1e-3, far: float = 1e3) -> Ray:
    d = pixel_directions(camera, uv)[0]
    return Ray(camera.center, d, near, far)


def unproject_depth(camera: Camera, uv, depth) -> np.ndarray:
    """Point at Euclidean distance ``depth`` along the pixel ray."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise CameraError("depth must be positive")
    single = np.ndim(uv) == 1
    dirs = pixel_directions(camera, uv)
    p = camera.center + depth.reshape(-1, 1) * dirs
    return p[0] if single else p


def project(camera: Camera, points):
    """Pixel coordinates and camera-frame z; ``front`` flags z > 0.

    Points behind the camera get NaN pixel coordinates.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    cam = pts @ camera.R.T + camera.t
    z = cam[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = (cam @ camera.K.T)[:, :2] / z[:, None]
    pix[~front] = np.nan
    if single:
        return pix[0], z[0], bool(front[0])
    return pix, z, front


def ray_sphere_interval(origins, dirs, radius: float, center=(0.0, 0.0, 0.0)):
    """Entry/exit distances of unit-direction rays through a sphere.

    Returns ``(near, far, hit)``; ``near`` is clamped at a small positive
    value when the origin is inside the sphere.
    """
    oc = np.asarray(origins, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    b = np.einsum("ij,ij->i", oc, dirs)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - root, 1e-6)
    far = -b + root
    hit &= far > near
    return near, far, hit


# --- camera file ---------------------------------------------------------
# One line per view: id width height K(9) R(9) t(3), whitespace separated,
# row-major.  Lines starting with '#' are comments.


def format_camera(view_id: int, camera: Camera) -> str:
    vals = np.concatenate([camera.K.ravel(), camera.R.ravel(), camera.t.ravel()])
    return f"{view_id} {camera.width} {camera.height} " + " ".join(repr(float(v)) for v in vals)


def save_cameras(path, cameras: list[Camera]) -> None:
    lines = ["# id width height K[9] R[9] t[3]  (row-major, x_cam = R x_world + t)"]
    lines += [format_camera(i, cam) for i, cam in enumerate(cameras)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    path = Path(path)
    cameras: dict[int, Camera] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 24:
            raise CameraError(f"{path}:{lineno}: expected 24 fields, got {len(fields)}")
        try:
            view_id, w, h = int(fields[0]), int(fields[1]), int(fields[2])
            vals = np.array([float(v) for v in fields[3:]])
            cameras[view_id] = Camera(vals[:9], vals[9:18], vals[18:], w, h)
        except (ValueError, CameraError) as exc:
            raise CameraError(f"{path}:{lineno}: {exc}") from None
    return [cameras[k] for k in sorted(cameras)]
