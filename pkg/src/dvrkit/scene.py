"""Analytic ground-truth scenes, their renderings and the visual hull.

Scenes are signed distance functions (negative inside) with an albedo
texture defined over 3D points.  Ground truth images are rendered by sphere
tracing, which is deliberately a different algorithm from the fixed-step
marcher used for the learned field.

Dataset directory layout::

    cameras.txt        one line per view, see dvrkit.camera.save_cameras
    view_0000.png      8-bit RGB
    mask_0000.png      8-bit grey, 255 = object
    depth_0000.bin     header "<4sII" = (b"DPTH", width, height), then
                       width*height little-endian float32, row-major,
                       Euclidean ray distance, +inf for background
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .camera import Camera, load_cameras, pixel_directions, project, ray_sphere_interval, save_cameras

_DEPTH_HEADER = struct.Struct("<4sII")


class SceneError(ValueError):
    pass


# --- signed distance primitives ------------------------------------------


def sd_sphere(p, radius):
    return np.linalg.norm(p, axis=-1) - radius


def sd_box(p, half_extent):
    q = np.abs(p) - np.asarray(half_extent)
    return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(q.max(axis=-1), 0.0)


def sd_torus(p, major, minor):
    # Torus around the local z axis.
    ring = np.linalg.norm(p[..., :2], axis=-1) - major
    return np.sqrt(ring**2 + p[..., 2] ** 2) - minor


def rotation(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


@dataclass
class Primitive:
    """A posed, uniformly scaled SDF primitive: ``sdf((R^T (p - t)) / s) * s``."""

    kind: str
    size: tuple
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __call__(self, p):
        local = (np.asarray(p) - self.translation) @ self.rotation / self.scale
        if self.kind == "sphere":
            d = sd_sphere(local, *self.size)
        elif self.kind == "box":
            d = sd_box(local, self.size)
        elif self.kind == "torus":
            d = sd_torus(local, *self.size)
        else:
            raise SceneError(f"unknown primitive {self.kind!r}")
        return d * self.scale


@dataclass
class Union:
    parts: list

    def __call__(self, p):
        return np.min([s(p) for s in self.parts], axis=0)


@dataclass
class Subtraction:
    base: Callable
    cut: Callable

    def __call__(self, p):
        return np.maximum(self.base(p), -self.cut(p))


# --- textures -------------------------------------------------------------


def solid_texture(color):
    color = np.asarray(color, dtype=np.float64)
    return lambda p: np.broadcast_to(color, np.shape(p)).copy()


def checker_texture(cell=0.1, color_a=(0.9, 0.2, 0.15), color_b=(0.1, 0.3, 0.85)):
    a, b = np.asarray(color_a, float), np.asarray(color_b, float)

    def texture(p):
        parity = np.floor(np.asarray(p) / cell).astype(int).sum(axis=-1) % 2
        return np.where(parity[..., None] == 0, a, b)

    return texture


def gradient_texture(low=(0.1, 0.2, 0.8), high=(0.9, 0.7, 0.1), axis=(0.0, 0.0, 1.0), extent=0.5):
    low, high = np.asarray(low, float), np.asarray(high, float)
    axis = np.asarray(axis, float) / np.linalg.norm(axis)

    def texture(p):
        t = np.clip((np.asarray(p) @ axis / extent + 1.0) / 2.0, 0.0, 1.0)[..., None]
        return (1 - t) * low + t * high

    return texture


def smooth_texture():
    """Low-frequency colour variation over all three axes."""

    def texture(p):
        p = np.asarray(p)
        r = 0.5 + 0.35 * np.sin(3.0 * p[..., 0] + 0.5)
        g = 0.5 + 0.35 * np.sin(3.0 * p[..., 1] + 1.5)
        b = 0.5 + 0.35 * np.cos(3.0 * p[..., 2])
        return np.stack([r, g, b], axis=-1)

    return texture


@dataclass
class AnalyticScene:
    sdf: Callable
    texture: Callable
    background: tuple = (1.0, 1.0, 1.0)
    bound_radius: float = 1.0
    name: str = "custom"

    def occupancy(self, p):
        """Hard occupancy: 1 inside, 0 outside."""
        return (self.sdf(p) <= 0).astype(np.float64)

    def surface_samples(self, count: int, rng, grid: int = 200) -> np.ndarray:
        """Dense points on the zero level set, via marching cubes on the SDF."""
        from .mesh import extract_isosurface, sample_surface

        r = self.bound_radius
        mesh = extract_isosurface(lambda q: -self.sdf(q), 0.0, grid, (-r, r))
        pts = sample_surface(mesh, count, rng)
        return _project_to_surface(self.sdf, pts)


def _project_to_surface(sdf, pts, iters: int = 5, h: float = 1e-6):
    pts = np.array(pts, dtype=np.float64)
    for _ in range(iters):
        d = sdf(pts)
        g = np.stack([(sdf(pts + h * e) - sdf(pts - h * e)) / (2 * h) for e in np.eye(3)], axis=-1)
        g /= np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
        pts -= d[:, None] * g
    return pts


def sphere_scene(radius: float = 0.5) -> AnalyticScene:
    return AnalyticScene(Primitive("sphere", (radius,)), smooth_texture(), name="sphere")


# Tilted so the hole faces sideways: from most hemisphere viewpoints the
# opening is seen only obliquely.
TORUS_TILT = rotation((1.0, 0.0, 0.0), np.deg2rad(70.0))


def torus_scene(major: float = 0.35, minor: float = 0.12) -> AnalyticScene:
    sdf = Primitive("torus", (major, minor), rotation=TORUS_TILT)
    return AnalyticScene(sdf, checker_texture(0.1), name="torus")


def box_scene() -> AnalyticScene:
    sdf = Subtraction(Primitive("box", (0.35, 0.35, 0.35)), Primitive("sphere", (0.45,)))
    return AnalyticScene(sdf, gradient_texture(), name="box")


SCENES = {"sphere": sphere_scene, "torus": torus_scene, "box": box_scene}


def make_scene(name: str) -> AnalyticScene:
    try:
        return SCENES[name]()
    except KeyError:
        raise SceneError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


# --- ground-truth rendering -------------------------------------------------


def sphere_trace(sdf, origins, dirs, near, far, tol: float = 1e-6, max_steps: int = 2000):
    """March each ray by its SDF value until ``|sdf| < tol`` or past ``far``.

    Returns ``(depth, hit)``; depth is +inf where the ray misses.
    """
    t = near.copy()
    active = np.ones(len(t), bool)
    hit = np.zeros(len(t), bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if not len(idx):
            break
        d = sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = np.abs(d) < tol
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, d)
        gone = t[idx] > far[idx]
        active[idx[done | gone]] = False
    return np.where(hit, t, np.inf), hit


@dataclass
class View:
    camera: Camera
    image: np.ndarray
    mask: np.ndarray
    depth: np.ndarray | None = None


def render_ground_truth(scene: AnalyticScene, camera: Camera) -> View:
    """Albedo image, mask and Euclidean depth by sphere tracing."""
    pix = camera.pixel_centers()
    dirs = pixel_directions(camera, pix)
    origins = np.broadcast_to(camera.center, dirs.shape)
    near, far, inside = ray_sphere_interval(origins, dirs, scene.bound_radius)
    depth = np.full(len(pix), np.inf)
    idx = np.flatnonzero(inside)
    d, hit = sphere_trace(scene.sdf, origins[idx], dirs[idx], near[idx], far[idx])
    depth[idx] = d
    mask = np.isfinite(depth)
    image = np.tile(np.asarray(scene.background, float), (len(pix), 1))
    hp = camera.center + depth[mask, None] * dirs[mask]
    image[mask] = scene.texture(hp)
    H, W = camera.height, camera.width
    return View(camera, image.reshape(H, W, 3), mask.reshape(H, W), depth.reshape(H, W))


def generate_cameras(count: int, distance_range=(2.0, 2.0), rng=0, *, resolution: int = 128,
                     fov_deg: float = 40.0, min_elevation: float = 0.0) -> list[Camera]:
    """Look-at cameras with uniformly random directions on the northern
    hemisphere (z >= 0) and uniform distances in ``distance_range``."""
    if count < 1:
        raise SceneError("count must be >= 1")
    d_min, d_max = distance_range
    if not 0 < d_min <= d_max:
        raise SceneError(f"invalid distance range {distance_range}")
    rng = np.random.default_rng(rng)
    focal = 0.5 * resolution / np.tan(np.deg2rad(fov_deg) / 2)
    cams = []
    for _ in range(count):
        # Uniform on the hemisphere: z ~ U(sin(min_elevation), 1).
        z = rng.uniform(np.sin(min_elevation), 1.0)
        phi = rng.uniform(0.0, 2 * np.pi)
        s = np.sqrt(1 - z * z)
        direction = np.array([s * np.cos(phi), s * np.sin(phi), z])
        dist = rng.uniform(d_min, d_max)
        cams.append(Camera.look_at(dist * direction, focal=focal, width=resolution, height=resolution))
    return cams


@dataclass
class MultiViewDataset:
    views: list[View]

    def __post_init__(self):
        if not self.views:
            return
        shape = self.views[0].image.shape
        for i, v in enumerate(self.views):
            if v.image.shape != shape:
                raise SceneError(f"view {i}: image shape {v.image.shape} differs from {shape}")
            if v.depth is not None and not np.array_equal(v.mask, np.isfinite(v.depth)):
                raise SceneError(f"view {i}: mask and finite depth disagree")

    def __len__(self):
        return len(self.views)

    @property
    def cameras(self):
        return [v.camera for v in self.views]

    @property
    def has_depth(self) -> bool:
        return all(v.depth is not None for v in self.views)


def generate_dataset(scene: AnalyticScene, views: int = 24, resolution: int = 128, seed: int = 0,
                     distance_range=(2.0, 2.5), fov_deg: float = 40.0) -> MultiViewDataset:
    cams = generate_cameras(views, distance_range, seed, resolution=resolution, fov_deg=fov_deg)
    return MultiViewDataset([render_ground_truth(scene, c) for c in cams])


# --- dataset IO -------------------------------------------------------------


def to_u8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(_DEPTH_HEADER.pack(b"DPTH", w, h))
        fh.write(np.ascontiguousarray(depth, dtype="<f4").tobytes())


def load_depth(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _DEPTH_HEADER.size:
        raise SceneError(f"{path}: truncated depth header")
    magic, w, h = _DEPTH_HEADER.unpack_from(raw)
    if magic != b"DPTH":
        raise SceneError(f"{path}: bad depth magic {magic!r}")
    body = raw[_DEPTH_HEADER.size :]
    if len(body) != 4 * w * h:
        raise SceneError(f"{path}: depth payload has {len(body)} bytes, header says {w}x{h}")
    return np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(h, w)


def save_dataset(path, dataset: MultiViewDataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_cameras(path / "cameras.txt", dataset.cameras)
    for i, v in enumerate(dataset.views):
        Image.fromarray(to_u8(v.image)).save(path / f"view_{i:04d}.png")
        Image.fromarray(np.where(v.mask, 255, 0).astype(np.uint8)).save(path / f"mask_{i:04d}.png")
        if v.depth is not None:
            save_depth(path / f"depth_{i:04d}.bin", v.depth)


def load_dataset(path) -> MultiViewDataset:
    path = Path(path)
    if not (path / "cameras.txt").is_file():
        raise SceneError(f"{path}: missing cameras.txt")
    views = []
    for i, cam in enumerate(load_cameras(path / "cameras.txt")):
        img_path, mask_path = path / f"view_{i:04d}.png", path / f"mask_{i:04d}.png"
        try:
            image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float64) / 255.0
            mask_raw = np.asarray(Image.open(mask_path).convert("L"))
        except (OSError, ValueError) as exc:
            raise SceneError(f"{path}: view {i}: {exc}") from None
        if image.shape[:2] != (cam.height, cam.width):
            raise SceneError(f"{img_path}: image size {image.shape[1]}x{image.shape[0]} does not match camera")
        if mask_raw.shape != image.shape[:2]:
            raise SceneError(f"{mask_path}: mask size does not match image")
        mask = mask_raw > 127
        depth_path = path / f"depth_{i:04d}.bin"
        depth = load_depth(depth_path) if depth_path.exists() else None
        if depth is not None and depth.shape != mask.shape:
            raise SceneError(f"{depth_path}: depth size does not match image")
        views.append(View(cam, image, mask, depth))
    if not views:
        raise SceneError(f"{path}: dataset has no views")
    return MultiViewDataset(views)


# --- visual hull ------------------------------------------------------------


@dataclass
class VisualHull:
    """Occupancy on a regular grid of cell centres over ``[lo, hi]^3``."""

    occupied: np.ndarray
    lo: float
    hi: float

    @property
    def resolution(self) -> int:
        return self.occupied.shape[0]

    @property
    def cell(self) -> float:
        return (self.hi - self.lo) / self.resolution

    def contains(self, points) -> np.ndarray:
        idx = np.floor((np.asarray(points) - self.lo) / self.cell).astype(int)
        inside = np.all((idx >= 0) & (idx < self.resolution), axis=-1)
        idx = np.clip(idx, 0, self.resolution - 1)
        return inside & self.occupied[idx[..., 0], idx[..., 1], idx[..., 2]]

    def mesh(self):
        from .mesh import extract_from_grid

        return extract_from_grid(self.occupied.astype(np.float64), 0.5, (self.lo, self.hi), cell_centered=True)

    def entry_depth(self, origins, dirs, near, far, samples: int = 256) -> np.ndarray:
        """First depth on each ray inside the hull (+inf when none)."""
        t = np.linspace(0.0, 1.0, samples)
        d = near[:, None] + (far - near)[:, None] * t[None, :]
        pts = origins[:, None, :] + d[..., None] * dirs[:, None, :]
        inside = self.contains(pts)
        first = np.argmax(inside, axis=1)
        return np.where(inside.any(axis=1), d[np.arange(len(d)), first], np.inf)


def mask_lookup(mask: np.ndarray, pix: np.ndarray, front: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    ok = front & np.all(np.isfinite(pix), axis=1)
    safe = np.where(ok[:, None], pix, 0.0)
    i = np.floor(safe[:, 0]).astype(int)
    j = np.floor(safe[:, 1]).astype(int)
    ok &= (i >= 0) & (i < w) & (j >= 0) & (j < h)
    out = np.zeros(len(pix), bool)
    out[ok] = mask[j[ok], i[ok]]
    return out


def visual_hull(masks, cameras, resolution: int = 64, bounds=(-1.0, 1.0)) -> VisualHull:
    """Cells whose centre projects inside every mask, in front of every camera."""
    lo, hi = bounds
    cell = (hi - lo) / resolution
    c = lo + cell * (np.arange(resolution) + 0.5)
    grid = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    occ = np.ones(len(grid), bool)
    for mask, cam in zip(masks, cameras):
        idx = np.flatnonzero(occ)
        pix, _, front = project(cam, grid[idx])
        occ[idx] = mask_lookup(np.asarray(mask, bool), pix, front)
    return VisualHull(occ.reshape(resolution, resolution, resolution), lo, hi)
