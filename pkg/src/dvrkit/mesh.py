"""Isosurface extraction, mesh export and Chamfer-L1 evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .field import FieldParams, evaluate, evaluate_occupancy


class MeshError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and self.faces.max() >= len(self.vertices):
            raise MeshError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edge_face_counts(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        """Every edge borders exactly two faces."""
        return not self.is_empty and bool(np.all(self.edge_face_counts() == 2))


@dataclass
class EvalReport:
    accuracy: float
    completeness: float
    chamfer_l1: float

    def __str__(self):
        return f"accuracy={self.accuracy:.6f} completeness={self.completeness:.6f} chamfer_l1={self.chamfer_l1:.6f}"


def _clean(verts, faces) -> TriangleMesh:
    faces = faces[(faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])]
    used = np.unique(faces)
    remap = np.full(len(verts), -1)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[faces])


def extract_from_grid(values: np.ndarray, level: float, bounds=(-1.0, 1.0), cell_centered: bool = False) -> TriangleMesh:
    """Marching cubes on a cubic grid of samples (axis order x, y, z).

    The grid is padded with one layer of ``-inf``-like values so surfaces that
    touch the boundary are closed.  ``cell_centered`` grids place sample
    ``i`` at ``lo + (i + 0.5) * cell`` instead of ``lo + i * cell``.
    """
    values = np.asarray(values, dtype=np.float64)
    R = values.shape[0]
    lo, hi = bounds
    if cell_centered:
        spacing = (hi - lo) / R
        origin = lo + 0.5 * spacing
    else:
        if R < 2:
            raise MeshError("grid resolution must be >= 2")
        spacing = (hi - lo) / (R - 1)
        origin = lo
    if values.max() < level:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    floor = min(values.min(), level) - 1.0
    padded = np.pad(values, 1, constant_values=floor)
    try:
        verts, faces, _, _ = marching_cubes(padded, level, spacing=(spacing,) * 3)
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    verts = verts + origin - spacing
    # skimage orients faces towards increasing values; flip so normals point
    # out of the occupied region.
    return _clean(verts, faces[:, ::-1].astype(np.int64))


def grid_points(resolution: int, bounds=(-1.0, 1.0)) -> np.ndarray:
    lo, hi = bounds
    c = np.linspace(lo, hi, resolution)
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


def extract_isosurface(fn, level: float, resolution: int, bounds=(-1.0, 1.0), chunk: int = 1 << 18) -> TriangleMesh:
    """Level set of an arbitrary vectorised scalar function."""
    pts = grid_points(resolution, bounds)
    vals = np.concatenate([fn(pts[i : i + chunk]) for i in range(0, len(pts), chunk)])
    return extract_from_grid(vals.reshape((resolution,) * 3), level, bounds)


def extract_mesh(params: FieldParams, z=None, resolution: int = 128, tau: float = 0.5, bounds=(-1.0, 1.0)) -> TriangleMesh:
    """Marching cubes on the occupancy grid at level ``tau``; vertices are
    coloured with the texture head."""
    if resolution < 2:
        raise MeshError("grid resolution must be >= 2")
    mesh = extract_isosurface(lambda p: evaluate_occupancy(p, z, params), tau, resolution, bounds)
    if not mesh.is_empty:
        mesh.colors = np.concatenate(
            [evaluate(mesh.vertices[i : i + 65536], z, params)[1] for i in range(0, len(mesh.vertices), 65536)]
        )
    return mesh


def sample_surface(mesh: TriangleMesh, count: int, rng=0) -> np.ndarray:
    """Area-weighted uniform samples on the triangles."""
    if mesh.is_empty:
        raise MeshError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has zero area")
    rng = np.random.default_rng(rng)
    face = rng.choice(len(areas), size=count, p=areas / total)
    u, v = rng.random(count), rng.random(count)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.vertices[mesh.faces[face]]
    return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def nearest_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cKDTree(b).query(a, k=1)[0]


def nearest_distances_brute(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = np.empty(len(a))
    for i in range(0, len(a), chunk):
        d = a[i : i + chunk, None, :] - b[None, :, :]
        out[i : i + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", d, d).min(axis=1))
    return out


def chamfer_l1(a, b, brute: bool = False) -> EvalReport:
    """accuracy = mean dist a->b, completeness = mean dist b->a, chamfer = their mean."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if not len(a) or not len(b):
        raise MeshError("chamfer_l1 needs two non-empty point sets")
    nn = nearest_distances_brute if brute else nearest_distances
    acc = float(nn(a, b).mean())
    comp = float(nn(b, a).mean())
    return EvalReport(acc, comp, 0.5 * (acc + comp))


def evaluate_mesh(mesh: TriangleMesh, reference_points: np.ndarray, count: int = 100_000, rng=0) -> EvalReport:
    return chamfer_l1(sample_surface(mesh, count, rng), reference_points)


# --- export -----------------------------------------------------------------


def save_obj(path, mesh: TriangleMesh) -> None:
    """Wavefront OBJ; per-vertex colours go on ``#vc r g b`` comment lines
    in vertex order, so plain OBJ readers ignore them."""
    lines = ["# dvrkit mesh"]
    lines += [f"v {x:.8f} {y:.8f} {z:.8f}" for x, y, z in mesh.vertices]
    if mesh.colors is not None:
        lines += [f"#vc {r:.6f} {g:.6f} {b:.6f}" for r, g, b in mesh.colors]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    verts, faces, colors = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
        elif parts[0] == "#vc":
            colors.append([float(x) for x in parts[1:4]])
    mesh = TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    if colors and len(colors) == len(verts):
        mesh.colors = np.array(colors)
    return mesh


def save_ply(path, mesh: TriangleMesh) -> None:
    """Binary little-endian PLY: float xyz + uchar rgb per vertex, int32 faces."""
    colors = mesh.colors if mesh.colors is not None else np.full((len(mesh.vertices), 3), 0.7)
    rgb = np.clip(np.round(colors * 255), 0, 255).astype(np.uint8)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    vdt = np.dtype([("p", "<f4", 3), ("c", "u1", 3)])
    vbuf = np.empty(len(mesh.vertices), vdt)
    vbuf["p"], vbuf["c"] = mesh.vertices, rgb
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    fbuf = np.empty(len(mesh.faces), fdt)
    fbuf["n"], fbuf["i"] = 3, mesh.faces
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vbuf.tobytes())
        fh.write(fbuf.tobytes())


def load_ply(path) -> TriangleMesh:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[2])
        elif line.startswith("element face"):
            nf = int(line.split()[2])
    vdt = np.dtype([("p", "<f4", 3), ("c", "u1", 3)])
    fdt = np.dtype([("n", "u1"), ("i", "<i4", 3)])
    v = np.frombuffer(raw, vdt, nv, end)
    f = np.frombuffer(raw, fdt, nf, end + nv * vdt.itemsize)
    return TriangleMesh(v["p"].astype(np.float64), f["i"].astype(np.int64), v["c"].astype(np.float64) / 255.0)


def save_mesh(path, mesh: TriangleMesh) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        save_ply(path, mesh)
    elif path.suffix.lower() == ".obj":
        save_obj(path, mesh)
    else:
        raise MeshError(f"{path}: unsupported mesh extension (use .obj or .ply)")


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path)
    raise MeshError(f"{path}: unsupported mesh extension (use .obj or .ply)")
