"""Training objective: pixel partition and the five loss terms.

Every term is a sum over its pixel set divided by a common normaliser
(the number of pixels in the batch), so per-term weights keep their
relative meaning while the scale does not depend on the batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .field import FieldParams, field_forward, occupancy_gradient_taped
from .raycast import RayBatch, SurfaceHits, surface_depth

BCE_CLAMP = 1e-7
EPS_NORMAL_GRAD = 1e-8


@dataclass
class PixelBatch:
    """Sampled pixels with their supervision and rays (struct of arrays)."""

    view: np.ndarray
    uv: np.ndarray
    rgb: np.ndarray
    in_mask: np.ndarray
    depth: np.ndarray  # NaN where no ground-truth depth
    rays: RayBatch

    def __post_init__(self):
        has_depth = np.isfinite(self.depth)
        if np.any(has_depth & ~self.in_mask):
            raise ValueError("ground-truth depth is only valid inside the mask")

    def __len__(self):
        return len(self.view)


@dataclass
class PixelPartition:
    p0: np.ndarray
    p1: np.ndarray
    p2: np.ndarray

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.p0), len(self.p1), len(self.p2)


def classify(in_mask, hit) -> PixelPartition:
    """P0: in mask with a hit; P1: outside the mask; P2: in mask, no hit."""
    in_mask = np.asarray(in_mask, bool)
    hit = np.asarray(hit, bool)
    return PixelPartition(
        np.flatnonzero(in_mask & hit), np.flatnonzero(~in_mask), np.flatnonzero(in_mask & ~hit)
    )


@dataclass
class LossWeights:
    rgb: float = 1.0
    depth: float = 1.0
    freespace: float = 1.0
    occupancy: float = 1.0
    normal: float = 0.05

    def __post_init__(self):
        vals = [self.rgb, self.depth, self.freespace, self.occupancy, self.normal]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")

    def all_zero(self) -> bool:
        return not any([self.rgb, self.depth, self.freespace, self.occupancy, self.normal])


# --- scalar building blocks -------------------------------------------------


def l1(pred: ad.Tensor, target) -> ad.Tensor:
    return ad.sum(ad.absolute(ad.sub(pred, ad.constant(target))))


def bce(prob: ad.Tensor, target: int) -> ad.Tensor:
    """Summed binary cross entropy against a constant 0/1 target, with the
    probability clamped to [1e-7, 1 - 1e-7]."""
    if target == 1:
        return ad.scale(ad.sum(ad.log(prob, clamp=BCE_CLAMP)), -1.0)
    return ad.scale(ad.sum(ad.log(ad.sub(ad.constant(1.0), prob), clamp=BCE_CLAMP)), -1.0)


def bce_value(prob, target: int) -> np.ndarray:
    p = np.clip(np.asarray(prob, dtype=np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    return -np.log(p) if target == 1 else -np.log(1 - p)


def image_gradient_features(rgb, rgb_dx, rgb_dy):
    """RGB plus forward differences to the right and lower neighbour."""
    return np.concatenate([rgb, rgb_dx - rgb, rgb_dy - rgb], axis=-1)


# --- loss terms -------------------------------------------------------------


def loss_rgb(tape: ad.Tape, params: FieldParams, hits: SurfaceHits, gt_rgb, z=None, normalizer: float = 1.0,
             stats: dict | None = None, depth_tensor: ad.Tensor | None = None):
    """Photometric l1 on surface colours; gradients reach the weights both
    directly and through the surface depth.  Returns (loss, rgb tensor)."""
    d = depth_tensor if depth_tensor is not None else surface_depth(tape, params, hits, z, stats=stats)
    rgb = surface_colors(tape, params, hits, d, z)
    return ad.scale(l1(rgb, gt_rgb), 1.0 / normalizer), rgb


def surface_points(hits: SurfaceHits, depth: ad.Tensor) -> ad.Tensor:
    """p = r0 + d * w as a function of the depth tensor."""
    d_col = ad.slice_(depth, (slice(None), None))
    return ad.add(ad.mul(d_col, ad.constant(hits.dirs)), ad.constant(hits.origins))


def surface_colors(tape, params, hits, depth: ad.Tensor, z=None) -> ad.Tensor:
    _, rgb = field_forward(surface_points(hits, depth), z, params, tape)
    return rgb


def loss_depth(depth: ad.Tensor, gt_depth, normalizer: float = 1.0) -> ad.Tensor:
    return ad.scale(l1(depth, gt_depth), 1.0 / normalizer)


def loss_freespace(tape, params, points, z=None, normalizer: float = 1.0) -> ad.Tensor:
    """BCE(f(p), 0) at the given (constant) points."""
    occ, _ = field_forward(np.asarray(points, dtype=np.float64).reshape(-1, 3), z, params, tape)
    return ad.scale(bce(occ, 0), 1.0 / normalizer)


def loss_occupancy(tape, params, points, z=None, normalizer: float = 1.0) -> ad.Tensor:
    """BCE(f(p), 1) at the given (constant) points."""
    occ, _ = field_forward(np.asarray(points, dtype=np.float64).reshape(-1, 3), z, params, tape)
    return ad.scale(bce(occ, 1), 1.0 / normalizer)


def freespace_points(rays: RayBatch, hits: SurfaceHits, rng) -> np.ndarray:
    """p_hat where a surface was predicted, else a uniform point on the ray."""
    t = rng.random(len(rays))
    d = np.where(hits.hit, hits.depth, rays.near + t * (rays.far - rays.near))
    d = np.where(np.isfinite(d), d, rays.near)
    return rays.origins + d[:, None] * rays.dirs


def occupancy_depths(rays: RayBatch, rng, mode: str = "random", gt_depth=None, hull=None) -> np.ndarray:
    """Target depth on each P2 ray: uniform random, visual-hull entry or GT."""
    if mode == "random":
        return rays.near + rng.random(len(rays)) * (rays.far - rays.near)
    if mode == "depth":
        if gt_depth is None:
            raise ValueError("occupancy mode 'depth' needs ground-truth depth")
        return np.asarray(gt_depth, dtype=np.float64)
    if mode == "hull":
        if hull is None:
            raise ValueError("occupancy mode 'hull' needs a visual hull")
        d = hull.entry_depth(rays.origins, rays.dirs, rays.near, rays.far)
        fallback = rays.near + rng.random(len(rays)) * (rays.far - rays.near)
        return np.where(np.isfinite(d), d, fallback)
    raise ValueError(f"unknown occupancy mode {mode!r}")


def random_in_ball(center, radius: float, rng) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    v = rng.normal(size=center.shape)
    v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
    r = radius * rng.random(len(center)) ** (1.0 / 3.0)
    return center + v * r[:, None]


def _unit(g: ad.Tensor) -> ad.Tensor:
    sq = ad.sum(ad.mul(g, g), axis=1)
    inv = ad.power(sq, -0.5)
    return ad.mul(g, ad.slice_(inv, (slice(None), None)))


def loss_normal(tape, params, surface, neighbours, z=None, normalizer: float = 1.0):
    """sum ||n(p) - n(q)||_2 with n the normalised occupancy gradient.

    Points are treated as constants.  Pairs where either gradient norm is
    <= 1e-8 are dropped; returns (loss, number dropped).
    """
    surface = np.asarray(surface, dtype=np.float64).reshape(-1, 3)
    neighbours = np.asarray(neighbours, dtype=np.float64).reshape(-1, 3)
    both = np.concatenate([surface, neighbours])
    zval = z.data if isinstance(z, ad.Tensor) else z
    g = occupancy_gradient_taped(both, zval, params, tape)
    norms = np.linalg.norm(g.data, axis=1)
    k = len(surface)
    keep = np.flatnonzero((norms[:k] > EPS_NORMAL_GRAD) & (norms[k:] > EPS_NORMAL_GRAD))
    dropped = k - len(keep)
    n = _unit(ad.slice_(g, np.concatenate([keep, keep + k])))
    diff = ad.sub(ad.slice_(n, slice(0, len(keep))), ad.slice_(n, slice(len(keep), 2 * len(keep))))
    dist = ad.power(ad.sum(ad.mul(diff, diff), axis=1), 0.5)
    return ad.scale(ad.sum(dist), 1.0 / normalizer), dropped


@dataclass
class LossModes:
    features: str = "rgb"  # "rgb" or "rgb+grad"
    occupancy: str = "random"  # "random", "hull" or "depth"
    normal_radius: float = 0.01


@dataclass
class LossResult:
    total: ad.Tensor
    terms: dict[str, float]
    partition: PixelPartition
    diagnostics: dict[str, int] = field(default_factory=dict)


def total_loss(tape: ad.Tape, params: FieldParams, batch: PixelBatch, hits: SurfaceHits, weights: LossWeights,
               modes: LossModes, rng, z=None, hull=None, neighbours: dict | None = None) -> LossResult:
    """Weighted sum of all terms over one pixel batch.

    Every term is recorded even when its pixel set is empty (it then
    contributes exactly 0), which keeps the tape structure independent of
    the partition.  ``neighbours`` carries the hits and colours of the
    right/lower neighbour pixels for image-gradient features.
    """
    part = classify(batch.in_mask, hits.hit)
    N = max(len(batch), 1)
    # One stream per random term, so a term's samples do not depend on
    # which other terms are switched on.
    rng_free, rng_occ, rng_normal = (np.random.default_rng(int(k)) for k in rng.integers(0, 2**63, 3))
    stats: dict = {}
    terms: dict[str, ad.Tensor] = {}
    zero = ad.constant(0.0)

    p0 = part.p0
    h0 = hits.subset(p0)
    if weights.rgb or weights.depth:
        d0 = surface_depth(tape, params, h0, z, stats=stats)
        if weights.rgb:
            rgb = surface_colors(tape, params, h0, d0, z)
            if modes.features == "rgb+grad" and neighbours is not None:
                terms["rgb"] = _rgb_grad_loss(tape, params, batch, hits, p0, rgb, neighbours, z, N, stats)
            else:
                terms["rgb"] = ad.scale(l1(rgb, batch.rgb[p0]), 1.0 / N)
        if weights.depth:
            has = np.isfinite(batch.depth[p0])
            sel = np.flatnonzero(has)
            terms["depth"] = loss_depth(ad.slice_(d0, sel), batch.depth[p0][sel], N)
    if weights.freespace:
        p1 = part.p1
        valid = p1[batch.rays.valid[p1]]
        pts = freespace_points(batch.rays.subset(valid), hits.subset(valid), rng_free)
        terms["freespace"] = loss_freespace(tape, params, pts, z, N)
    if weights.occupancy:
        p2 = part.p2
        valid = p2[batch.rays.valid[p2]]
        rays2 = batch.rays.subset(valid)
        mode = modes.occupancy
        gt = batch.depth[valid]
        if mode == "depth" and not np.all(np.isfinite(gt)):
            # Pixels without depth fall back to random sampling.
            d = np.where(np.isfinite(gt), gt, occupancy_depths(rays2, rng_occ, "random"))
        else:
            d = occupancy_depths(rays2, rng_occ, mode, gt, hull)
        pts = rays2.origins + d[:, None] * rays2.dirs
        terms["occupancy"] = loss_occupancy(tape, params, pts, z, N)
    if weights.normal:
        q = random_in_ball(h0.points, modes.normal_radius, rng_normal)
        terms["normal"], dropped = loss_normal(tape, params, h0.points, q, z, N)
        stats["normal_dropped"] = dropped

    total = zero
    w = {"rgb": weights.rgb, "depth": weights.depth, "freespace": weights.freespace,
         "occupancy": weights.occupancy, "normal": weights.normal}
    for name, t in terms.items():
        total = ad.add(total, ad.scale(t, w[name]))
    values = {name: float(np.sum(terms[name].data)) if name in terms else 0.0 for name in w}
    return LossResult(total, values, part, stats)


def _rgb_grad_loss(tape, params, batch, hits, p0, rgb, neighbours, z, N, stats):
    """l1 on [rgb, rgb(right) - rgb, rgb(down) - rgb] where all three hit."""
    hx, hy = neighbours["hits_x"], neighbours["hits_y"]
    ok = hx.hit[p0] & hy.hit[p0]
    sel = np.flatnonzero(ok)
    base = ad.slice_(rgb, sel)
    loss = l1(rgb, batch.rgb[p0])
    if len(sel):
        rows = p0[sel]
        dx = surface_depth(tape, params, hx.subset(rows), z, stats=stats)
        dy = surface_depth(tape, params, hy.subset(rows), z, stats=stats)
        cx = surface_colors(tape, params, hx.subset(rows), dx, z)
        cy = surface_colors(tape, params, hy.subset(rows), dy, z)
        gx = ad.sub(cx, base)
        gy = ad.sub(cy, base)
        loss = ad.add(loss, l1(gx, neighbours["rgb_x"][rows] - batch.rgb[rows]))
        loss = ad.add(loss, l1(gy, neighbours["rgb_y"][rows] - batch.rgb[rows]))
    return ad.scale(loss, 1.0 / N)
