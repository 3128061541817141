"""Surface-depth operator: ray marching forward, implicit-gradient backward.

Forward: evaluate the occupancy at ``n`` equally spaced depths
``s0 + j*ds`` (j = 1..n), take the first free-to-occupied transition and
refine it with a safeguarded secant search.  Nothing is recorded on a tape.

Backward: for incoming depth gradients ``lam`` the parameter gradient is
``sum_b mu_b * d f(p_b) / d theta`` with ``mu_b = -lam_b / (grad_p f(p_b) . w_b)``.
That is one taped forward pass of the network at the surface points seeded
with ``mu``, so the memory cost does not depend on ``n``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .camera import Camera, Ray, pixel_directions, ray_sphere_interval
from .field import FieldParams, evaluate, evaluate_occupancy, field_forward, field_gradient

log = logging.getLogger(__name__)

DEPTH_OP = "surface_depth"


class RaycastError(ValueError):
    pass


@dataclass
class RaySamplingConfig:
    """Ray marching settings.

    ``s0`` and ``step`` fix a global sampling interval; when left as None
    each ray samples its own entry/exit span of the sphere of radius
    ``roi_radius`` with ``step = (far - near) / n``.
    """

    n: int = 128
    tau: float = 0.5
    secant_iters: int = 8
    secant_tol: float = 1e-5
    s0: float | None = None
    step: float | None = None
    roi_radius: float = 1.0
    eps_denom: float = 1e-6
    chunk: int = 1 << 16

    def __post_init__(self):
        if self.n < 2:
            raise RaycastError(f"n must be >= 2, got {self.n}")
        if not 0.0 < self.tau < 1.0:
            raise RaycastError(f"tau must lie in (0, 1), got {self.tau}")
        if self.step is not None and self.step <= 0:
            raise RaycastError(f"step must be positive, got {self.step}")
        if (self.s0 is None) != (self.step is None):
            raise RaycastError("s0 and step must be given together")


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    valid: np.ndarray

    def __len__(self):
        return len(self.origins)

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.valid[idx])


@dataclass
class SurfaceHits:
    """Struct-of-arrays surface intersections for a ray batch."""

    hit: np.ndarray
    depth: np.ndarray
    points: np.ndarray
    j: np.ndarray
    denom: np.ndarray
    dirs: np.ndarray
    origins: np.ndarray
    residual: np.ndarray
    started_inside: int = 0

    def __len__(self):
        return len(self.hit)

    def subset(self, idx) -> "SurfaceHits":
        return SurfaceHits(
            self.hit[idx], self.depth[idx], self.points[idx], self.j[idx], self.denom[idx],
            self.dirs[idx], self.origins[idx], self.residual[idx],
        )


def make_rays(origins, dirs, cfg: RaySamplingConfig) -> RayBatch:
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs)).copy()
    dirs = np.asarray(dirs, dtype=np.float64)
    if cfg.s0 is not None:
        near = np.full(len(dirs), cfg.s0)
        far = near + cfg.n * cfg.step
        valid = np.ones(len(dirs), bool)
    else:
        near, far, valid = ray_sphere_interval(origins, dirs, cfg.roi_radius)
    return RayBatch(origins, dirs, near, far, valid)


def camera_rays(camera: Camera, pixels, cfg: RaySamplingConfig) -> RayBatch:
    dirs = pixel_directions(camera, pixels)
    return make_rays(camera.center, dirs, cfg)


def ray_from(ray: Ray) -> RayBatch:
    return RayBatch(ray.origin[None], ray.direction[None], np.array([ray.near]), np.array([ray.far]), np.array([True]))


def _steps(rays: RayBatch, cfg: RaySamplingConfig):
    if cfg.s0 is not None:
        return np.full(len(rays), cfg.s0), np.full(len(rays), cfg.step)
    return rays.near, (rays.far - rays.near) / cfg.n


def sample_depths(rays: RayBatch, cfg: RaySamplingConfig) -> np.ndarray:
    """(B, n) sample depths s0 + j*ds for j = 1..n."""
    s0, ds = _steps(rays, cfg)
    j = np.arange(1, cfg.n + 1, dtype=np.float64)
    return s0[:, None] + ds[:, None] * j[None, :]


def sample_ray(ray: Ray, cfg: RaySamplingConfig) -> np.ndarray:
    """The n sample points of a single ray, shape (n, 3)."""
    d = sample_depths(ray_from(ray), cfg)[0]
    return ray.origin + d[:, None] * ray.direction


def find_crossing(occ, tau: float):
    """First free-to-occupied transition along the last axis.

    Returns the 1-based sample index ``j`` with ``occ[j] < tau <= occ[j+1]``
    (so the crossing lies in ``[s0 + j*ds, s0 + (j+1)*ds]``).  For a single
    sequence the result is ``None`` when there is no such transition; for
    batches 0 marks "no crossing".
    """
    occ = np.asarray(occ, dtype=np.float64)
    single = occ.ndim == 1
    occ = np.atleast_2d(occ)
    inside = occ >= tau
    trans = ~inside[:, :-1] & inside[:, 1:]
    any_t = trans.any(axis=1)
    j = np.where(any_t, np.argmax(trans, axis=1) + 1, 0)
    if single:
        return int(j[0]) if j[0] else None
    return j


def secant_refine(f, lo, hi, tau: float = 0.0, iters: int = 8, tol: float = 1e-5, indexed: bool = False):
    """Safeguarded secant search for ``f(d) = tau`` inside ``[lo, hi]``.

    ``f`` maps a depth array to values; ``f(lo) < tau <= f(hi)`` is
    required.  An iterate that leaves the current bracket is replaced by the
    bracket midpoint.  Stops per element once ``|f(d) - tau| < tol``;
    elements that exhaust the budget return the bracket end closest to the
    level.  Returns ``(depth, residual)`` with residual ``f(depth) - tau``.
    With ``indexed`` the callback is ``f(depths, index)`` where ``index``
    selects the elements still being refined.
    """
    scalar = np.ndim(lo) == 0
    a = np.atleast_1d(np.asarray(lo, dtype=np.float64)).copy()
    b = np.atleast_1d(np.asarray(hi, dtype=np.float64)).copy()
    call = f if indexed else (lambda x, _idx: f(x))
    everything = np.arange(len(a))
    fa = np.asarray(call(a, everything), dtype=np.float64) - tau
    fb = np.asarray(call(b, everything), dtype=np.float64) - tau
    if np.any(~(fa < 0)) or np.any(~(fb >= 0)):
        raise RaycastError("secant_refine: interval does not bracket a free-to-occupied crossing")
    x0, f0, x1, f1 = a.copy(), fa.copy(), b.copy(), fb.copy()
    out = np.where(np.abs(fa) < np.abs(fb), a, b)
    res = np.where(np.abs(fa) < np.abs(fb), fa, fb)
    active = np.abs(res) >= tol
    for _ in range(iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        with np.errstate(divide="ignore", invalid="ignore"):
            x = x1[idx] - f1[idx] * (x1[idx] - x0[idx]) / (f1[idx] - f0[idx])
        ai, bi = a[idx], b[idx]
        bad = ~np.isfinite(x) | (x <= ai) | (x >= bi)
        x = np.where(bad, 0.5 * (ai + bi), x)
        fx = np.asarray(call(x, idx), dtype=np.float64) - tau
        below = fx < 0
        a[idx] = np.where(below, x, ai)
        fa[idx] = np.where(below, fx, fa[idx])
        b[idx] = np.where(below, bi, x)
        fb[idx] = np.where(below, fb[idx], fx)
        x0[idx], f0[idx] = x1[idx], f1[idx]
        x1[idx], f1[idx] = x, fx
        better = np.abs(fx) < np.abs(res[idx])
        out[idx] = np.where(better, x, out[idx])
        res[idx] = np.where(better, fx, res[idx])
        active[idx] = np.abs(res[idx]) >= tol
    if scalar:
        return float(out[0]), float(res[0])
    return out, res


def depth_forward(rays: RayBatch, params: FieldParams, z, cfg: RaySamplingConfig) -> SurfaceHits:
    """Predict surface depth for every ray; no tape is involved."""
    B = len(rays)
    hit = np.zeros(B, bool)
    depth = np.full(B, np.inf)
    points = np.zeros((B, 3))
    jj = np.zeros(B, int)
    denom = np.zeros(B)
    residual = np.zeros(B)
    started_inside = 0
    idx = np.flatnonzero(rays.valid)
    if len(idx):
        sub = rays.subset(idx)
        d = sample_depths(sub, cfg)
        pts = sub.origins[:, None, :] + d[..., None] * sub.dirs[:, None, :]
        occ = evaluate_occupancy(pts.reshape(-1, 3), z, params, cfg.chunk).reshape(d.shape)
        j = find_crossing(occ, cfg.tau)
        started_inside = int(np.sum((occ[:, 0] >= cfg.tau) & (j == 0)))
        sel = np.flatnonzero(j > 0)
        if len(sel):
            s0, ds = _steps(sub, cfg)
            lo = s0[sel] + ds[sel] * j[sel]
            hi = lo + ds[sel]
            o, w = sub.origins[sel], sub.dirs[sel]

            def occ_at(depths, which):
                return evaluate_occupancy(o[which] + depths[:, None] * w[which], z, params, cfg.chunk)

            dhat, res = secant_refine(occ_at, lo, hi, cfg.tau, cfg.secant_iters, cfg.secant_tol, indexed=True)
            rows = idx[sel]
            hit[rows] = True
            depth[rows] = dhat
            points[rows] = o + dhat[:, None] * w
            jj[rows] = j[sel]
            residual[rows] = res
            grad = field_gradient(points[rows], z, params)
            denom[rows] = np.einsum("ij,ij->i", grad, w)
    if started_inside:
        log.debug("%d rays start inside occupied space and report no hit", started_inside)
    return SurfaceHits(hit, depth, points, jj, denom, rays.dirs.copy(), rays.origins.copy(), residual, started_inside)


@dataclass
class DepthGradient:
    grads: dict[str, np.ndarray]
    z_grad: np.ndarray | None
    excluded: int


def depth_backward(lam, hits: SurfaceHits, params: FieldParams, z=None, eps: float = 1e-6, tape: ad.Tape | None = None,
                   z_is_param: bool = False) -> DepthGradient:
    """Parameter gradient of ``sum_b lam_b * d_b`` through implicit differentiation.

    Rays with ``|denom| <= eps`` (grazing hits) are dropped from the
    gradient and counted in ``excluded``.  ``tape`` is a scratch tape to
    record on; a new one is created when omitted.
    """
    lam = np.asarray(lam, dtype=np.float64).reshape(-1)
    if len(lam) != len(hits):
        raise RaycastError(f"depth_backward: {len(lam)} gradients for {len(hits)} hits")
    if not np.all(hits.hit):
        raise RaycastError("depth_backward: every ray must have a surface hit")
    ok = np.abs(hits.denom) > eps
    excluded = int(np.sum(~ok))
    if excluded:
        log.info("depth_backward: %d grazing rays excluded (|denom| <= %g)", excluded, eps)
    mu = np.where(ok, -lam / np.where(ok, hits.denom, 1.0), 0.0)
    tape = ad.Tape() if tape is None else tape
    bound = params.bind(tape)
    z_leaf = tape.leaf(z) if z_is_param else None
    occ, _ = field_forward(hits.points, z_leaf if z_is_param else z, params, tape, bound=bound)
    total = ad.sum(ad.mul(occ, ad.constant(mu)))
    leaf_grads = ad.backward(total)
    grads = bound.gradients(leaf_grads)
    return DepthGradient(grads, leaf_grads[z_leaf.node] if z_is_param else None, excluded)


def _depth_rule(ctx, g, tape: ad.Tape):
    hits, params, z, eps, names, has_z, stats = ctx
    child = tape.child()
    res = depth_backward(g, hits, params, z, eps, tape=child, z_is_param=has_z)
    tape.child_nodes += child.total_nodes
    stats["excluded"] = stats.get("excluded", 0) + res.excluded
    out = [res.grads[k] for k in names]
    if has_z:
        out.append(res.z_grad.reshape(np.shape(z)))
    return out


def surface_depth(tape: ad.Tape, params: FieldParams, hits: SurfaceHits, z=None, eps: float = 1e-6,
                  stats: dict | None = None) -> ad.Tensor:
    """Record the depth operator on ``tape``: a (B,) Tensor of surface depths
    whose backward is :func:`depth_backward`.  ``z`` may be a latent leaf."""
    if DEPTH_OP not in tape.custom_rules:
        tape.register_custom(DEPTH_OP, _depth_rule)
    bound = params.bind(tape)
    names = params.names
    inputs = [bound[k] for k in names]
    has_z = isinstance(z, ad.Tensor)
    if has_z:
        inputs.append(z)
    zval = z.data if has_z else z
    ctx = (hits, params, zval, eps, names, has_z, {} if stats is None else stats)
    return tape.custom(DEPTH_OP, inputs, hits.depth.copy(), ctx)


@dataclass
class Rendering:
    image: np.ndarray
    depth: np.ndarray
    mask: np.ndarray


def render(camera: Camera, params: FieldParams, z=None, cfg: RaySamplingConfig | None = None,
           resolution: tuple[int, int] | None = None, background=(1.0, 1.0, 1.0), batch: int = 4096) -> Rendering:
    """Colour, depth (inf on misses) and hit mask for every pixel."""
    cfg = cfg or RaySamplingConfig()
    if resolution is not None and tuple(resolution) != (camera.width, camera.height):
        sx, sy = resolution[0] / camera.width, resolution[1] / camera.height
        K = np.diag([sx, sy, 1.0]) @ camera.K
        camera = Camera(K, camera.R, camera.t, resolution[0], resolution[1])
    pix = camera.pixel_centers()
    H, W = camera.height, camera.width
    image = np.tile(np.asarray(background, dtype=np.float64), (H * W, 1))
    depth = np.full(H * W, np.inf)
    mask = np.zeros(H * W, bool)
    for start in range(0, len(pix), batch):
        rays = camera_rays(camera, pix[start : start + batch], cfg)
        hits = depth_forward(rays, params, z, cfg)
        rows = np.flatnonzero(hits.hit)
        if len(rows):
            _, rgb = evaluate(hits.points[rows], z, params)
            image[start + rows] = rgb
            depth[start + rows] = hits.depth[rows]
            mask[start + rows] = True
    return Rendering(image.reshape(H, W, 3), depth.reshape(H, W), mask.reshape(H, W))
