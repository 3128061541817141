"""Finite-difference checks of the surface-depth gradient.

Used by the test-suite and by ``dvrkit gradcheck``.  The finite-difference
side re-runs the full forward ray cast for every perturbed parameter, so it
never touches the implicit-gradient code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .field import FieldParams, evaluate_logits, init_params, min_preactivation
from .raycast import RayBatch, RaySamplingConfig, depth_forward, make_rays, surface_depth

# Tight secant settings: finite differences at h=1e-4 need depths accurate
# far below the training tolerance.
CHECK_CFG = dict(n=64, secant_iters=60, secant_tol=1e-13, roi_radius=1.0)


@dataclass
class GradCheckResult:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max())

    def fraction_below(self, tol: float) -> float:
        return float(np.mean(self.rel_err < tol))


def relative_error(a, b, floor: float = 1e-7) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor) elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def random_scene(seed: int, width: int = 16, n_blocks: int = 5, n_rays: int = 5, gain: float = 4.0,
                 cfg: RaySamplingConfig | None = None, kink_margin: float = 2e-3):
    """Random network plus ``n_rays`` rays that all hit its level set.

    The output layer is scaled by ``gain`` so the field has a usable slope
    and the occupancy bias is centred on the sampled logits so level-set
    crossings exist.  Rays whose surface point sits within ``kink_margin``
    of a ReLU kink are skipped.
    """
    cfg = cfg or RaySamplingConfig(**CHECK_CFG)
    rng = np.random.default_rng(seed)
    params = init_params(width, n_blocks, rng=rng)
    params.arrays["fc_out.W"] *= gain
    origin = np.array([0.0, 0.0, -2.0])
    dirs = rng.normal(size=(400, 3)) * 0.25 + [0.0, 0.0, 1.0]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = make_rays(origin, dirs, cfg)
    d = np.linspace(rays.near, rays.far, 32).T
    pts = (rays.origins[:, None] + d[..., None] * rays.dirs[:, None]).reshape(-1, 3)
    params.arrays["fc_out.b"][0] -= np.median(evaluate_logits(pts, None, params)[:, 0])
    hits = depth_forward(rays, params, None, cfg)
    usable = hits.hit & (np.abs(hits.denom) > 1e-2)
    # Central differences are only valid away from ReLU kinks.
    margin = np.zeros(len(rays))
    margin[usable] = min_preactivation(hits.points[usable], None, params)
    good = np.flatnonzero(usable & (margin > kink_margin))
    if len(good) < n_rays:
        raise RuntimeError(f"seed {seed}: only {len(good)} usable rays")
    pick = rng.choice(good, n_rays, replace=False)
    return params, rays.subset(pick), cfg


def depth_sum_gradient(params: FieldParams, rays: RayBatch, cfg: RaySamplingConfig, weights=None) -> np.ndarray:
    """Analytic d(sum_b weights_b * d_b)/d theta as a flat vector."""
    hits = depth_forward(rays, params, None, cfg)
    if not hits.hit.all():
        raise RuntimeError("a check ray lost its surface hit")
    tape = ad.Tape()
    d = surface_depth(tape, params, hits)
    w = np.ones(len(rays)) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = ad.sum(ad.mul(d, ad.constant(w)))
    grads = params.bind(tape).gradients(ad.backward(loss))
    return np.concatenate([grads[k].reshape(-1) for k in params.names])


def depth_sum(params: FieldParams, rays: RayBatch, cfg: RaySamplingConfig, weights=None) -> float:
    hits = depth_forward(rays, params, None, cfg)
    if not hits.hit.all():
        return np.nan
    w = np.ones(len(rays)) if weights is None else np.asarray(weights, dtype=np.float64)
    return float(np.dot(w, hits.depth))


def central_differences(fn, params: FieldParams, h: float = 1e-4) -> np.ndarray:
    theta = params.flat()
    out = np.empty_like(theta)
    for i in range(len(theta)):
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        out[i] = (fn(params.with_flat(plus)) - fn(params.with_flat(minus))) / (2 * h)
    return out


def check_depth_gradient(seed: int = 0, width: int = 16, n_blocks: int = 5, n_rays: int = 5,
                         h: float = 1e-4) -> GradCheckResult:
    params, rays, cfg = random_scene(seed, width, n_blocks, n_rays)
    analytic = depth_sum_gradient(params, rays, cfg)
    numeric = central_differences(lambda p: depth_sum(p, rays, cfg), params, h)
    return GradCheckResult(analytic, numeric, relative_error(analytic, numeric))
