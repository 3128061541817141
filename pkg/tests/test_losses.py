import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dvrkit import autodiff as ad
from dvrkit import field, gradcheck, losses, raycast

from oracles import full_loss_check, rel_err
from test_field import linear_field


def _grad_vector(params, tape, loss):
    g = params.bind(tape).gradients(ad.backward(loss))
    return np.concatenate([g[k].ravel() for k in params.names])


def _hand_hit(p, point, w):
    point, w = np.atleast_2d(point), np.atleast_2d(w)
    denom = np.einsum("ij,ij->i", field.field_gradient(point, None, p), w)
    return raycast.SurfaceHits(
        np.ones(len(point), bool), np.linalg.norm(point, axis=1), point, np.ones(len(point), int), denom, w,
        np.zeros_like(point), np.zeros(len(point)),
    )


@pytest.mark.parametrize("in_mask, hit, part", [(True, True, 0), (False, True, 1), (False, False, 1), (True, False, 2)])
def test_classify_cases(in_mask, hit, part):
    sets = losses.classify([in_mask], [hit])
    assert [len(s) for s in (sets.p0, sets.p1, sets.p2)] == [int(part == k) for k in range(3)]


@settings(max_examples=100, deadline=None)
@given(arrays(bool, st.integers(0, 60)), st.data())
def test_partition_complete_and_disjoint(in_mask, data):
    hit = data.draw(arrays(bool, len(in_mask)))
    part = losses.classify(in_mask, hit)
    allidx = np.concatenate([part.p0, part.p1, part.p2])
    assert sorted(allidx.tolist()) == list(range(len(in_mask)))


def test_l1_value():
    assert float(losses.l1(ad.constant([0.2, 0.4, 0.6]), [0.1, 0.4, 0.9]).data) == pytest.approx(0.4)
    assert float(losses.l1(ad.constant([0.2, 0.4, 0.6]), [0.2, 0.4, 0.6]).data) == 0.0


def test_loss_depth_values():
    assert float(losses.loss_depth(ad.constant([1.2]), [1.5]).data) == pytest.approx(0.3)
    assert float(losses.loss_depth(ad.constant([1.2]), [1.2]).data) == 0.0


def test_loss_depth_linear_surrogate_gradient():
    # dd/db = 1 for this field, so dL/db = sign(b - d_gt).
    b = 1.2
    p = linear_field(b)
    hits = _hand_hit(p, [0.0, 0.0, b], [0.0, 0.0, 1.0])
    for gt, expected in [(1.5, -1.0), (0.9, 1.0)]:
        tape = ad.Tape()
        d = raycast.surface_depth(tape, p, hits)
        g = p.bind(tape).gradients(ad.backward(losses.loss_depth(d, [gt])))
        assert g["fc_out.b"][0] == pytest.approx(expected, abs=1e-12)


def test_bce_closed_forms():
    assert losses.bce_value(0.9, 0) == pytest.approx(-np.log(0.1))
    assert losses.bce_value(0.9, 0) == pytest.approx(2.302585, abs=1e-6)
    assert losses.bce_value(0.5, 1) == pytest.approx(np.log(2))
    assert losses.bce_value(0.0, 0) == pytest.approx(0.0, abs=2e-7)
    assert losses.bce_value(1.0, 1) == pytest.approx(0.0, abs=2e-7)
    t = ad.constant([0.9, 0.5])
    assert float(losses.bce(t, 0).data) == pytest.approx(-np.log(0.1) - np.log(0.5))


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.sampled_from([0, 1]))
def test_bce_finite_and_non_negative(p, target):
    v = losses.bce_value(p, target)
    assert np.isfinite(v) and v >= 0
    tape = ad.Tape()
    x = tape.leaf([p])
    g = ad.backward(losses.bce(x, target))[x.node]
    assert np.all(np.isfinite(g))


def test_freespace_term_monotone_in_occupancy():
    vals = [losses.bce_value(p, 0) for p in np.linspace(0.01, 0.99, 50)]
    assert np.all(np.diff(vals) > 0)


def test_freespace_and_occupancy_terms_on_constant_field():
    p = field.init_params(8, 1, rng=0)
    p.arrays["fc_out.W"][...] = 0.0
    p.arrays["fc_out.b"][0] = np.log(9.0)  # occupancy 0.9 everywhere
    tape = ad.Tape()
    pts = np.zeros((3, 3))
    assert float(losses.loss_freespace(tape, p, pts, normalizer=3).data) == pytest.approx(-np.log(0.1))
    p.arrays["fc_out.b"][0] = 0.0
    assert float(losses.loss_occupancy(ad.Tape(), p, pts).data) == pytest.approx(3 * np.log(2))


def test_freespace_points_use_hit_or_uniform_sample():
    cfg = raycast.RaySamplingConfig(n=8)
    rays = raycast.make_rays([0.0, 0.0, -2.0], np.array([[0, 0, 1.0], [0, 0.1, 0.995]]) / [[1], [np.hypot(0.1, 0.995)]], cfg)
    hits = raycast.SurfaceHits(
        np.array([True, False]), np.array([1.7, np.inf]), np.zeros((2, 3)), np.zeros(2, int), np.zeros(2),
        rays.dirs, rays.origins, np.zeros(2),
    )
    pts = losses.freespace_points(rays, hits, np.random.default_rng(0))
    np.testing.assert_allclose(pts[0], [0, 0, -0.3])
    d = np.linalg.norm(pts[1] - rays.origins[1])
    assert rays.near[1] <= d <= rays.far[1]


def test_occupancy_depth_modes():
    cfg = raycast.RaySamplingConfig(n=8)
    dirs = np.tile([0, 0, 1.0], (5, 1))
    rays = raycast.make_rays([0.0, 0.0, -2.0], dirs, cfg)
    rng = np.random.default_rng(0)
    gt = np.array([1.6, 1.7, 1.8, 1.9, 2.0])
    assert np.array_equal(losses.occupancy_depths(rays, rng, "depth", gt), gt)
    d = losses.occupancy_depths(rays, rng, "random")
    assert np.all((d >= rays.near) & (d <= rays.far))
    with pytest.raises(ValueError, match="hull"):
        losses.occupancy_depths(rays, rng, "hull")
    with pytest.raises(ValueError, match="unknown"):
        losses.occupancy_depths(rays, rng, "bogus")


def test_normal_loss_planar_is_zero():
    p = linear_field(0.3)
    rng = np.random.default_rng(0)
    surf = rng.uniform(-0.5, 0.5, (10, 3))
    loss, dropped = losses.loss_normal(ad.Tape(), p, surf, losses.random_in_ball(surf, 0.05, rng))
    assert float(loss.data) < 1e-12 and dropped == 0


def test_normal_loss_antipodal_is_two():
    # Logit 1 - |p_z|: the occupancy gradient flips sign across z = 0.
    p = linear_field(0.0)
    p.arrays["fc_in.W"][2, :2] = [1.0, -1.0]
    p.arrays["fc_in.b"][:2] = 0.0
    p.arrays["fc_out.W"][:2, 0] = -1.0
    p.arrays["fc_out.b"][0] = 1.0
    surf = np.array([[0.1, 0.2, 0.3], [0.0, 0.0, 0.1]])
    loss, _ = losses.loss_normal(ad.Tape(), p, surf, surf * [1, 1, -1])
    assert float(loss.data) == pytest.approx(4.0, abs=1e-12)


def test_normal_loss_skips_degenerate():
    p = field.init_params(8, 1, rng=0)
    p.arrays["fc_out.W"][...] = 0.0
    loss, dropped = losses.loss_normal(ad.Tape(), p, np.zeros((3, 3)), np.ones((3, 3)))
    assert dropped == 3 and float(loss.data) == 0.0


def test_normal_loss_shrinks_with_radius(sphere_field):
    cfg = raycast.RaySamplingConfig(n=64)
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(600, 3)) * 0.15 + [0, 0, 1]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    hits = raycast.depth_forward(raycast.make_rays([0.0, 0.0, -2.0], dirs, cfg), sphere_field, None, cfg)
    surf = hits.points[hits.hit]
    means = []
    for radius in (0.1, 0.03, 0.01, 0.003):
        q = losses.random_in_ball(surf, radius, np.random.default_rng(1))
        loss, _ = losses.loss_normal(ad.Tape(), sphere_field, surf, q, normalizer=len(surf))
        means.append(float(loss.data))
    assert np.all(np.diff(means) < 0)


def test_normal_loss_gradient_matches_fd():
    p = field.init_params(8, 2, rng=4, occupancy_bias=0.0)
    rng = np.random.default_rng(5)
    cand = rng.uniform(-1, 1, (100, 3))
    pts = cand[field.min_preactivation(cand, None, p) > 1e-2][:6]
    surf, q = pts[:3], pts[3:]
    tape = ad.Tape()
    loss, _ = losses.loss_normal(tape, p, surf, q)
    analytic = _grad_vector(p, tape, loss)

    def value(v):
        pp = p.with_flat(v)
        n = lambda x: field.surface_normal(x, None, pp)[0]  # noqa: E731
        return np.linalg.norm(n(surf) - n(q), axis=1).sum()

    from oracles import fd_gradient

    numeric = fd_gradient(value, p.flat(), 1e-6)
    assert np.max(rel_err(analytic, numeric, floor=1e-5)) < 1e-4


def test_loss_rgb_gradient_matches_fd():
    _, _, analytic, numeric = full_loss_check(seed=1, n_pixels=5, w_rgb=1.0, w_depth=0.0)
    assert np.mean(rel_err(analytic, numeric, floor=1e-7) < 1e-3) >= 0.99


def test_loss_rgb_splits_into_direct_and_depth_paths():
    params, rays, cfg = gradcheck.random_scene(5, n_rays=6)
    hits = raycast.depth_forward(rays, params, None, cfg)
    gt = np.random.default_rng(0).uniform(0, 1, (6, 3))
    # Full gradient through both paths.
    tape = ad.Tape()
    loss, _ = losses.loss_rgb(tape, params, hits, gt)
    full = _grad_vector(params, tape, loss)
    # Direct path only: depth frozen as a constant.
    tape = ad.Tape()
    loss, _ = losses.loss_rgb(tape, params, hits, gt, depth_tensor=ad.constant(hits.depth))
    direct = _grad_vector(params, tape, loss)
    # Depth path: dL/dd from a leaf, pushed through depth_backward.
    tape = ad.Tape()
    d = tape.leaf(hits.depth)
    loss, _ = losses.loss_rgb(tape, params, hits, gt, depth_tensor=d)
    lam = ad.backward(loss)[d.node]
    via_depth = raycast.depth_backward(lam, hits, params).grads
    via_depth = np.concatenate([via_depth[k].ravel() for k in params.names])
    assert np.abs(via_depth).max() > 0 and np.abs(direct).max() > 0
    np.testing.assert_allclose(full, direct + via_depth, rtol=1e-10, atol=1e-14)


def _synthetic_batch(seed, n=40):
    params, _, cfg = gradcheck.random_scene(seed, n_rays=5)
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n, 3)) * 0.3 + [0, 0, 1]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = raycast.make_rays([0.0, 0.0, -2.0], dirs, cfg)
    hits = raycast.depth_forward(rays, params, None, cfg)
    in_mask = hits.hit.copy()
    in_mask[: n // 4] = ~in_mask[: n // 4]
    depth = np.where(in_mask & hits.hit, hits.depth + 0.05, np.nan)
    batch = losses.PixelBatch(np.zeros(n, int), np.zeros((n, 2)), rng.uniform(0, 1, (n, 3)), in_mask, depth, rays)
    return params, batch, hits


def _total(params, batch, hits, weights, seed=0, modes=None):
    tape = ad.Tape()
    res = losses.total_loss(tape, params, batch, hits, weights, modes or losses.LossModes(), np.random.default_rng(seed))
    return res, _grad_vector(params, tape, res.total)


def test_total_with_only_rgb_equals_loss_rgb():
    params, batch, hits = _synthetic_batch(0)
    res, g = _total(params, batch, hits, losses.LossWeights(1, 0, 0, 0, 0))
    p0 = res.partition.p0
    tape = ad.Tape()
    ref, _ = losses.loss_rgb(tape, params, hits.subset(p0), batch.rgb[p0], normalizer=len(batch))
    assert float(res.total.data) == pytest.approx(float(ref.data), rel=1e-14)
    np.testing.assert_allclose(g, _grad_vector(params, tape, ref), rtol=1e-12, atol=1e-300)


def test_total_gradient_is_sum_of_terms():
    params, batch, hits = _synthetic_batch(1)
    w = losses.LossWeights(0.7, 1.3, 0.5, 2.0, 0.05)
    total, g = _total(params, batch, hits, w)
    parts = []
    for name in ("rgb", "depth", "freespace", "occupancy", "normal"):
        single = losses.LossWeights(**{k: (getattr(w, k) if k == name else 0.0) for k in ("rgb", "depth", "freespace", "occupancy", "normal")})
        res, gi = _total(params, batch, hits, single)
        assert res.terms[name] == pytest.approx(total.terms[name], rel=1e-12)
        parts.append(gi)
    np.testing.assert_allclose(g, np.sum(parts, axis=0), rtol=1e-9, atol=1e-13)
    assert all(v >= 0 for v in total.terms.values())


def test_total_with_empty_p1_p2():
    params, batch, hits = _synthetic_batch(2)
    keep = np.flatnonzero(batch.in_mask & hits.hit)
    sub = losses.PixelBatch(batch.view[keep], batch.uv[keep], batch.rgb[keep], batch.in_mask[keep], batch.depth[keep],
                            batch.rays.subset(keep))
    res, _ = _total(params, sub, hits.subset(keep), losses.LossWeights())
    assert res.partition.sizes[1:] == (0, 0)
    assert res.terms["freespace"] == 0.0 and res.terms["occupancy"] == 0.0
    expect = res.terms["rgb"] + res.terms["depth"] + 0.05 * res.terms["normal"]
    assert float(res.total.data) == pytest.approx(expect, rel=1e-12)


def test_terms_vanish_at_their_ideal():
    params, batch, hits = _synthetic_batch(3)
    p0 = np.flatnonzero(batch.in_mask & hits.hit)
    _, rgb = field.evaluate(hits.points, None, params)
    batch.rgb[p0] = rgb[p0]
    batch.depth[p0] = hits.depth[p0]
    res, _ = _total(params, batch, hits, losses.LossWeights(1, 1, 0, 0, 0))
    assert res.terms["rgb"] == pytest.approx(0.0, abs=1e-15) and res.terms["depth"] == 0.0


def test_hull_mode_requires_hull():
    params, batch, hits = _synthetic_batch(0)
    batch.in_mask[:] = True
    batch.depth[:] = np.nan
    with pytest.raises(ValueError, match="hull"):
        _total(params, batch, hits, losses.LossWeights(0, 0, 0, 1, 0), modes=losses.LossModes(occupancy="hull"))


def test_pixel_batch_rejects_depth_outside_mask():
    rays = raycast.make_rays([0, 0, -2.0], np.array([[0, 0, 1.0]]), raycast.RaySamplingConfig())
    with pytest.raises(ValueError, match="mask"):
        losses.PixelBatch(np.zeros(1, int), np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1, bool), np.ones(1), rays)


def test_weights_validation():
    with pytest.raises(ValueError):
        losses.LossWeights(rgb=-1.0)
    assert losses.LossWeights(0, 0, 0, 0, 0).all_zero()
