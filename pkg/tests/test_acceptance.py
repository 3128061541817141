"""End-to-end acceptance criteria.

Each test prints one ``[PASS]``/``[FAIL]`` line (also repeated in the
terminal summary).  The reconstruction fits run once per session and take
tens of minutes on a single core.
"""

import time

import numpy as np
import pytest

from dvrkit import gradcheck, mesh, raycast, scene, trainer

from oracles import full_loss_check, monotone_crossing, rel_err

# Desk-scale fit settings shared by every reconstruction run.
FIT = dict(width=64, pixels_per_view=256, views_per_batch=4, lr=5e-4,
           n_schedule=[[0, 16], [200, 32], [600, 64]], occupancy_mode="hull", log_every=100)
SPHERE_ITERS = 1500
TORUS_ITERS = 2000
EXTRACT_RES = 128
EVAL_SAMPLES = 100_000
FIT_HULL_RES = trainer.TrainConfig().hull_resolution


def fit_config(**kw):
    return trainer.TrainConfig(**{**FIT, **kw})


@pytest.fixture(scope="session")
def sphere_scene():
    return scene.make_scene("sphere")


@pytest.fixture(scope="session")
def torus_scene():
    return scene.make_scene("torus")


@pytest.fixture(scope="session")
def sphere_data(sphere_scene):
    return scene.generate_dataset(sphere_scene, views=24, resolution=128, seed=0)


@pytest.fixture(scope="session")
def torus_data(torus_scene):
    return scene.generate_dataset(torus_scene, views=24, resolution=128, seed=0)


def timed_fit(dataset, config):
    t0 = time.time()
    state = trainer.fit(dataset, config)
    return state, time.time() - t0


def chamfer(params, sc, res=EXTRACT_RES):
    m = mesh.extract_mesh(params, None, res)
    return m, mesh.evaluate_mesh(m, sc.surface_samples(EVAL_SAMPLES, 1), count=EVAL_SAMPLES)


def render_views(params, dataset, n=64):
    cfg = raycast.RaySamplingConfig(n=n)
    return [raycast.render(v.camera, params, None, cfg) for v in dataset.views]


@pytest.fixture(scope="session")
def sphere_rgb_fit(sphere_data):
    return timed_fit(sphere_data, fit_config(iterations=SPHERE_ITERS))


@pytest.fixture(scope="session")
def torus_hull(torus_data, torus_scene):
    hull = scene.visual_hull([v.mask for v in torus_data.views], torus_data.cameras, FIT_HULL_RES)
    m = hull.mesh()
    return m, mesh.evaluate_mesh(m, torus_scene.surface_samples(EVAL_SAMPLES, 1), count=EVAL_SAMPLES)


# --- gradients and numerics -----------------------------------------------


def test_depth_gradient_matches_finite_differences(acceptance_report):
    lines = []
    ok = True
    for seed in range(3):
        t0 = time.time()
        res = gradcheck.check_depth_gradient(seed)
        dt = time.time() - t0
        frac = res.fraction_below(1e-3)
        ok &= frac >= 0.99 and dt < 60
        lines.append(f"seed {seed}: {100 * frac:.1f}% < 1e-3 (max {res.max_rel_err:.1e}), {dt:.1f}s")
    assert acceptance_report("gradient check (depth, width 16, 5 rays)", ok, "; ".join(lines))


def test_full_loss_gradient(acceptance_report):
    total, value, analytic, numeric = full_loss_check(seed=0, n_pixels=8, w_rgb=1.0, w_depth=1.0)
    err = rel_err(analytic, numeric, floor=1e-7)
    frac = float(np.mean(err < 1e-3))
    ok = frac >= 0.99 and abs(total - value) < 1e-12
    assert acceptance_report("full-loss gradient (rgb + depth, 8 pixels)", ok,
                             f"{100 * frac:.1f}% of {err.size} coordinates < 1e-3, max {err.max():.1e}")


def test_tape_size_independent_of_n(sphere_rgb_fit, sphere_data, acceptance_report):
    # Start from the fitted sphere so every pixel set and loss term is active.
    counts, sizes = [], []
    hull = scene.visual_hull([v.mask for v in sphere_data.views], sphere_data.cameras, FIT_HULL_RES)
    for n in (16, 512):
        cfg = fit_config(n_schedule=[[0, n]])
        state = trainer.init_state(cfg)
        state.params = sphere_rgb_fit[0].params.copy()
        rep = trainer.train_step(state, sphere_data, cfg, hull)
        counts.append(rep.tape_nodes)
        sizes.append(rep.sizes)
    assert sizes[0][0] > 0 and sizes[0][1] > 0
    assert [k > 0 for k in sizes[0]] == [k > 0 for k in sizes[1]]
    assert acceptance_report("tape nodes per iteration, n=16 vs n=512", counts[0] == counts[1],
                             f"{counts[0]} vs {counts[1]} nodes (partition sizes {sizes[0]} / {sizes[1]})")


def test_secant_accuracy(acceptance_report):
    passed = 0
    for seed in range(1000):
        f, lo, hi, _ = monotone_crossing(seed)
        d, res = raycast.secant_refine(f, lo, hi, 0.5, 8, 1e-5)
        passed += abs(f(d) - 0.5) < 1e-5 and lo <= d <= hi
    assert acceptance_report("secant refinement, 1000 crossings, 8 iterations", passed == 1000,
                             f"{passed}/1000 within 1e-5 and inside the bracket")


# --- reconstruction -------------------------------------------------------


def test_sphere_rgb_fit(sphere_rgb_fit, sphere_data, sphere_scene, acceptance_report):
    state, dt = sphere_rgb_fit
    m, ev = chamfer(state.params, sphere_scene)
    renders = render_views(state.params, sphere_data)
    per_pixel = []
    for r, v in zip(renders, sphere_data.views):
        union = r.mask | v.mask
        per_pixel.append(np.abs(r.image - v.image).sum(axis=-1)[union])
    l1 = float(np.concatenate(per_pixel).mean())
    tight = m.is_watertight()
    ok = ev.chamfer_l1 < 0.02 and l1 < 0.05 and tight and state.iteration <= 5000
    assert acceptance_report(
        "sphere fit, RGB + mask", ok,
        f"chamfer {ev.chamfer_l1:.4f} (< 0.02), re-render l1 {l1:.4f} (< 0.05), watertight {tight}, "
        f"{state.iteration} iterations in {dt / 60:.1f} min",
    )


def test_depth_supervision_non_inferior(sphere_rgb_fit, sphere_data, sphere_scene, acceptance_report):
    depth_state, dt = timed_fit(sphere_data, fit_config(iterations=SPHERE_ITERS, w_depth=1.0))
    _, ev_rgb = chamfer(sphere_rgb_fit[0].params, sphere_scene)
    _, ev_depth = chamfer(depth_state.params, sphere_scene)
    ok = ev_depth.chamfer_l1 <= 1.05 * ev_rgb.chamfer_l1
    assert acceptance_report("depth supervision non-inferior (sphere)", ok,
                             f"rgb+depth {ev_depth.chamfer_l1:.4f} vs rgb {ev_rgb.chamfer_l1:.4f} "
                             f"(limit {1.05 * ev_rgb.chamfer_l1:.4f}), {SPHERE_ITERS} iterations each")


def test_texture_beats_visual_hull(torus_data, torus_scene, torus_hull, acceptance_report):
    state, dt = timed_fit(torus_data, fit_config(iterations=TORUS_ITERS))
    _, ev = chamfer(state.params, torus_scene)
    hull_c = torus_hull[1].chamfer_l1
    margin = 1.0 - ev.chamfer_l1 / hull_c
    assert acceptance_report("torus: RGB fit beats visual hull by >= 20%", margin >= 0.2,
                             f"fit {ev.chamfer_l1:.4f} vs hull {hull_c:.4f}, margin {100 * margin:.1f}% "
                             f"({dt / 60:.1f} min)")


def test_mask_only_matches_visual_hull(torus_data, torus_scene, torus_hull, acceptance_report):
    state, dt = timed_fit(torus_data, fit_config(iterations=TORUS_ITERS, w_rgb=0.0))
    _, ev = chamfer(state.params, torus_scene)
    inter = union = 0
    for r, v in zip(render_views(state.params, torus_data), torus_data.views):
        inter += np.count_nonzero(r.mask & v.mask)
        union += np.count_nonzero(r.mask | v.mask)
    iou = inter / union
    hull_c = torus_hull[1].chamfer_l1
    gap = abs(ev.chamfer_l1 - hull_c) / hull_c
    assert acceptance_report("torus: mask-only fit reproduces the hull", iou > 0.95 and gap <= 0.10,
                             f"mask IoU {iou:.4f} (> 0.95), chamfer {ev.chamfer_l1:.4f} vs hull {hull_c:.4f} "
                             f"({100 * gap:.1f}% apart, limit 10%)")


def test_fit_is_deterministic(sphere_data, tmp_path, acceptance_report):
    cfg = fit_config(iterations=100, checkpoint_every=100)
    for run in ("a", "b"):
        trainer.fit(sphere_data, cfg, tmp_path / run)
    a = (tmp_path / "a" / "ckpt_0000100.bin").read_bytes()
    b = (tmp_path / "b" / "ckpt_0000100.bin").read_bytes()
    assert acceptance_report("determinism at iteration 100", a == b,
                             f"checkpoints {'bit-identical' if a == b else 'differ'} ({len(a)} bytes)")
