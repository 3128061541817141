"""Torus: photometric fit versus the visual hull from the same masks.

The visual hull keeps only what projects inside every mask. A torus has
no pits hidden from all silhouettes, so with enough views its hull is
already close to the true surface and the remaining error is grid and
view sparsity. This script fits the torus twice, once with RGB and masks
and once with masks only, and compares both meshes and the hull with the
analytic surface.

    python demos/03_torus_vs_hull.py [iterations]
"""

import sys

from dvrkit import mesh, scene, trainer

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 800

torus = scene.make_scene("torus")
data = scene.generate_dataset(torus, views=24, resolution=96, seed=0)
reference = torus.surface_samples(50_000, 1)

hull = scene.visual_hull([v.mask for v in data.views], data.cameras, 64)
print("visual hull      ", mesh.evaluate_mesh(hull.mesh(), reference, count=50_000))

base = dict(width=64, pixels_per_view=256, views_per_batch=4, lr=5e-4, iterations=iterations,
            n_schedule=[[0, 16], [200, 32], [600, 64]], occupancy_mode="hull", log_every=0)
for label, extra in (("rgb + masks      ", {}), ("masks only       ", {"w_rgb": 0.0})):
    state = trainer.fit(data, trainer.TrainConfig(**base, **extra))
    m = mesh.extract_mesh(state.params, None, 96)
    print(label, mesh.evaluate_mesh(m, reference, count=50_000), "watertight", m.is_watertight())
