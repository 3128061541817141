"""Reconstruct a textured sphere from 24 posed images and masks.

This is a small version of the sphere acceptance run: a 64-wide network,
fewer iterations and lower resolution, so it finishes in a few minutes on
one core. Pass a larger iteration count to get closer to the full run.

    python demos/02_fit_sphere.py [iterations] [out_dir]
"""

import sys
import time
from pathlib import Path

from dvrkit import mesh, raycast, scene, trainer

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 600
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_sphere")

sphere = scene.make_scene("sphere")
data = scene.generate_dataset(sphere, views=24, resolution=64, seed=0)
scene.save_dataset(out / "data", data)

config = trainer.TrainConfig(width=64, pixels_per_view=256, views_per_batch=4, lr=5e-4, iterations=iterations,
                             n_schedule=[[0, 16], [200, 32], [400, 64]], occupancy_mode="hull", log_every=100)
t0 = time.time()


def progress(rep, state):
    if rep.iteration % 100 == 0:
        print(trainer.format_metrics(rep, state.skipped), f"({time.time() - t0:.0f}s)")


state = trainer.fit(data, config, out / "run", callback=progress)

m = mesh.extract_mesh(state.params, None, 96)
mesh.save_mesh(out / "sphere.ply", m)
report = mesh.evaluate_mesh(m, sphere.surface_samples(50_000, 1), count=50_000)
print("mesh:", len(m.vertices), "vertices, watertight:", m.is_watertight())
print(report)

# One re-rendered view next to the input.
r = raycast.render(data.cameras[0], state.params, None, raycast.RaySamplingConfig(n=64))
union = r.mask | data.views[0].mask
err = abs(r.image - data.views[0].image).sum(axis=-1)[union].mean()
print(f"view 0 re-render l1 over the object: {err:.4f}")
