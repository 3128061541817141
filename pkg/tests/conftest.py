import numpy as np
import pytest

from dvrkit import autodiff as ad
from dvrkit import field, trainer


def fit_sphere_field(radius=0.5, width=64, n_blocks=5, steps=2000, batch=1024, sharpness=10.0, seed=0):
    """Regress the occupancy head onto sigmoid(k (r - |p|)).

    This gives a network whose 0.5 level set is close to an analytic sphere,
    independent of the rendering pipeline under test.
    """
    rng = np.random.default_rng(seed)
    params = field.init_params(width, n_blocks, rng=seed, occupancy_bias=0.0)
    state = trainer.AdamState.zeros_like(params.arrays)
    for it in range(steps):
        d = rng.normal(size=(batch, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        r = np.concatenate([rng.uniform(0, 1, batch // 2) ** (1 / 3), radius + rng.normal(0, 0.05, batch - batch // 2)])
        pts = d * np.abs(r)[:, None]
        target = 1.0 / (1.0 + np.exp(-sharpness * (radius - np.linalg.norm(pts, axis=1))))
        tape = ad.Tape()
        bound = params.bind(tape)
        occ, _ = field.field_forward(pts, None, params, tape, bound=bound)
        diff = ad.sub(occ, ad.constant(target))
        loss = ad.scale(ad.sum(ad.mul(diff, diff)), 1.0 / batch)
        grads = bound.gradients(ad.backward(loss))
        trainer.adam_step(params.arrays, grads, state, 3e-3 if it < 0.7 * steps else 5e-4)
    return params


@pytest.fixture(scope="session")
def sphere_field():
    return fit_sphere_field()


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    def report(name: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
