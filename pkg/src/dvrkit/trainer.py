"""Optimisation loop: pixel sampling, schedules, Adam, checkpoints, metrics.

Randomness is derived per iteration from ``(seed, iteration)``, so a run
resumed from a checkpoint draws exactly the samples the uninterrupted run
would have drawn.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .camera import pixel_directions
from .field import FieldParams, init_params, read_params, write_params
from .losses import LossModes, LossWeights, PixelBatch, total_loss
from .raycast import RaySamplingConfig, depth_forward, make_rays
from .scene import MultiViewDataset, visual_hull

log = logging.getLogger(__name__)

_ADAM_HEADER = struct.Struct("<4sQQI")


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    pixels_per_view: int = 1024
    views_per_batch: int = 4
    tau: float = 0.5
    n_schedule: list = field(default_factory=lambda: [[0, 16], [500, 32], [1500, 64], [2500, 128]])
    lr_schedule: list | None = None
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 3000
    seed: int = 0
    width: int = 128
    n_blocks: int = 5
    latent_dim: int = 0
    occupancy_bias: float = 0.5
    roi_radius: float = 1.0
    secant_iters: int = 8
    w_rgb: float = 1.0
    w_depth: float = 0.0
    w_freespace: float = 1.0
    w_occupancy: float = 1.0
    w_normal: float = 0.05
    features: str = "rgb"
    occupancy_mode: str = "random"
    normal_radius: float = 0.01
    hull_resolution: int = 64
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self):
        if self.pixels_per_view < 1 or self.views_per_batch < 1:
            raise TrainError("pixels_per_view and views_per_batch must be >= 1")
        for name in ("n_schedule", "lr_schedule"):
            sched = getattr(self, name)
            if sched is None:
                continue
            its = [int(s[0]) for s in sched]
            if any(b <= a for a, b in zip(its, its[1:])):
                raise TrainError(f"{name} iterations must be strictly increasing")
        LossWeights(*self.weight_tuple())

    def weight_tuple(self):
        return (self.w_rgb, self.w_depth, self.w_freespace, self.w_occupancy, self.w_normal)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(*self.weight_tuple())

    @property
    def modes(self) -> LossModes:
        return LossModes(self.features, self.occupancy_mode, self.normal_radius)

    def schedule_lr(self) -> list:
        # Default: decay by 5 at 60% and 80% of training.
        if self.lr_schedule is not None:
            return self.lr_schedule
        return [[0, self.lr], [int(0.6 * self.iterations), self.lr / 5], [int(0.8 * self.iterations), self.lr / 25]]

    def n_at(self, iteration: int) -> int:
        return int(_lookup(self.n_schedule, iteration))

    def lr_at(self, iteration: int) -> float:
        return float(_lookup(self.schedule_lr(), iteration))

    def ray_config(self, iteration: int) -> RaySamplingConfig:
        return RaySamplingConfig(n=self.n_at(iteration), tau=self.tau, secant_iters=self.secant_iters,
                                 roi_radius=self.roi_radius)

    # Key = value text format; values are JSON.
    def dumps(self) -> str:
        return "\n".join(f"{k} = {json.dumps(v)}" for k, v in asdict(self).items()) + "\n"

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise TrainError(f"{source}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise TrainError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                kw[key] = json.loads(value)
            except json.JSONDecodeError:
                kw[key] = value
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.loads(Path(path).read_text(), str(path))


def _lookup(schedule, iteration):
    value = schedule[0][1]
    for it, v in schedule:
        if iteration >= it:
            value = v
    return value


# --- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """In-place Adam update with bias correction.

    Returns False (and leaves everything untouched) when any gradient is
    non-finite.
    """
    for k, g in grads.items():
        if g.shape != arrays[k].shape:
            raise TrainError(f"gradient shape {g.shape} for {k} does not match {arrays[k].shape}")
        if not np.all(np.isfinite(g)):
            return False
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for k, g in grads.items():
        m = state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        arrays[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


# --- sampling ---------------------------------------------------------------


def iteration_rng(seed: int, iteration: int, worker: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, worker], dtype=np.uint64), counter=iteration))


def sample_pixels(view, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Uniform integer pixels with replacement; returns (ij, pixel-centre uv)."""
    h, w = view.mask.shape
    i = rng.integers(0, w, count)
    j = rng.integers(0, h, count)
    return np.stack([i, j], axis=1), np.stack([i + 0.5, j + 0.5], axis=1).astype(np.float64)


def build_batch(dataset: MultiViewDataset, view_ids, count: int, rng, cfg: RaySamplingConfig,
                neighbours: bool = False):
    parts = []
    extra = {"uv_x": [], "uv_y": [], "rgb_x": [], "rgb_y": [], "view": []}
    for vid in view_ids:
        view = dataset.views[vid]
        ij, uv = sample_pixels(view, count, rng)
        if neighbours:
            h, w = view.mask.shape
            ij = np.minimum(ij, [w - 2, h - 2])
            uv = ij + 0.5
        dirs = pixel_directions(view.camera, uv)
        rgb = view.image[ij[:, 1], ij[:, 0]]
        in_mask = view.mask[ij[:, 1], ij[:, 0]]
        depth = np.full(count, np.nan)
        if view.depth is not None:
            d = view.depth[ij[:, 1], ij[:, 0]]
            depth = np.where(np.isfinite(d), d, np.nan)
        parts.append((np.full(count, vid), uv, rgb, in_mask, depth, view.camera.center, dirs))
        if neighbours:
            extra["rgb_x"].append(view.image[ij[:, 1], ij[:, 0] + 1])
            extra["rgb_y"].append(view.image[ij[:, 1] + 1, ij[:, 0]])
            extra["uv_x"].append(pixel_directions(view.camera, uv + [1.0, 0.0]))
            extra["uv_y"].append(pixel_directions(view.camera, uv + [0.0, 1.0]))
            extra["view"].append(np.broadcast_to(view.camera.center, (count, 3)))
    cat = lambda i: np.concatenate([p[i] for p in parts])  # noqa: E731
    origins = np.concatenate([np.broadcast_to(p[5], (count, 3)) for p in parts])
    rays = make_rays(origins, cat(6), cfg)
    batch = PixelBatch(cat(0), cat(1), cat(2), cat(3), cat(4), rays)
    if not neighbours:
        return batch, None
    o = np.concatenate(extra["view"])
    return batch, {
        "rays_x": make_rays(o, np.concatenate(extra["uv_x"]), cfg),
        "rays_y": make_rays(o, np.concatenate(extra["uv_y"]), cfg),
        "rgb_x": np.concatenate(extra["rgb_x"]),
        "rgb_y": np.concatenate(extra["rgb_y"]),
    }


# --- training state ---------------------------------------------------------


@dataclass
class TrainState:
    params: FieldParams
    adam: AdamState
    iteration: int = 0
    latent: np.ndarray | None = None
    skipped: int = 0

    def optimised(self) -> dict[str, np.ndarray]:
        arrays = dict(self.params.arrays)
        if self.latent is not None and self.latent.size:
            arrays["latent"] = self.latent
        return arrays


def init_state(config: TrainConfig) -> TrainState:
    params = init_params(config.width, config.n_blocks, config.latent_dim, rng=config.seed,
                         occupancy_bias=config.occupancy_bias)
    latent = np.zeros(config.latent_dim) if config.latent_dim else None
    state = TrainState(params, AdamState({}, {}), 0, latent)
    state.adam = AdamState.zeros_like(state.optimised())
    return state


def save_checkpoint(path, state: TrainState) -> None:
    """Field checkpoint followed by the optimiser section.

    After the field record: header ``<4sQQI`` = (b"ADAM", adam step,
    iteration, skipped count), the latent code (``latent_dim`` float64, may be
    empty), then first moments and second moments in parameter declaration
    order with the latent last, all little-endian float64.
    """
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        write_params(fh, state.params)
        fh.write(_ADAM_HEADER.pack(b"ADAM", state.adam.step, state.iteration, state.skipped))
        if state.latent is not None:
            fh.write(np.ascontiguousarray(state.latent, "<f8").tobytes())
        for moments in (state.adam.m, state.adam.v):
            for k in state.optimised():
                fh.write(np.ascontiguousarray(moments[k], "<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    with open(path, "rb") as fh:
        params = read_params(fh, str(path))
        raw = fh.read(_ADAM_HEADER.size)
        if len(raw) != _ADAM_HEADER.size:
            raise TrainError(f"{path}: no optimiser section (plain field checkpoint?)")
        magic, step, iteration, skipped = _ADAM_HEADER.unpack(raw)
        if magic != b"ADAM":
            raise TrainError(f"{path}: bad optimiser magic {magic!r}")
        latent = None
        if params.latent_dim:
            latent = np.frombuffer(fh.read(8 * params.latent_dim), "<f8").astype(np.float64)
        state = TrainState(params, AdamState({}, {}, step), iteration, latent, skipped)
        shapes = {k: a.shape for k, a in state.optimised().items()}
        for moments in (state.adam.m, state.adam.v):
            for k, shape in shapes.items():
                n = int(np.prod(shape))
                buf = fh.read(8 * n)
                if len(buf) != 8 * n:
                    raise TrainError(f"{path}: truncated optimiser moments for {k}")
                moments[k] = np.frombuffer(buf, "<f8").astype(np.float64).reshape(shape)
    return state


def load_field(path) -> tuple[FieldParams, np.ndarray | None]:
    """Weights (and latent code, if any) from a field or training checkpoint."""
    path = Path(path)
    with open(path, "rb") as fh:
        params = read_params(fh, str(path))
        raw = fh.read(_ADAM_HEADER.size)
        latent = None
        if len(raw) == _ADAM_HEADER.size and params.latent_dim:
            latent = np.frombuffer(fh.read(8 * params.latent_dim), "<f8").astype(np.float64)
    return params, latent


# --- the loop ---------------------------------------------------------------


@dataclass
class StepReport:
    iteration: int
    terms: dict[str, float]
    sizes: tuple[int, int, int]
    n: int
    lr: float
    excluded: int
    tape_nodes: int
    applied: bool


def train_step(state: TrainState, dataset: MultiViewDataset, config: TrainConfig, hull=None) -> StepReport:
    it = state.iteration
    rng = iteration_rng(config.seed, it)
    cfg = config.ray_config(it)
    nviews = min(config.views_per_batch, len(dataset))
    view_ids = rng.choice(len(dataset), nviews, replace=False)
    use_grad = config.features == "rgb+grad" and config.w_rgb > 0
    batch, extra = build_batch(dataset, view_ids, config.pixels_per_view, rng, cfg, neighbours=use_grad)
    params = state.params
    z_val = state.latent
    hits = depth_forward(batch.rays, params, z_val, cfg)
    neighbours = None
    if use_grad:
        neighbours = {
            "hits_x": depth_forward(extra["rays_x"], params, z_val, cfg),
            "hits_y": depth_forward(extra["rays_y"], params, z_val, cfg),
            "rgb_x": extra["rgb_x"],
            "rgb_y": extra["rgb_y"],
        }
    tape = ad.Tape()
    bound = params.bind(tape)
    z = tape.leaf(z_val) if z_val is not None and z_val.size else None
    result = total_loss(tape, params, batch, hits, config.weights, config.modes, rng, z, hull, neighbours)
    applied = False
    if not config.weights.all_zero():
        leaf = ad.backward(result.total)
        grads = bound.gradients(leaf)
        if z is not None:
            grads["latent"] = leaf[z.node]
        applied = adam_step(state.optimised(), grads, state.adam, config.lr_at(it),
                            config.adam_beta1, config.adam_beta2, config.adam_eps)
        if not applied:
            state.skipped += 1
            log.warning("iteration %d: non-finite gradient, update skipped", it)
    state.iteration += 1
    return StepReport(it, result.terms, result.partition.sizes, cfg.n, config.lr_at(it),
                      result.diagnostics.get("excluded", 0), tape.total_nodes, applied)


def format_metrics(rep: StepReport, skipped: int) -> str:
    t = rep.terms
    return (
        f"iter={rep.iteration} rgb={t['rgb']:.6f} depth={t['depth']:.6f} freespace={t['freespace']:.6f} "
        f"occupancy={t['occupancy']:.6f} normal={t['normal']:.6f} P0={rep.sizes[0]} P1={rep.sizes[1]} "
        f"P2={rep.sizes[2]} n={rep.n} lr={rep.lr:.3g} excluded={rep.excluded} skipped={skipped}"
    )


def fit(dataset: MultiViewDataset, config: TrainConfig, out_dir=None, state: TrainState | None = None,
        until: int | None = None, callback=None) -> TrainState:
    """Run (or resume) training up to ``until`` (default ``config.iterations``).

    With ``out_dir`` set, writes ``metrics.log`` (appended), periodic
    ``ckpt_#######.bin`` checkpoints and ``final.bin``.
    """
    if len(dataset) == 0:
        raise TrainError("dataset is empty")
    state = state or init_state(config)
    until = config.iterations if until is None else until
    hull = None
    if config.occupancy_mode == "hull":
        hull = visual_hull([v.mask for v in dataset.views], dataset.cameras, config.hull_resolution,
                           (-config.roi_radius, config.roi_radius))
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            logf = open(out / "metrics.log", "a")
        except OSError as exc:
            raise TrainError(f"cannot write to {out}: {exc}") from None
    try:
        while state.iteration < until:
            rep = train_step(state, dataset, config, hull)
            if callback is not None:
                callback(rep, state)
            if config.log_every and (rep.iteration % config.log_every == 0 or state.iteration == until):
                line = format_metrics(rep, state.skipped)
                log.info(line)
                if logf is not None:
                    logf.write(line + "\n")
                    logf.flush()
            if out is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
                _checkpoint(out / f"ckpt_{state.iteration:07d}.bin", state)
        if out is not None:
            _checkpoint(out / "final.bin", state)
    finally:
        if logf is not None:
            logf.close()
    return state


def _checkpoint(path, state):
    try:
        save_checkpoint(path, state)
    except OSError as exc:
        raise TrainError(f"checkpoint write failed for {path}: {exc}") from None


def write_manifest(path, config: TrainConfig, artifacts: dict, timings: dict | None = None) -> None:
    import platform

    import scipy

    from . import __version__

    manifest = {
        "config": asdict(config),
        "seed": config.seed,
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "versions": {"dvrkit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "timings": timings or {},
        "written": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n")
