"""Command-line entry point: ``dvrkit <command> [flags]``.

Exit codes: 0 success, 1 invalid input, 2 failure while running.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import gradcheck, mesh, scene, trainer
from .camera import CameraError, load_cameras
from .field import FieldError
from .raycast import RaySamplingConfig, render

log = logging.getLogger("dvrkit")

INPUT_ERRORS = (CameraError, FieldError, mesh.MeshError, scene.SceneError, trainer.TrainError, OSError, ValueError,
                TypeError)


class InputError(Exception):
    """Bad flags or unreadable inputs (exit 1)."""


class RunError(Exception):
    """Failure after the inputs were accepted (exit 2)."""


def _load(what: str, fn, *args):
    try:
        return fn(*args)
    except INPUT_ERRORS as exc:
        raise InputError(f"{what}: {exc}") from None


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


# --- commands -------------------------------------------------------------


def cmd_generate_scene(args) -> int:
    sc = _load("--scene", scene.make_scene, args.scene)
    ds = scene.generate_dataset(sc, views=args.views, resolution=args.res, seed=args.seed)
    try:
        scene.save_dataset(args.out, ds)
    except OSError as exc:
        raise RunError(f"--out {args.out}: {exc}") from None
    print(f"wrote {len(ds)} views to {args.out}")
    return 0


def cmd_fit(args) -> int:
    dataset = _load(f"--data {args.data}", scene.load_dataset, args.data)
    config = _load(f"--config {args.config}", trainer.TrainConfig.load, args.config) if args.config else trainer.TrainConfig()
    state = _load(f"--resume {args.resume}", trainer.load_checkpoint, args.resume) if args.resume else None
    out = Path(args.out)
    manifest = out / "manifest.json"
    artifacts = {"data": args.data, "config": args.config or "<defaults>", "out": out,
                 "final": out / "final.bin", "log": out / "metrics.log"}
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(config.dumps())
        trainer.write_manifest(manifest, config, artifacts)
    except OSError as exc:
        raise RunError(f"--out {out}: {exc}") from None
    t0 = time.time()
    try:
        state = trainer.fit(dataset, config, out, state)
    except trainer.TrainError as exc:
        raise RunError(str(exc)) from None
    trainer.write_manifest(manifest, config, artifacts, {"fit_seconds": round(time.time() - t0, 3)})
    print(f"iterations={state.iteration} skipped={state.skipped} checkpoint={out / 'final.bin'}")
    return 0


def _save_rendering(out: Path, index: int, r) -> None:
    Image.fromarray(scene.to_u8(r.image)).save(out / f"render_{index:04d}.png")
    Image.fromarray(np.where(r.mask, 255, 0).astype(np.uint8)).save(out / f"mask_{index:04d}.png")
    scene.save_depth(out / f"depth_{index:04d}.bin", r.depth)


def cmd_render(args) -> int:
    params, z = _load(f"--ckpt {args.ckpt}", trainer.load_field, args.ckpt)
    cams = _load(f"--camera {args.camera}", load_cameras, args.camera)
    if not cams:
        raise InputError(f"--camera {args.camera}: no cameras in file")
    cfg = RaySamplingConfig(n=args.samples)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i, cam in enumerate(cams):
            _save_rendering(out, i, render(cam, params, z, cfg))
    except OSError as exc:
        raise RunError(f"--out {out}: {exc}") from None
    print(f"rendered {len(cams)} views to {out}")
    return 0


def cmd_extract_mesh(args) -> int:
    params, z = _load(f"--ckpt {args.ckpt}", trainer.load_field, args.ckpt)
    if Path(args.out).suffix.lower() not in (".obj", ".ply"):
        raise InputError(f"--out {args.out}: unsupported mesh extension (use .obj or .ply)")
    if args.res < 2:
        raise InputError(f"--res {args.res}: grid resolution must be >= 2")
    m = mesh.extract_mesh(params, z, args.res, args.tau)
    try:
        mesh.save_mesh(args.out, m)
    except OSError as exc:
        raise RunError(f"--out {args.out}: {exc}") from None
    print(f"vertices={len(m.vertices)} faces={len(m.faces)} watertight={m.is_watertight()}")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradcheck.check_depth_gradient(args.seed)
    print(f"max_rel_err={result.max_rel_err:.3e} fraction_below_1e-3={result.fraction_below(1e-3):.4f}")
    return 0 if result.max_rel_err < 1e-3 else 2


def cmd_eval(args) -> int:
    m = _load(f"--mesh {args.mesh}", mesh.load_mesh, args.mesh)
    sc = _load("--scene", scene.make_scene, args.scene)
    if m.is_empty:
        raise InputError(f"--mesh {args.mesh}: mesh has no faces")
    ref = sc.surface_samples(args.samples, 0)
    print(mesh.evaluate_mesh(m, ref, count=args.samples))
    return 0


# --- parser ---------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # One-line diagnostics and exit 1 for bad flags (argparse would print the
    # full usage block and exit 2).
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message} (see --help)\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dvrkit", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_positive, default=None, help="BLAS threads (default: all cores)")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("generate-scene", help="render a synthetic multi-view dataset")
    s.add_argument("--scene", required=True, help=f"one of {sorted(scene.SCENES)}")
    s.add_argument("--views", type=_positive, default=24)
    s.add_argument("--res", type=_positive, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate_scene)

    s = sub.add_parser("fit", help="train a field on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key = value config file (default: built-in defaults)")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("render", help="render a checkpoint from the cameras in a camera file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=_positive, default=128, help="ray samples n")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("extract-mesh", help="marching cubes on the occupancy field")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--res", type=int, default=128)
    s.add_argument("--tau", type=float, default=0.5)
    s.add_argument("--out", required=True, help=".obj or .ply")
    s.set_defaults(func=cmd_extract_mesh)

    s = sub.add_parser("gradcheck", help="depth gradient vs finite differences")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("eval", help="Chamfer-L1 of a mesh against an analytic scene")
    s.add_argument("--mesh", required=True)
    s.add_argument("--scene", required=True)
    s.add_argument("--samples", type=_positive, default=100_000)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except InputError as exc:
        print(f"dvrkit {args.command}: {exc}", file=sys.stderr)
        return 1
    except RunError as exc:
        print(f"dvrkit {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line diagnostic contract
        print(f"dvrkit {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
