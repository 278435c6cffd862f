"""``lumos`` command line: gen-scene, degrade, render, fit, eval, voxel-stats.

Exit codes: 0 success, 1 usage or invalid input, 2 I/O failure, 3 numerical failure.
Every successful or failed run that has an output location gets a JSON run
manifest next to (file outputs) or inside (directory outputs) that location.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (ImageFormatError, PlyFormatError, TensorFormatError, cameras_read, cameras_write,
                   image_load, image_save, ply_read, ply_write, quantize8, tensor_read, tensor_write)
from .degrade import DegradeConfig, Mode, degrade, sample_params
from .features import ExtractorSpec
from .fit import GROUPS, FitConfig, fit_scene
from .geometry import PointMap
from .losses import LumosWeights, ObjectiveWeights
from .metrics import evaluate
from .pipeline import jitter_scene, reset_colors
from .renderer import RenderOptions, render
from .synth import gen_scene, teacher_point_map
from .voxelfeat import voxel_stats, voxelize

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "manifest.json"
_FORMAT_ERRORS = (TensorFormatError, ImageFormatError, PlyFormatError, json.JSONDecodeError)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_time: float = 0.0
    exit_code: int = EXIT_OK
    error: str | None = None

    def write(self, path: Path) -> None:
        write_json_atomic(asdict(self), path)


def write_json_atomic(obj, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            json.dump(obj, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for q in list_images(p):
                out[str(q)] = sha256(q)
        elif p.is_file():
            out[str(p)] = sha256(p)
    return out


def list_images(d) -> list[Path]:
    d = Path(d)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(d.glob("*.png"))


def load_images(d) -> tuple[list[Path], list[np.ndarray]]:
    paths = list_images(d)
    if not paths:
        raise FileNotFoundError(f"no PNG images in {d}")
    return paths, [image_load(p) for p in paths]


def _floats(text: str, n: int, what: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}")
    return vals


def _render_opts(args, **kw) -> RenderOptions:
    return RenderOptions(precision="float64" if args.f64 else "float32", **kw)


def _check_finite(arr, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")


def write_renders(outs, out_dir: Path) -> list[str]:
    """``view_XXX.png`` (rgb) plus ``depth/view_XXX.lumt`` and ``alpha/view_XXX.png``."""
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    (out_dir / "alpha").mkdir(parents=True, exist_ok=True)
    written = []
    for i, o in enumerate(outs):
        _check_finite(o.rgb, f"render of view {i}")
        name = f"view_{i:03d}"
        paths = (out_dir / f"{name}.png", out_dir / "depth" / f"{name}.lumt", out_dir / "alpha" / f"{name}.png")
        image_save(o.rgb, paths[0])
        tensor_write(o.depth, paths[1])
        Image.fromarray(quantize8(o.alpha), mode="L").save(paths[2], format="PNG")
        written += [str(p) for p in paths]
    return written


# ---------------------------------------------------------------------------
# subcommands; each records its inputs and outputs on the manifest
# ---------------------------------------------------------------------------

def cmd_gen_scene(args, man: RunManifest):
    out = Path(args.out)
    lo, hi = np.array(args.bbox[:3]), np.array(args.bbox[3:])
    opts = _render_opts(args)
    scene, cams, renders = gen_scene(args.seed, args.n, (lo, hi), args.views, args.width, args.height,
                                     args.sh_degree, opts)
    out.mkdir(parents=True, exist_ok=True)
    ply_write(scene, out / "scene.ply")
    ply_write(jitter_scene(scene, np.random.default_rng(args.seed + 1)), out / "init.ply")
    cameras_write(cams, out / "cams.json")
    man.outputs += [str(out / n) for n in ("scene.ply", "init.ply", "cams.json")]
    man.outputs += write_renders(renders, out / "renders")
    tp = teacher_point_map(renders, cams)
    tensor_write(tp.points, out / "teacher_points.lumt")
    tensor_write(tp.mask.astype(np.float32), out / "teacher_mask.lumt")
    man.outputs += [str(out / "teacher_points.lumt"), str(out / "teacher_mask.lumt")]


def cmd_degrade(args, man: RunManifest):
    out = Path(args.out)
    mode = Mode.LOW_LIGHT if args.mode == "low" else Mode.OVER_EXPOSURE
    base = DegradeConfig(seed=args.seed) if mode is Mode.LOW_LIGHT else DegradeConfig.over_exposure(args.seed)
    bounds = {k: getattr(args, k) if getattr(args, k) is not None else getattr(base, k)
              for k in ("exposure_min", "exposure_max", "gamma_min", "gamma_max")}
    cfg = DegradeConfig(**bounds, seed=args.seed, mode=mode)
    paths, imgs = load_images(args.inp)
    man.inputs = _hash_inputs([args.inp])
    params = sample_params(cfg)
    out.mkdir(parents=True, exist_ok=True)
    for p, img in zip(paths, imgs):
        image_save(degrade(img, params), out / p.name)
        man.outputs.append(str(out / p.name))
    write_json_atomic({"params": params.to_dict(), "config": {**bounds, "seed": args.seed, "mode": mode.value},
                       "images": [p.name for p in paths]}, out / "params.json")
    man.outputs.append(str(out / "params.json"))


def cmd_render(args, man: RunManifest):
    bg = _floats(args.bg, 3, "--bg")
    scene = ply_read(args.scene)
    cams = cameras_read(args.cameras)
    man.inputs = _hash_inputs([args.scene, args.cameras])
    opts = _render_opts(args, background=bg)
    man.outputs += write_renders([render(scene, cam, opts) for cam in cams], Path(args.out))


def _load_teacher(args, n_views: int) -> PointMap:
    pts = np.asarray(tensor_read(args.teacher_points), dtype=np.float64)
    if pts.ndim != 4 or pts.shape[-1] != 3 or pts.shape[0] != n_views:
        raise UsageError(f"teacher points must be {n_views}xHxWx3, got {pts.shape}")
    mask = np.ones(pts.shape[:3], dtype=bool)
    if args.teacher_mask:
        m = tensor_read(args.teacher_mask)
        if m.size != mask.size:
            raise UsageError(f"teacher mask has {m.size} values for {mask.size} pixels")
        mask = m.reshape(mask.shape) > 0.5
    return PointMap(np.where(mask[..., None], pts, 0.0), mask)


def fit_config_from_args(args) -> FitConfig:
    trainable = tuple(g for g in GROUPS if not getattr(args, f"freeze_{g}"))
    return FitConfig(
        iters=args.iters, lr_max=args.lr_max, lr_min=args.lr_min, warmup=args.warmup,
        lumos=LumosWeights(args.lambda_c, args.lambda_i, args.lambda_v),
        objective=ObjectiveWeights(args.omega_distill, args.omega_lumos),
        rec_kind=args.rec, trainable=trainable,
        content_weights=_floats(args.content_weights, 2, "--content-weights"),
        voxel_weights=_floats(args.voxel_weights, 5, "--voxel-weights"),
        extractor=ExtractorSpec("external_weights", args.extractor_weights) if args.extractor_weights else ExtractorSpec(),
        render=_render_opts(args), threads=args.threads, seed=args.seed)


def cmd_fit(args, man: RunManifest):
    cfg = fit_config_from_args(args)
    man.config["fit"] = json.loads(json.dumps(asdict(cfg), default=str))
    scene = ply_read(args.scene)
    if args.reset_colors:
        scene = reset_colors(scene)
    cams = cameras_read(args.cameras)
    _, targets = load_images(args.targets)
    degraded = load_images(args.degraded)[1] if args.degraded else None
    if len(targets) != len(cams):
        raise UsageError(f"{len(targets)} target images for {len(cams)} cameras")
    teacher = _load_teacher(args, len(cams))
    man.inputs = _hash_inputs([args.scene, args.cameras, args.targets, args.degraded, args.teacher_points,
                               args.teacher_mask, args.extractor_weights])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log = open(args.log, "w") if args.log else None
    try:
        def cb(state, report):
            if log is not None:
                log.write(report.to_json() + "\n")
        fitted, history = fit_scene(scene, cams, targets, degraded, teacher, cfg, cb)
    finally:
        if log is not None:
            log.close()
    for name in GROUPS:
        _check_finite(getattr(fitted, name), f"fitted {name}")
    ply_write(fitted, out)
    man.outputs.append(str(out))
    if args.log:
        man.outputs.append(str(args.log))
    if history:
        man.config["final_loss"] = json.loads(history[-1].to_json())


def cmd_eval(args, man: RunManifest):
    pred_paths, preds = load_images(args.pred)
    gt_paths, gts = load_images(args.gt)
    if [p.name for p in pred_paths] != [p.name for p in gt_paths]:
        raise UsageError("prediction and reference directories hold different file names")
    man.inputs = _hash_inputs([args.pred, args.gt])
    report = evaluate(preds, gts, [p.name for p in pred_paths])
    write_json_atomic(report.to_dict(), Path(args.out))
    man.outputs.append(str(args.out))
    print(json.dumps({"psnr": report.psnr, "ssim": report.ssim}))


def cmd_voxel_stats(args, man: RunManifest):
    pts = np.asarray(tensor_read(args.points), dtype=np.float64)
    feats = np.asarray(tensor_read(args.feats), dtype=np.float64)
    man.inputs = _hash_inputs([args.points, args.feats])
    if pts.shape[-1] != 3:
        raise UsageError(f"points must end in a 3-vector axis, got {pts.shape}")
    if feats.ndim == pts.ndim - 1:
        feats = feats[..., None]
    origin = _floats(args.origin, 3, "--origin")
    grid = voxelize(pts, feats, args.voxel_size, origin)
    st = voxel_stats(grid)
    result = {"voxel_size": args.voxel_size, "cells": len(grid), "mean": st.mean.tolist(), "std": st.std.tolist()}
    print(json.dumps(result))
    if args.out:
        write_json_atomic(result, Path(args.out))
        man.outputs.append(str(args.out))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker cap for per-view parallelism")
    common.add_argument("--f64", action="store_true", help="64-bit rendering (default 32-bit)")

    p = _Parser(prog="lumos", description="Gaussian-scene illumination restoration toolkit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    g = sub.add_parser("gen-scene", parents=[common], help="synthetic scene, cameras, clean renders")
    g.add_argument("--n", type=int, default=300, help="primitive count")
    g.add_argument("--bbox", type=lambda s: _floats(s, 6, "--bbox"), default=(-1, -1, -1, 1, 1, 1),
                   help="xmin,ymin,zmin,xmax,ymax,zmax")
    g.add_argument("--views", type=int, default=6)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--sh-degree", type=int, default=1, choices=range(4))
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene, out_kind="dir")

    d = sub.add_parser("degrade", parents=[common], help="synthetic low-light or over-exposure")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=("low", "over"), default="low")
    for k in ("exposure-min", "exposure-max", "gamma-min", "gamma-max"):
        d.add_argument(f"--{k}", type=float)
    d.set_defaults(func=cmd_degrade, out_kind="dir")

    r = sub.add_parser("render", parents=[common], help="render a PLY scene from every camera")
    r.add_argument("--scene", required=True)
    r.add_argument("--cameras", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--bg", default="0,0,0", help="background R,G,B in linear light")
    r.set_defaults(func=cmd_render, out_kind="dir")

    f = sub.add_parser("fit", parents=[common], help="fit a scene to multi-view targets")
    f.add_argument("--scene", required=True)
    f.add_argument("--cameras", required=True)
    f.add_argument("--targets", required=True, help="directory of clean target PNGs")
    f.add_argument("--degraded", help="directory of degraded input PNGs (context)")
    f.add_argument("--teacher-points", required=True, help="LUMT SxHxWx3 world points")
    f.add_argument("--teacher-mask", help="LUMT SxHxW validity mask (> 0.5 valid); default all valid")
    f.add_argument("--iters", type=int, default=1000)
    f.add_argument("--out", required=True, help="fitted PLY path")
    f.add_argument("--log", help="JSON-lines loss log")
    f.add_argument("--lr-max", type=float, default=2e-4)
    f.add_argument("--lr-min", type=float, default=0.0)
    f.add_argument("--warmup", type=int, help="warm-up steps (default scales 1000 per 30k steps)")
    lw, ow = LumosWeights(), ObjectiveWeights()
    f.add_argument("--lambda-c", type=float, default=lw.lambda_c, help="content weight")
    f.add_argument("--lambda-i", type=float, default=lw.lambda_i, help="image weight")
    f.add_argument("--lambda-v", type=float, default=lw.lambda_v, help="voxel weight")
    f.add_argument("--omega-distill", type=float, default=ow.omega_distill)
    f.add_argument("--omega-lumos", type=float, default=ow.omega_lumos)
    f.add_argument("--rec", choices=("mse", "l1"), default="mse")
    f.add_argument("--content-weights", default="0.5,0.5", help="weights of the two deepest levels")
    f.add_argument("--voxel-weights", default="0.2,0.2,0.2,0.2,0.2")
    f.add_argument("--extractor-weights", help="JSON manifest of external conv weights")
    f.add_argument("--reset-colors", action="store_true", help="zero SH before fitting (gray start)")
    for grp in GROUPS:
        f.add_argument(f"--freeze-{grp}", action="store_true", help=f"keep {grp} fixed")
    f.set_defaults(func=cmd_fit, out_kind="file")

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM of predictions against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(func=cmd_eval, out_kind="file")

    v = sub.add_parser("voxel-stats", parents=[common], help="per-channel voxel statistics as JSON")
    v.add_argument("--points", required=True)
    v.add_argument("--feats", required=True)
    v.add_argument("--voxel-size", type=float, required=True)
    v.add_argument("--origin", default="0,0,0")
    v.add_argument("--out", help="also write the JSON here")
    v.set_defaults(func=cmd_voxel_stats, out_kind="file")
    return p


def manifest_path(args) -> Path | None:
    out = getattr(args, "out", None)
    if not out:
        return None
    out = Path(out)
    if args.out_kind == "dir":
        return out / MANIFEST_NAME
    return out.with_name(out.stem + ".manifest.json")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out_kind")}
    man = RunManifest(args.command, json.loads(json.dumps(config, default=str)))
    t0 = time.perf_counter()
    code = EXIT_OK
    try:
        args.func(args, man)
    except FloatingPointError as exc:
        code = EXIT_NUMERIC
        man.error = str(exc)
    except (OSError, KeyError, *_FORMAT_ERRORS) as exc:
        code = EXIT_IO
        man.error = str(exc)
    except ValueError as exc:
        code = EXIT_USAGE
        man.error = str(exc)
    if man.error:
        print(f"lumos {args.command}: error: {man.error}", file=sys.stderr)
    man.wall_time = time.perf_counter() - t0
    man.exit_code = code
    mp = manifest_path(args)
    if mp is not None:
        try:
            man.write(mp)
        except OSError as exc:
            print(f"lumos: could not write manifest {mp}: {exc}", file=sys.stderr)
            code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
