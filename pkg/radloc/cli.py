"""
Command-line entry point.

    radloc gen-scene --spec scene.toml --dims 64,64,64 --out scene.vxrf
    radloc fit --images views/ --poses views/poses.txt --intr 160x120:138.6,138.6,79.5,59.5 --dims 32,32,32 --out fit.vxrf
    radloc render --grid scene.vxrf --pose "0 -3 1 0.7 0.7 0 0" --intr 160x120:... --out view.ppm
    radloc localize --grid scene.vxrf --query q.ppm --init-pose "..." --trace trace.csv
    radloc evaluate --bench configs/bench_default.toml --out results/

Exit codes: 0 success, 2 usage or input error, 3 degenerate filter or diverged fit.
The resolved configuration of every run is printed to stderr as JSON; stdout
only carries results.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

import settings
from radloc.core.field_fit import FitConfig, fit_field, load_train_set
from radloc.core.geometry import CameraIntrinsics, Pose, format_pose, parse_pose, read_poses
from radloc.core.radiance_field import build_procedural_scene, load_grid, load_scene_spec, save_grid
from radloc.core.renderer import RaySamplingConfig, load_ppm, render_image, save_ppm
from radloc.errors import (
    ConfigError,
    DegenerateWeightsError,
    DivergenceError,
    GridFormatError,
    PreconditionError,
)
from radloc.services.harness import BenchmarkSpec, load_benchmark_spec, run_experiment
from radloc.services.mcl import FilterConfig, refine
from settings import logger

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

DEFAULT_FOV_DEG = 60.0


def _triple_ints(text: str) -> Tuple[int, int, int]:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected nx,ny,nz integers, got {text!r}") from exc
    if len(values) != 3 or min(values) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive integers, got {text!r}")
    return values[0], values[1], values[2]


def _bbox(text: str) -> Tuple[Tuple[float, float, float], Tuple[float, float, float]]:
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected six numbers, got {text!r}") from exc
    if len(v) != 6 or any(lo >= hi for lo, hi in zip(v[:3], v[3:])):
        raise argparse.ArgumentTypeError(f"expected xmin,ymin,zmin,xmax,ymax,zmax, got {text!r}")
    return (v[0], v[1], v[2]), (v[3], v[4], v[5])


def _pose(text: str) -> Pose:
    try:
        return parse_pose(text)
    except PreconditionError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _intrinsics(text: str) -> CameraIntrinsics:
    try:
        return CameraIntrinsics.parse(text)
    except PreconditionError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radloc", description="Particle-filter camera pose refinement on voxel radiance fields."
    )
    parser.add_argument("--seed", type=int, default=None, help=f"random seed (default {settings.SEED})")
    parser.add_argument(
        "--workers", type=int, default=None, help=f"concurrency budget (default {settings.WORKERS})"
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-scene", help="voxelize a procedural scene spec")
    gen.add_argument("--spec", required=True, type=Path, help="scene spec TOML file")
    gen.add_argument("--dims", required=True, type=_triple_ints, help="nx,ny,nz")
    gen.add_argument("--out", required=True, type=Path, help="output grid file")

    fit = sub.add_parser("fit", help="fit a grid to posed images")
    fit.add_argument("--images", required=True, type=Path, help="directory of .ppm files, sorted by name")
    fit.add_argument("--poses", required=True, type=Path, help="pose file, one pose per image")
    fit.add_argument("--intr", required=True, type=_intrinsics, help="WxH:fx,fy,cx,cy")
    fit.add_argument("--dims", required=True, type=_triple_ints, help="nx,ny,nz")
    fit.add_argument("--bbox", type=_bbox, default=_bbox("-1,-1,-1,1,1,1"), help="xmin,ymin,zmin,xmax,ymax,zmax")
    fit.add_argument("--iters", type=int, default=FitConfig().iterations)
    fit.add_argument("--rays", type=int, default=FitConfig().rays_per_step, help="rays per step")
    fit.add_argument("--step-size", type=float, default=FitConfig().step_size)
    fit.add_argument("--density-step-size", type=float, default=FitConfig().density_step_size)
    fit.add_argument("--decay", type=float, default=FitConfig().decay)
    fit.add_argument("--samples", type=int, default=FitConfig().n_samples, help="samples per ray")
    fit.add_argument("--loss-csv", type=Path, default=None, help="write iteration,loss rows here")
    fit.add_argument("--out", required=True, type=Path, help="output grid file")

    render = sub.add_parser("render", help="render views of a grid")
    render.add_argument("--grid", required=True, type=Path)
    which = render.add_mutually_exclusive_group(required=True)
    which.add_argument("--pose", type=_pose, help='"tx ty tz qw qx qy qz"')
    which.add_argument("--pose-file", type=Path, help="render every pose; --out is then a directory")
    render.add_argument("--intr", required=True, type=_intrinsics, help="WxH:fx,fy,cx,cy")
    render.add_argument("--samples", type=int, default=128, help="samples per ray")
    render.add_argument("--out", required=True, type=Path, help="output .ppm (or directory)")

    loc = sub.add_parser("localize", help="refine a query's pose with the particle filter")
    loc.add_argument("--grid", required=True, type=Path)
    loc.add_argument("--query", required=True, type=Path, help="query .ppm")
    loc.add_argument("--init-pose", required=True, type=_pose)
    loc.add_argument(
        "--intr", type=_intrinsics, default=None,
        help=f"WxH:fx,fy,cx,cy (default: query size, {DEFAULT_FOV_DEG:g} deg horizontal fov)",
    )
    loc.add_argument("--preset", choices=["indoor", "cambridge"], default="indoor")
    loc.add_argument("--particles", type=int, default=None, help="default 200")
    loc.add_argument("--sigma-t", type=float, default=None, help="default 0.005 m")
    loc.add_argument("--sigma-r", type=float, default=None, help="default 0.005 rad (cambridge 0.01)")
    loc.add_argument("--pixels", type=int, default=None, help=f"default {FilterConfig().m_pixels}")
    loc.add_argument("--iters", type=int, default=None, help="default 50")
    loc.add_argument("--samples", type=int, default=None, help=f"default {FilterConfig().n_samples}")
    loc.add_argument("--resampling", choices=["multinomial", "systematic"], default=None)
    loc.add_argument("--trace", type=Path, default=None, help="trace CSV path")
    loc.add_argument("--gt-pose", type=_pose, default=None, help="adds error columns to the trace")

    ev = sub.add_parser("evaluate", help="run the synthetic benchmark")
    ev.add_argument("--bench", type=Path, default=None, help="benchmark TOML (default: built-in)")
    ev.add_argument("--out", required=True, type=Path, help="output directory")
    return parser


def echo_config(command: str, config: Dict[str, Any]) -> None:
    text = json.dumps({"command": command, **config}, sort_keys=True, default=str)
    print(text, file=sys.stderr)


def _common(args: argparse.Namespace) -> Dict[str, Any]:
    return {"seed": args.seed, "workers": args.workers}


def cmd_gen_scene(args: argparse.Namespace) -> int:
    spec = load_scene_spec(args.spec)
    echo_config("gen-scene", {**_common(args), "dims": args.dims, "out": args.out, "scene": spec.model_dump()})
    grid = build_procedural_scene(spec, args.dims)
    save_grid(grid, args.out)
    logger.info(f"wrote {args.out}")
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = FitConfig(
        iterations=args.iters,
        rays_per_step=args.rays,
        step_size=args.step_size,
        density_step_size=args.density_step_size,
        decay=args.decay,
        n_samples=args.samples,
        seed=args.seed,
    )
    echo_config(
        "fit",
        {
            **_common(args),
            "images": args.images,
            "poses": args.poses,
            "intr": args.intr.format(),
            "dims": args.dims,
            "bbox": args.bbox,
            "fit": cfg.model_dump(),
            "out": args.out,
        },
    )
    train = load_train_set(args.images, args.poses, args.intr)
    result = fit_field(train, args.dims, args.bbox, cfg, args.workers, show_progress=args.verbose)
    save_grid(result.grid, args.out)
    if args.loss_csv is not None:
        result.write_loss_csv(args.loss_csv)
    if result.losses:
        print(f"final_loss {result.losses[-1]!r}")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = RaySamplingConfig(n_samples=args.samples)
    poses: List[Pose] = [args.pose] if args.pose is not None else read_poses(args.pose_file)
    echo_config(
        "render",
        {
            **_common(args),
            "grid": args.grid,
            "poses": [format_pose(p) for p in poses],
            "intr": args.intr.format(),
            "sampling": cfg.model_dump(),
            "out": args.out,
        },
    )
    grid = load_grid(args.grid)
    if args.pose is not None:
        save_ppm(render_image(grid, args.pose, args.intr, cfg, workers=args.workers), args.out)
        print(args.out)
        return EXIT_OK
    args.out.mkdir(parents=True, exist_ok=True)
    for k, pose in enumerate(poses):
        path = args.out / f"view_{k:03d}.ppm"
        save_ppm(render_image(grid, pose, args.intr, cfg, workers=args.workers), path)
        print(path)
    return EXIT_OK


def resolve_filter_config(args: argparse.Namespace) -> FilterConfig:
    """
    Preset values, then any flag given explicitly.
    """
    base = FilterConfig.cambridge() if args.preset == "cambridge" else FilterConfig()
    flags = {
        "n_particles": args.particles,
        "sigma_t": args.sigma_t,
        "sigma_r": args.sigma_r,
        "m_pixels": args.pixels,
        "iterations": args.iters,
        "n_samples": args.samples,
        "resampling": args.resampling,
        "seed": args.seed,
    }
    data = base.model_dump()
    data.update({k: v for k, v in flags.items() if v is not None})
    return FilterConfig.model_validate(data)


def cmd_localize(args: argparse.Namespace) -> int:
    cfg = resolve_filter_config(args)
    query = load_ppm(args.query)
    intr = args.intr or CameraIntrinsics.from_fov(query.width, query.height, DEFAULT_FOV_DEG)
    echo_config(
        "localize",
        {
            **_common(args),
            "grid": args.grid,
            "query": args.query,
            "init_pose": format_pose(args.init_pose),
            "gt_pose": None if args.gt_pose is None else format_pose(args.gt_pose),
            "intr": intr.format(),
            "preset": args.preset,
            "filter": cfg.model_dump(),
            "trace": args.trace,
        },
    )
    grid = load_grid(args.grid)
    pose, trace = refine(
        grid,
        query,
        intr,
        args.init_pose,
        cfg,
        np.random.default_rng(cfg.seed),
        ground_truth=args.gt_pose,
        workers=args.workers,
    )
    if args.trace is not None:
        trace.write_csv(args.trace)
    print(format_pose(pose))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    spec = BenchmarkSpec.default() if args.bench is None else load_benchmark_spec(args.bench)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    echo_config(
        "evaluate", {**_common(args), "seed": spec.seed, "bench": spec.model_dump(), "out": args.out}
    )
    report = run_experiment(spec, args.workers, args.out)
    print(args.out / "summary.csv")
    if report.failures:
        logger.warning(f"{report.failures} queries failed")
    return EXIT_OK


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "fit": cmd_fit,
    "render": cmd_render,
    "localize": cmd_localize,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse argv, run the subcommand and map failures to exit codes.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE

    logger.set_level(logging.DEBUG if args.verbose else logging.INFO)
    if args.seed is None and args.command != "evaluate":
        args.seed = settings.SEED

    try:
        return COMMANDS[args.command](args)
    except (PreconditionError, ConfigError, GridFormatError) as exc:
        logger.error(str(exc))
        return EXIT_USAGE
    except ValidationError as exc:
        logger.error(str(exc))
        return EXIT_USAGE
    except OSError as exc:
        logger.error(f"{exc.filename or ''}: {exc.strerror or exc}")
        return EXIT_USAGE
    except (DegenerateWeightsError, DivergenceError) as exc:
        logger.error(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
