"""
Command-Line Entry Point of the Calibration Toolkit

Commands:
    simulate    Project a rig for given or random views and write a projection CSV
    calibrate   Recover the geometry from a projection CSV
    experiment  Run a Monte-Carlo noise experiment and write summary tables
    dcc-check   Test projection moments against their polynomial laws
    render      Write a long-format sinogram of a disk phantom (plot data)

Exit codes: 0 success, 1 unexpected failure, 2 invalid input, 3 solver or
simulation failure, 4 every realization of a noise level failed, 5 data
consistency check failed. Failures print a JSON object
{"error", "message", "view_indices"} on stderr.

Usage:
    python main.py simulate --rig configs/rig_parallel.json --random 80 --seed 7 \
        --out results/parallel.csv
    python main.py calibrate --geometry parallel --projections results/parallel.csv \
        --out results/parallel_calib.json
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from config import TOOLKIT_VERSION, settings
from core.data_loader import (
    RunManifest,
    config_hash,
    experiment_config_from_options,
    load_experiment_config,
    load_pattern,
    load_phantom,
    load_rig,
    load_views,
    read_projections,
    rig_to_dict,
    save_views,
    sinogram_to_frame,
    utc_now,
    write_json,
    write_manifest,
    write_projections,
    write_table,
)
from core.dcc_check import (
    fanbeam_moment_consistency,
    group_positions_by_view,
    parallel_moment_consistency,
)
from core.exceptions import (
    ConfigError,
    InputError,
    RigValidationError,
    SimulationError,
    SolverError,
    TomocalError,
)
from core.fanbeam_calib import calibrate_fanbeam
from core.fanbeam_sim import project_views_fanbeam
from core.parallel_calib import Branch, calibrate_parallel
from core.parallel_sim import (
    DetectorGrid,
    project_markers_parallel,
    render_sinogram,
    simulate_detected_projections,
)
from core.types import (
    DiracProjection,
    FanBeamView,
    Geometry,
    ParallelRig,
    ParallelView,
    validate_rig,
)
from services.experiment_service import (
    NOISE_STREAM,
    SCENARIO_STREAM,
    ExperimentService,
    noisy_detections,
    sample_scenario,
    stream,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_ALL_FAILED = 4
EXIT_INCONSISTENT = 5


class CommandFailed(Exception):
    """A command finished but its outcome maps to a non-zero exit code."""

    def __init__(self, exit_code: int, error: str, message: str, view_indices=()):
        super().__init__(message)
        self.exit_code = exit_code
        self.error = error
        self.view_indices = list(view_indices)


def resolve_seed(flag: Optional[int], config_seed: Optional[int] = None) -> int:
    """--seed wins over TOMOCAL_SEED, which wins over the config file."""
    if flag is not None:
        return flag
    if settings.SEED is not None:
        return settings.SEED
    return 0 if config_seed is None else config_seed


def _args_for_hash(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in sorted(vars(args).items()) if k != "handler"}


def _finish(
    command: str,
    hashed: Any,
    seed: Optional[int],
    started: str,
    out: str,
    outputs: List[Path],
):
    manifest = RunManifest(
        command=command,
        config_hash=config_hash(hashed),
        seed=seed,
        toolkit_version=TOOLKIT_VERSION,
        started_at=started,
        finished_at=utc_now(),
        outputs=[str(p) for p in outputs],
    )
    path = write_manifest(manifest, out)
    logger.info(f"{command} finished; manifest at {path}")


# --- simulate ---


def cmd_simulate(args: argparse.Namespace) -> int:
    started = utc_now()
    rig = load_rig(args.rig)
    violations = validate_rig(rig)
    if violations:
        raise RigValidationError(
            f"Invalid rig {args.rig}: {'; '.join(violations)}", violations
        )
    geometry = Geometry.PARALLEL if isinstance(rig, ParallelRig) else Geometry.FANBEAM

    seed = resolve_seed(args.seed)
    if args.views:
        view_geometry, views = load_views(args.views)
        if view_geometry is not geometry:
            raise InputError(f"Views are {view_geometry.value}, rig is {geometry.value}")
    elif args.random:
        if args.random < 2:
            raise InputError(f"--random needs at least 2 views, got {args.random}")
        config = experiment_config_from_options(
            "simulate --random", geometry=geometry, rig=rig_to_dict(rig), P=args.random,
            seed=seed, noise_levels=[0.0],
        )
        views = list(sample_scenario(config, stream(seed, SCENARIO_STREAM)).views)
    else:
        raise InputError("simulate needs --views or --random P")

    if geometry is Geometry.PARALLEL:
        if args.detect:
            detections = simulate_detected_projections(rig, views)
        else:
            detections = []
            for i, view in enumerate(views):
                detections.extend(project_markers_parallel(rig, view, i).values())
    else:
        detections = project_views_fanbeam(rig, views)

    include_weights = geometry is Geometry.FANBEAM
    if args.noise_level > 0:
        noisy = noisy_detections(
            detections, args.noise_level, settings.PIXEL_SIZE, stream(seed, NOISE_STREAM, 0, 0)
        )
        if include_weights:
            weights = {(d.view_index, d.group): d.weights for d in detections}
            noisy = [
                DiracProjection(
                    d.view_index, d.group, d.positions, weights[(d.view_index, d.group)]
                )
                for d in noisy
            ]
        detections = noisy

    out = Path(args.out)
    write_projections(detections, out, include_weights=include_weights)
    views_path = Path(f"{out}.views.json")
    save_views(views, views_path)
    hashed = {"args": _args_for_hash(args), "rig": rig_to_dict(rig), "seed": seed}
    _finish("simulate", hashed, seed, started, str(out), [out, views_path])
    return EXIT_OK


# --- calibrate ---


def cmd_calibrate(args: argparse.Namespace) -> int:
    started = utc_now()
    geometry = Geometry(args.geometry)
    detections = read_projections(args.projections)
    if geometry is Geometry.PARALLEL:
        result = calibrate_parallel(
            detections, Branch(args.branch), scan_pairs=args.scan_pairs
        )
        estimated = [ParallelView(a, s) for a, s in zip(result.angles, result.shifts_all)]
    else:
        if not args.pattern:
            raise InputError("Fan-beam calibration needs --pattern (D, L, k1, k2, k3)")
        pattern, D = load_pattern(args.pattern)
        result = calibrate_fanbeam(
            detections, pattern, D,
            reference_view=args.reference_view,
            average=args.average,
            cross_ratio_tolerance=args.cross_ratio_tolerance,
        )
        estimated = [FanBeamView(lam, y) for lam, y in zip(result.lambdas, result.jitters)]

    out = Path(args.out)
    write_json(result.to_dict(), out)
    views_path = Path(f"{out}.views.json")
    save_views(estimated, views_path)
    _finish("calibrate", {"args": _args_for_hash(args)}, None, started, str(out), [out, views_path])
    return EXIT_OK


# --- experiment ---


def cmd_experiment(args: argparse.Namespace) -> int:
    started = utc_now()
    config, raw = load_experiment_config(args.config)
    if args.n_realizations is not None:
        if args.n_realizations < 1:
            raise InputError("--n-realizations must be at least 1")
        config = config.model_copy(update={"n_realizations": args.n_realizations})
    seed = resolve_seed(args.seed, config.seed)

    report = ExperimentService(config, seed).run()

    out_dir = Path(args.out_dir or settings.OUTPUT_DIR)
    summary_path = out_dir / f"{config.name}_summary.csv"
    long_path = out_dir / f"{config.name}_long.csv"
    log_path = out_dir / f"{config.name}_realizations.json"
    write_table(report.to_frame(), summary_path)
    write_table(report.to_long_frame(), long_path)
    write_json(report.realizations, log_path)
    hashed = {"config": raw, "seed": seed, "n_realizations": config.n_realizations}
    _finish(
        "experiment", hashed, seed, started, str(out_dir / config.name),
        [summary_path, long_path, log_path],
    )

    print(report.to_frame().to_string(index=False))
    if report.failed_levels:
        raise CommandFailed(
            EXIT_ALL_FAILED,
            "AllRealizationsFailed",
            f"Every realization failed at noise level(s) {report.failed_levels}",
        )
    return EXIT_OK


# --- dcc-check ---


def cmd_dcc_check(args: argparse.Namespace) -> int:
    started = utc_now()
    geometry = Geometry(args.geometry)
    detections = read_projections(args.projections)
    view_geometry, views = load_views(args.views)
    if view_geometry is not geometry:
        raise InputError(f"Views are {view_geometry.value}, data are {geometry.value}")
    positions, weights = group_positions_by_view(detections, len(views))

    try:
        if geometry is Geometry.PARALLEL:
            report = parallel_moment_consistency(
                [
                    (v.alpha, p if args.raw else p - v.shift)
                    for v, p in zip(views, positions)
                ],
                k_max=args.k_max,
            )
        else:
            missing = [i for i, w in enumerate(weights) if w is None]
            if missing:
                raise InputError(
                    f"Fan-beam consistency needs the simulator weight column "
                    f"(missing in views {missing})"
                )
            report = fanbeam_moment_consistency(
                [
                    (v.lam, p if args.raw else p - v.jitter, w)
                    for v, p, w in zip(views, positions, weights)
                ],
                k_max=args.k_max,
            )
    except SolverError as e:
        raise InputError(f"Cannot check consistency: {e}") from e

    out = Path(args.out)
    write_json(report.to_dict(), out)
    _finish("dcc-check", {"args": _args_for_hash(args)}, None, started, str(out), [out])
    if not report.passed:
        suspect = [] if report.suspect_view is None else [report.suspect_view]
        raise CommandFailed(
            EXIT_INCONSISTENT,
            "ConsistencyCheckFailed",
            f"Moments of order {report.first_failing_order} break their law"
            + ("" if not suspect else f"; suspect view {suspect[0]}"),
            suspect,
        )
    return EXIT_OK


# --- render ---


def cmd_render(args: argparse.Namespace) -> int:
    started = utc_now()
    phantom = load_phantom(args.phantom)
    rig = None
    if args.rig:
        rig = load_rig(args.rig)
        if not isinstance(rig, ParallelRig):
            raise InputError("render draws parallel projections; use a parallel rig")
    view_geometry, views = load_views(args.views)
    if view_geometry is not Geometry.PARALLEL:
        raise InputError("render needs parallel views")
    step = args.step or settings.GRID_STEP
    lo, hi = args.grid
    grid = DetectorGrid.covering(lo, hi, step)
    window = tuple(args.window) if args.window else None
    sinogram = render_sinogram(phantom, rig, views, grid, window, settings.MARKER_RADIUS)

    out = Path(args.out)
    write_table(sinogram_to_frame(sinogram), out)
    _finish("render", {"args": _args_for_hash(args)}, None, started, str(out), [out])
    return EXIT_OK


# --- Argument parsing ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tomocal",
        description="Moment-based geometric self-calibration for 2D tomography",
    )
    parser.add_argument("--log-level", default=None, help="Overrides TOMOCAL_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Write projection CSV for a rig")
    p.add_argument("--rig", required=True, help="Rig JSON file")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--views", help="View JSON file")
    source.add_argument("--random", type=int, metavar="P", help="Draw P random views")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--detect", action="store_true",
                   help="Parallel only: render marker disks and detect their centres")
    p.add_argument("--noise-level", type=float, default=0.0,
                   help="Detection noise as a fraction of the pixel size")
    p.add_argument("--out", required=True, help="Projection CSV to write")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("calibrate", help="Recover the geometry from a projection CSV")
    p.add_argument("--geometry", required=True, choices=[g.value for g in Geometry])
    p.add_argument("--projections", required=True)
    p.add_argument("--branch", default="I", choices=[b.value for b in Branch])
    p.add_argument("--scan-pairs", action="store_true")
    p.add_argument("--pattern", help="Fan-beam: JSON with D, L, k1, k2, k3 (a rig file works)")
    p.add_argument("--reference-view", type=int, default=None)
    p.add_argument("--average", action="store_true")
    p.add_argument("--cross-ratio-tolerance", type=float, default=None)
    p.add_argument("--out", required=True, help="Result JSON to write")
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("experiment", help="Run a Monte-Carlo noise experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-realizations", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(handler=cmd_experiment)

    p = sub.add_parser("dcc-check", help="Check projection moments for consistency")
    p.add_argument("--geometry", required=True, choices=[g.value for g in Geometry])
    p.add_argument("--projections", required=True)
    p.add_argument("--views", required=True, help="View JSON (truth or estimates)")
    p.add_argument("--k-max", type=int, default=3)
    p.add_argument("--raw", action="store_true", help="Skip shift/jitter correction")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_dcc_check)

    p = sub.add_parser("render", help="Long-format sinogram CSV of a disk phantom")
    p.add_argument("--phantom", required=True)
    p.add_argument("--rig", default=None)
    p.add_argument("--views", required=True)
    p.add_argument("--grid", type=float, nargs=2, required=True, metavar=("S_MIN", "S_MAX"))
    p.add_argument("--window", type=float, nargs=2, default=None, metavar=("S_LO", "S_HI"))
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_render)
    return parser


def _error_json(error: str, message: str, view_indices=()) -> None:
    payload = {"error": error, "message": message, "view_indices": list(view_indices)}
    print(json.dumps(payload), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=(args.log_level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )

    try:
        return args.handler(args)
    except CommandFailed as e:
        logger.error(f"{args.command}: {e}")
        _error_json(e.error, str(e), e.view_indices)
        return e.exit_code
    except (InputError, ConfigError, ValidationError) as e:
        logger.error(f"{args.command}: invalid input: {e}")
        _error_json(type(e).__name__, str(e))
        return EXIT_INPUT
    except (SolverError, SimulationError) as e:
        view_indices = getattr(e, "view_indices", ())
        logger.error(f"{args.command}: {type(e).__name__}: {e}")
        _error_json(type(e).__name__, str(e), view_indices)
        return EXIT_SOLVER
    except TomocalError as e:
        logger.error(f"{args.command}: {e}", exc_info=True)
        _error_json(type(e).__name__, str(e))
        return EXIT_UNEXPECTED
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        _error_json(type(e).__name__, str(e))
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
