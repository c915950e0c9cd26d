#!/usr/bin/env python3
"""
ConvGrid: CLI

This script implements:
- Solving monopolist instances with adaptive stencils or baseline methods (solve)
- Minimal stencil statistics over rotated grids (stencil-stats)
- Flip counts of u-Delaunay triangulations (flip-experiment)
- Method comparison tables (compare)
- Exclusion region against density rotation (rotation-sweep)
- Convexity defects of a value file (defect)
"""

import argparse
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from core.config import Config
from core.constraints import convexity_defect
from core.errors import ConvGridError
from core.experiments import (
    FLIP_HEADER,
    FUNCTIONS,
    ROTATION_HEADER,
    STENCIL_HEADER,
    compare_methods,
    flip_experiment,
    rotation_sweep,
    stencil_stats,
)
from core.grid import GridDomain, square_grid
from core.monopolist import METHODS, PRESETS, MethodResult, economic_report, load_instance, solve_instance
from utils.file_operations import ensure_dir, read_json, read_values, write_csv, write_json, write_off
from utils.plotting import report_figures

logger = logging.getLogger("convgrid")


def _settings(args):
    """Refinement settings from the config file, overridden by flags"""
    config = Config(args.config) if getattr(args, "config", None) else Config()
    settings = config.refine_settings()
    overrides = {}
    if getattr(args, "rho", None) is not None:
        overrides["rho"] = args.rho
    if getattr(args, "algorithm", None) is not None:
        overrides["algorithm"] = args.algorithm
    if getattr(args, "cone", None) is not None:
        overrides["cone_family"] = args.cone
    return (replace(settings, **overrides) if overrides else settings), config


def _instance(args):
    name = args.instance
    if name in PRESETS:
        instance = PRESETS[name]()
        if args.theta is not None:
            instance = replace(instance, rotation=args.theta)
        return instance
    return load_instance(name, args.theta)


def _experiment_value(args, config, key, cast):
    value = getattr(args, key)
    return cast(config.get("experiment", key)) if value is None else value


def cmd_solve(args):
    """
    Solve a monopolist instance and write values, trace, report, the
    u-Delaunay triangulation (OFF), subgradient cells, final stencils and figures
    """
    settings, config = _settings(args)
    instance = _instance(args)
    method = args.method or ("adaptive-conv" if settings.cone_family == "conv" else "adaptive-dconv")
    exclusion = args.exclusion_threshold
    if exclusion is None:
        exclusion = config.get_float("monopolist", "exclusion_threshold")
    bunching = args.bunching_threshold
    if bunching is None:
        bunching = config.get_float("monopolist", "bunching_threshold")

    result = solve_instance(instance, args.n, method, settings)
    ensure_dir(args.out)
    grid = result.grid
    meta = {"instance": instance.name, "n": args.n, "method": method}
    write_csv(
        os.path.join(args.out, "values.csv"),
        ("x", "y", "u"),
        [(float(x), float(y), float(v)) for (x, y), v in zip(grid.coords, result.values)],
        meta,
    )
    if result.run is not None:
        result.run.write_trace(os.path.join(args.out, "trace.csv"), meta)
    report = economic_report(instance, grid, result.values, exclusion, bunching)
    summary = dict(zip(MethodResult.ROW_HEADER, result.row()))
    summary["converged"] = result.run.converged if result.run is not None else True
    summary["report"] = report.to_json()
    write_json(os.path.join(args.out, "report.json"), summary)
    write_off(os.path.join(args.out, "triangulation.off"), report.triangulation)
    write_json(os.path.join(args.out, "cells.json"), report.cells.to_json())
    if result.run is not None:
        write_json(os.path.join(args.out, "stencils.json"), result.run.stencils.to_json())
    report_figures(args.out, grid, report)

    print(f"{method} on {instance.name}, n={args.n}: {result.constraint_count} constraints")
    if result.run is not None:
        state = "converged" if result.run.converged else "did not converge"
        print(f"Refinement {state} after {len(result.run.iterations)} iterations")
    print(f"Objective {result.objective:.10g}, exact profit {result.profit:.10g}")
    print(f"Convexity defect {result.full_defect:.3e} (directional {result.directional_defect:.3e})")
    print(f"Excluded points {int(report.exclusion.sum())}, bunching points {int(report.bunching.sum())}")
    return 0 if result.run is None or result.run.converged else 1


def cmd_stencil_stats(args):
    """Monte Carlo statistics of minimal stencil counts"""
    _, config = _settings(args)
    samples = _experiment_value(args, config, "samples", int)
    seed = _experiment_value(args, config, "seed", int)
    jobs = _experiment_value(args, config, "jobs", int)
    rows, summary = stencil_stats(args.function, tuple(args.radii), samples, seed, jobs)
    ensure_dir(args.out)
    meta = {"seed": seed, "function": args.function, "samples": samples}
    write_csv(os.path.join(args.out, "stencil_stats.csv"), STENCIL_HEADER, rows, meta)
    write_json(os.path.join(args.out, "stencil_stats_summary.json"), summary)
    for entry in summary["per_radius"]:
        print(
            f"r={entry['radius']}: N={entry['mean_N']:.1f} #V={entry['mean_count']:.1f} "
            f"(std {entry['std_count']:.1f}, max/bound {entry['max_ratio_to_bound']:.3f})"
        )
    if not math.isnan(summary["exponent"]):
        print(f"Growth exponent {summary['exponent']:.3f}, fit C={summary['fit_constant']:.4f} (R^2 {summary['fit_r2']:.4f})")
    return 0


def cmd_flip_experiment(args):
    """Flip counts against the stencil bound"""
    _, config = _settings(args)
    samples = _experiment_value(args, config, "samples", int)
    seed = _experiment_value(args, config, "seed", int)
    jobs = _experiment_value(args, config, "jobs", int)
    rows, summary = flip_experiment(args.function, tuple(args.sizes), samples, seed, jobs)
    ensure_dir(args.out)
    write_csv(
        os.path.join(args.out, "flips.csv"), FLIP_HEADER, rows, {"seed": seed, "function": args.function, "samples": samples}
    )
    write_json(os.path.join(args.out, "flips_summary.json"), summary)
    for entry in summary["trend"]:
        print(f"size {entry['size']}: N={entry['mean_N']:.1f} flips={entry['mean_flips']:.1f} flips/(N ln^2 N)={entry['flips_per_N_over_ln2N']:.4f}")
    print("All flip counts within bound" if summary["all_within_bound"] else "Flip bound exceeded")
    return 0 if summary["all_within_bound"] else 1


def cmd_compare(args):
    """Constraint counts, defects and profits of the methods on one instance"""
    settings, _ = _settings(args)
    instance = _instance(args)
    rows = compare_methods(instance, tuple(args.sizes), tuple(args.methods), settings)
    ensure_dir(args.out)
    write_csv(os.path.join(args.out, "compare.csv"), MethodResult.ROW_HEADER, rows, {"instance": instance.name})
    print(" ".join(f"{h:>12}" for h in MethodResult.ROW_HEADER[:6]))
    for row in rows:
        method, n, count, full, directional, profit = row[:6]
        print(f"{method:>12} {n:>12} {count:>12} {full:>12.3e} {directional:>12.3e} {profit:>12.6f}")
    return 0


def cmd_rotation_sweep(args):
    """Exclusion and bunching of the classical problem for rotated densities"""
    settings, config = _settings(args)
    thetas = np.linspace(0.0, math.pi / 4, args.steps)
    rows = rotation_sweep(
        args.n,
        thetas,
        settings,
        config.get_float("monopolist", "exclusion_threshold"),
        config.get_float("monopolist", "bunching_threshold"),
    )
    ensure_dir(args.out)
    write_csv(os.path.join(args.out, "rotation.csv"), ROTATION_HEADER, rows, {"n": args.n})
    for theta, excluded, bunching, profit in rows:
        print(f"theta={theta:.4f}: excluded {excluded}, bunching {bunching}, profit {profit:.6f}")
    return 0


def cmd_defect(args):
    """Full and directional convexity defects of grid values"""
    if args.grid:
        grid = GridDomain.from_descriptor(read_json(args.grid))
    else:
        grid = square_grid(args.n)
    values = read_values(args.values)
    print(f"full {convexity_defect(grid, values, 'full'):.12g}")
    print(f"directional {convexity_defect(grid, values, 'directional'):.12g}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(description="ConvGrid: adaptive discretization of convex functions on grids")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="More logging (-vv for debug)")
    parser.add_argument("--config", help="Settings file")
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    # solve command
    parser_solve = subparsers.add_parser("solve", help="Solve a monopolist instance")
    parser_solve.add_argument("--instance", default="classical", help="Instance JSON file or preset name")
    parser_solve.add_argument("--n", type=int, default=20, help="Grid size")
    parser_solve.add_argument("--rho", type=float, help="Candidate extension factor")
    parser_solve.add_argument("--algorithm", type=int, choices=(1, 2), help="1: sub-cones, 2: super-cones")
    parser_solve.add_argument("--cone", choices=("conv", "dconv"), help="Cone family")
    parser_solve.add_argument("--method", choices=METHODS, help="Discretization method")
    parser_solve.add_argument("--theta", type=float, help="Rotation of the customer density")
    parser_solve.add_argument("--exclusion-threshold", type=float, help="Level of U below which customers are excluded")
    parser_solve.add_argument("--bunching-threshold", type=float, help="Level of det(Hessian U) below which customers bunch")
    parser_solve.add_argument("--out", default="out", help="Output directory")

    # stencil-stats command
    parser_stats = subparsers.add_parser("stencil-stats", help="Minimal stencil counts over random grids")
    parser_stats.add_argument("--function", choices=FUNCTIONS, default="q", help="Convex test function")
    parser_stats.add_argument("--radii", type=int, nargs="+", default=[5, 10, 20, 40], help="Disc radii in grid units")
    parser_stats.add_argument("--samples", type=int, help="Samples per radius")
    parser_stats.add_argument("--seed", type=int, help="Random seed")
    parser_stats.add_argument("--jobs", type=int, help="Worker processes")
    parser_stats.add_argument("--out", default="out", help="Output directory")

    # flip-experiment command
    parser_flip = subparsers.add_parser("flip-experiment", help="Flips to u-Delaunay triangulations")
    parser_flip.add_argument("--function", choices=FUNCTIONS, default="quadratic", help="Convex test function")
    parser_flip.add_argument("--sizes", type=int, nargs="+", default=[10, 20, 30], help="Grid sizes")
    parser_flip.add_argument("--samples", type=int, help="Samples per size")
    parser_flip.add_argument("--seed", type=int, help="Random seed")
    parser_flip.add_argument("--jobs", type=int, help="Worker processes")
    parser_flip.add_argument("--out", default="out", help="Output directory")

    # compare command
    parser_compare = subparsers.add_parser("compare", help="Compare discretization methods")
    parser_compare.add_argument("--instance", default="classical", help="Instance JSON file or preset name")
    parser_compare.add_argument("--theta", type=float, help="Rotation of the customer density")
    parser_compare.add_argument("--sizes", type=int, nargs="+", default=[10, 20, 30, 40, 50], help="Grid sizes")
    parser_compare.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS), help="Methods")
    parser_compare.add_argument("--rho", type=float, help="Candidate extension factor")
    parser_compare.add_argument("--algorithm", type=int, choices=(1, 2), help="Refinement algorithm")
    parser_compare.add_argument("--out", default="out", help="Output directory")

    # rotation-sweep command
    parser_rotation = subparsers.add_parser("rotation-sweep", help="Exclusion region against density rotation")
    parser_rotation.add_argument("--n", type=int, default=30, help="Grid size")
    parser_rotation.add_argument("--steps", type=int, default=9, help="Angles in [0, pi/4]")
    parser_rotation.add_argument("--rho", type=float, help="Candidate extension factor")
    parser_rotation.add_argument("--out", default="out", help="Output directory")

    # defect command
    parser_defect = subparsers.add_parser("defect", help="Convexity defects of grid values")
    parser_defect.add_argument("values", help="Value file (text or .npy), one value per grid point")
    parser_defect.add_argument("--n", type=int, default=3, help="Size of the n x n unit grid")
    parser_defect.add_argument("--grid", help="Grid descriptor JSON instead of --n")
    return parser


COMMANDS = {
    "solve": cmd_solve,
    "stencil-stats": cmd_stencil_stats,
    "flip-experiment": cmd_flip_experiment,
    "compare": cmd_compare,
    "rotation-sweep": cmd_rotation_sweep,
    "defect": cmd_defect,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    command = COMMANDS.get(args.command)
    if command is None:
        parser.print_help()
        return 1
    try:
        return command(args)
    except (ConvGridError, OSError) as e:
        print(f"Error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
