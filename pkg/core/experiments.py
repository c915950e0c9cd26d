"""
Monte Carlo and comparison drivers behind the command line: stencil
statistics over rotated and shifted grids, flip counts of u-Delaunay
triangulations, method comparisons on monopolist instances and the
rotation sweep of the exclusion region.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from core.delaunay import flip_to_u_delaunay, standard_delaunay
from core.errors import ConvGridError, InvalidArgumentError
from core.grid import ConvexPolygon, build_grid
from core.monopolist import classical_rotated, economic_report, solve_instance
from core.stencils import minimal_stencils_for, stencils_of_triangulation, union, worst_case_bound

logger = logging.getLogger(__name__)

FUNCTIONS = ("q", "quadratic", "max-affine", "ramp")


def sample_rng(seed, index) -> np.random.Generator:
    """Independent counter-based stream for sample `index`"""
    return np.random.Generator(np.random.Philox(key=seed).jumped(index + 1))


def make_function(name, rng):
    """Convex test function of physical coordinates (M, 2) -> (M,)"""
    if name == "q":
        return lambda x: 0.5 * (x ** 2).sum(axis=1)
    if name == "quadratic":
        L = rng.normal(size=(2, 2))
        A = L @ L.T + 0.1 * np.eye(2)
        b = rng.normal(size=2)
        return lambda x: 0.5 * np.einsum("ij,jk,ik->i", x, A, x) + x @ b
    if name == "max-affine":
        slopes = rng.normal(size=(8, 2))
        offsets = rng.normal(size=8)
        return lambda x: (x @ slopes.T + offsets).max(axis=1)
    if name == "ramp":
        c = rng.uniform(-1.0, 1.0)
        return lambda x: np.maximum(0.0, x[:, 0] - c)
    raise InvalidArgumentError(f"Unknown test function {name!r}, expected one of {', '.join(FUNCTIONS)}")


def random_placement(rng):
    """(theta, xi) with theta ~ U[0, pi/2) and xi ~ U[0, 1)^2"""
    theta = rng.uniform(0.0, 0.5 * math.pi)
    xi = tuple(rng.uniform(0.0, 1.0, size=2))
    return theta, xi


def _map(fn, tasks, jobs):
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(task) for task in tasks]


def _stencil_sample(task):
    function, radius, seed, index = task
    rng = sample_rng(seed, index)
    theta, xi = random_placement(rng)
    disc = ConvexPolygon.regular_polygon((0.0, 0.0), radius, 64)
    grid = build_grid(disc, 1.0, theta, xi)
    values = make_function(function, rng)(grid.coords)
    count = minimal_stencils_for(grid, values).count()
    return radius, index, grid.N, count, worst_case_bound(grid), theta


STENCIL_HEADER = ("radius", "sample", "N", "stencil_count", "worst_case_bound", "theta")


def stencil_stats(function="q", radii=(5, 10, 20, 40), samples=64, seed=0, jobs=1):
    """
    Minimal stencil counts of a convex function on discs of grid radius r,
    over random rotations and offsets.

    Returns:
        (rows, summary) where summary holds per-radius means, the log-log growth
        exponent of the mean count against N, and the least-squares fit of the
        mean count against N (ln N)^2
    """
    tasks = [(function, r, seed, k) for r in radii for k in range(samples)]
    rows = sorted(_map(_stencil_sample, tasks, jobs))
    summary = {"per_radius": [], "exponent": float("nan"), "fit_constant": float("nan"), "fit_r2": float("nan")}
    if not rows:
        return rows, summary
    data = np.array([row[:5] for row in rows], dtype=float)
    for r in radii:
        sel = data[data[:, 0] == r]
        summary["per_radius"].append(
            {
                "radius": r,
                "mean_N": float(sel[:, 2].mean()),
                "mean_count": float(sel[:, 3].mean()),
                "std_count": float(sel[:, 3].std()),
                "max_ratio_to_bound": float((sel[:, 3] / sel[:, 4]).max()),
            }
        )
    n = np.array([p["mean_N"] for p in summary["per_radius"]])
    v = np.array([p["mean_count"] for p in summary["per_radius"]])
    if len(n) >= 2:
        summary["exponent"] = float(np.polyfit(np.log(n), np.log(v), 1)[0])
        basis = n * np.log(n) ** 2
        c = float(basis @ v / (basis @ basis))
        residual = v - c * basis
        summary["fit_constant"] = c
        summary["fit_r2"] = float(1.0 - (residual @ residual) / max(((v - v.mean()) ** 2).sum(), 1e-300))
    return rows, summary


def _flip_sample(task):
    function, size, seed, index = task
    rng = sample_rng(seed, index)
    theta, xi = random_placement(rng)
    side = float(size - 1)
    grid = build_grid(ConvexPolygon.rectangle(0.0, 0.0, side, side), 1.0, theta, xi)
    values = make_function(function, rng)(grid.coords)
    start = standard_delaunay(grid)
    _, flips = flip_to_u_delaunay(start, values)
    v_u = minimal_stencils_for(grid, values)
    bound = union(stencils_of_triangulation(start), v_u).count()
    return size, index, grid.N, flips, v_u.count(), bound, int(flips <= bound)


FLIP_HEADER = ("size", "sample", "N", "flips", "stencil_count", "flip_bound", "within_bound")


def flip_experiment(function="quadratic", sizes=(10, 20, 30), samples=16, seed=0, jobs=1):
    """
    Flips from the standard Delaunay triangulation to the u-Delaunay one,
    against the bound #(V_T ∪ V_u).

    Returns:
        (rows, summary) with the flips/N against ln(N)^2 trend
    """
    tasks = [(function, s, seed, k) for s in sizes for k in range(samples)]
    rows = sorted(_map(_flip_sample, tasks, jobs))
    summary = {"all_within_bound": all(row[6] for row in rows), "trend": []}
    for s in sizes:
        sel = [row for row in rows if row[0] == s]
        if sel:
            N = np.mean([row[2] for row in sel])
            flips = np.mean([row[3] for row in sel])
            summary["trend"].append(
                {"size": s, "mean_N": float(N), "mean_flips": float(flips), "flips_per_N_over_ln2N": float(flips / N / math.log(N) ** 2)}
            )
    return rows, summary


def compare_methods(instance, sizes, methods, settings):
    """One MethodResult row per (n, method); failed solves give NaN rows"""
    rows = []
    for n in sizes:
        for method in methods:
            try:
                rows.append(solve_instance(instance, n, method, settings).row())
            except ConvGridError as exc:
                logger.warning("%s at n=%d failed: %s", method, n, exc)
                rows.append((method, n, 0, math.nan, math.nan, math.nan, math.nan, 0, math.nan, "failed"))
    return rows


ROTATION_HEADER = ("theta", "exclusion_count", "bunching_count", "profit")


def rotation_sweep(n, thetas, settings, exclusion_threshold=1e-4, bunching_threshold=0.07):
    """Exclusion and bunching sizes of the classical problem with rotated densities"""
    rows = []
    for theta in thetas:
        instance = classical_rotated(theta)
        result = solve_instance(instance, n, "adaptive-conv", settings)
        report = economic_report(instance, result.grid, result.values, exclusion_threshold, bunching_threshold)
        rows.append((float(theta), int(report.exclusion.sum()), int(report.bunching.sum()), report.profit))
        logger.info("theta=%.3f: excluded %d, bunching %d", theta, rows[-1][1], rows[-1][2])
    return rows


def directional_counterexample(radius=3):
    """
    Directionally convex function on [-r, r]^2 that is not convex:
    u(1,1) = 1, u(-1,0) = u(0,-1) = -1, u(x) = 2|x|^2 elsewhere.
    Only T_0^{(1,1)} is negative, with value -1.
    """
    if radius < 2:
        raise InvalidArgumentError("Counterexample needs radius >= 2")
    grid = build_grid(ConvexPolygon.rectangle(-radius, -radius, radius, radius), 1.0)
    z = grid.points
    u = 2.0 * (z ** 2).sum(axis=1)
    u[grid.index[(1, 1)]] = 1.0
    u[grid.index[(-1, 0)]] = -1.0
    u[grid.index[(0, -1)]] = -1.0
    return grid, u
