"""
Monopolist (principal-agent) instances: finite-difference discretization,
exact profit of the convex envelope, economic reports and the method
drivers used for comparisons.

A customer of type z buying product q at price pi(q) gets <q, z> - pi(q);
U(z) is the best net utility. The monopolist maximizes

    integral of <grad U, z> - U - Cost(grad U)  dmu(z)

over convex U >= 0, which is minimizing the negated energy below.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import scipy.sparse as sp

from core.constraints import Cone, assemble, convexity_defect
from core.delaunay import flip_to_u_delaunay, standard_delaunay, subgradient_cells, triangle_gradients
from core.errors import InvalidArgumentError, SolverError
from core.grid import ConvexPolygon, GridDomain, build_grid, polygon_area, rotation
from core.hull import convex_envelope, lower_hull
from core.refine import RefineSettings, run, with_cone
from core.solver import ConvexProgram, solve
from core.stencils import fixed_stencils
from utils.file_operations import read_json

logger = logging.getLogger(__name__)

GRADIENT_TOL = 1e-6
METHODS = ("adaptive-conv", "adaptive-dconv", "clrm", "of2", "of3")


class CostModel(str, Enum):
    QUADRATIC = "quadratic"
    BUNDLE = "bundle"
    NONE = "none"

    def cost(self, q) -> np.ndarray:
        """Production cost of products q (..., 2), +inf outside the domain"""
        q = np.asarray(q, dtype=float)
        inside = self.in_domain(q)
        if self == CostModel.QUADRATIC:
            value = 0.5 * (q ** 2).sum(axis=-1)
        else:
            value = np.zeros(q.shape[:-1])
        return np.where(inside, value, np.inf)

    def in_domain(self, q, tol=GRADIENT_TOL) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        if self == CostModel.QUADRATIC:
            return np.all(q >= -tol, axis=-1)
        if self == CostModel.BUNDLE:
            return np.all((q >= -tol) & (q <= 1 + tol), axis=-1)
        return np.ones(q.shape[:-1], dtype=bool)


@dataclass(frozen=True)
class MonopolistInstance:
    """
    Uniform customer density on a support made of convex pieces with
    disjoint interiors, rotated by ``rotation`` about ``center``.
    """

    support: tuple
    cost: CostModel = CostModel.QUADRATIC
    rotation: float = 0.0
    center: tuple = (1.5, 1.5)
    density: float = 1.0
    domain: Optional[ConvexPolygon] = None
    name: str = "custom"

    def __post_init__(self):
        pieces = self.support if isinstance(self.support, (tuple, list)) else (self.support,)
        object.__setattr__(self, "support", tuple(pieces))
        object.__setattr__(self, "cost", CostModel(self.cost))
        if self.density <= 0:
            raise InvalidArgumentError("Customer density must be positive")

    @property
    def pieces(self) -> tuple:
        if self.rotation == 0.0:
            return self.support
        return tuple(p.rotated(self.rotation, self.center) for p in self.support)

    def grid_domain(self) -> ConvexPolygon:
        """Given domain, or the bounding box of the (rotated) support"""
        if self.domain is not None:
            return self.domain
        boxes = np.array([p.bounding_box() for p in self.pieces])
        return ConvexPolygon.rectangle(boxes[:, 0].min(), boxes[:, 1].min(), boxes[:, 2].max(), boxes[:, 3].max())

    def contains(self, points, tol=1e-12) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.any([p.contains(points, tol) for p in self.pieces], axis=0)

    def mass_of(self, polygon) -> float:
        """Customer mass inside a convex polygon"""
        return self.density * sum(polygon_area(p.clip(polygon)) for p in self.pieces)

    def total_mass(self) -> float:
        return self.density * sum(p.area() for p in self.pieces)

    def build_grid(self, n) -> GridDomain:
        """n x n grid whose extreme points lie on the bounding box of the domain"""
        if n < 2:
            raise InvalidArgumentError("Grid size must be at least 2")
        x0, y0, x1, y1 = self.grid_domain().bounding_box()
        h = max(x1 - x0, y1 - y0) / (n - 1)
        return build_grid(self.grid_domain(), h, 0.0, (x0 / h, y0 / h))

    def to_json(self) -> dict:
        data = {
            "name": self.name,
            "density": {"pieces": [[list(v) for v in p.vertices] for p in self.support], "weight": self.density},
            "cost": self.cost.value,
            "rotation": self.rotation,
            "center": list(self.center),
        }
        if self.domain is not None:
            data["domain"] = [list(v) for v in self.domain.vertices]
        return data

    @classmethod
    def from_json(cls, data):
        try:
            density = data["density"]
            pieces = density.get("pieces") or [density["polygon"]]
            domain = data.get("domain")
            return cls(
                support=tuple(ConvexPolygon(tuple(map(tuple, p))) for p in pieces),
                cost=CostModel(data.get("cost", "quadratic")),
                rotation=float(data.get("rotation", 0.0)),
                center=tuple(data.get("center", (1.5, 1.5))),
                density=float(density.get("weight", 1.0)),
                domain=ConvexPolygon(tuple(map(tuple, domain))) if domain else None,
                name=data.get("name", "custom"),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidArgumentError(f"Malformed instance description: {exc}") from exc


def load_instance(path, theta=None) -> MonopolistInstance:
    instance = MonopolistInstance.from_json(read_json(path))
    if theta is not None:
        instance = replace(instance, rotation=float(theta))
    return instance


def classical() -> MonopolistInstance:
    return MonopolistInstance((ConvexPolygon.rectangle(1, 1, 2, 2),), CostModel.QUADRATIC, name="classical")


def classical_rotated(theta) -> MonopolistInstance:
    """Uniform density on [1, 2]^2 rotated about its center"""
    return MonopolistInstance(
        (ConvexPolygon.rectangle(1, 1, 2, 2),), CostModel.QUADRATIC, rotation=theta, name=f"classical_rotated({theta:g})"
    )


def bundles_square() -> MonopolistInstance:
    return MonopolistInstance((ConvexPolygon.rectangle(0, 0, 1, 1),), CostModel.BUNDLE, center=(0.5, 0.5), name="bundles")


def bundles_triangle() -> MonopolistInstance:
    """Density on {x + y/2 >= 1} inside the unit square"""
    support = ConvexPolygon(((1.0, 0.0), (1.0, 1.0), (0.5, 1.0)))
    return MonopolistInstance(
        (support,), CostModel.BUNDLE, center=(0.5, 0.5), domain=ConvexPolygon.rectangle(0, 0, 1, 1), name="bundles_triangle"
    )


def bundles_kite() -> MonopolistInstance:
    """Density on {x + y/2 >= 1 or x/2 + y >= 1} inside the unit square, split at (2/3, 2/3)"""
    c = (2.0 / 3.0, 2.0 / 3.0)
    pieces = (
        ConvexPolygon(((1.0, 0.0), (1.0, 1.0), c)),
        ConvexPolygon((c, (1.0, 1.0), (0.0, 1.0))),
    )
    return MonopolistInstance(
        pieces, CostModel.BUNDLE, center=(0.5, 0.5), domain=ConvexPolygon.rectangle(0, 0, 1, 1), name="bundles_kite"
    )


PRESETS = {
    "classical": classical,
    "bundles": bundles_square,
    "bundles_triangle": bundles_triangle,
    "bundles_kite": bundles_kite,
}


def bundles_square_solution(points) -> np.ndarray:
    """max{0, x - a, y - a, x + y - b} with a = 2/3, b = (4 - sqrt 3)/2"""
    a, b = 2.0 / 3.0, (4.0 - math.sqrt(3.0)) / 2.0
    x, y = np.asarray(points, dtype=float).T
    return np.maximum.reduce([np.zeros_like(x), x - a, y - a, x + y - b])


def bundles_square_profit() -> float:
    a, b = 2.0 / 3.0, (4.0 - math.sqrt(3.0)) / 2.0
    return 2 * a * (1 - a) * (b - a) + b * ((1 - (b - a)) ** 2 - 0.5 * (2 * a - b) ** 2)


def bundles_triangle_solution(points) -> np.ndarray:
    """max{0, x + y/2 - 1, x + y - b} with b = 1 + 1/(2 sqrt 3)"""
    b = 1.0 + 1.0 / (2.0 * math.sqrt(3.0))
    x, y = np.asarray(points, dtype=float).T
    return np.maximum.reduce([np.zeros_like(x), x + 0.5 * y - 1.0, x + y - b])


def bundles_triangle_profit() -> float:
    # (1, 1/2) sold at price 1 below y = 1/sqrt 3, (1, 1) at price b above
    b = 1.0 + 1.0 / (2.0 * math.sqrt(3.0))
    return 1.0 / 12.0 + b / 6.0


def bundles_kite_conjecture(points) -> np.ndarray:
    """Conjectured optimum with lottery tickets (1, 1/2) and (1/2, 1), b = 1 + 1/(3 sqrt 2)"""
    b = 1.0 + 1.0 / (3.0 * math.sqrt(2.0))
    x, y = np.asarray(points, dtype=float).T
    return np.maximum.reduce([np.zeros_like(x), x + 0.5 * y - 1.0, 0.5 * x + y - 1.0, x + y - b])


def quadrature_weights(instance: MonopolistInstance, grid: GridDomain) -> np.ndarray:
    """mu_x: customer mass of the h-square cell around each grid point"""
    half = 0.5 * grid.h
    corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]]) @ rotation(grid.theta).T
    coords = grid.coords
    cells = coords[:, None, :] + corners[None, :, :]
    weights = np.zeros(grid.N)
    full = np.all(instance.contains(cells.reshape(-1, 2)).reshape(grid.N, 4), axis=1)
    weights[full] = instance.density * grid.h ** 2
    for i in np.nonzero(~full)[0]:
        weights[i] = instance.mass_of(cells[i])
    return weights


def gradient_operators(grid: GridDomain):
    """
    Sparse (Gx, Gy): physical gradient by forward differences along the
    lattice axes, backward at the far boundary.
    """
    z = grid.points
    mats = []
    for axis in ((1, 0), (0, 1)):
        fwd = grid.indices_of(z + axis)
        bwd = grid.indices_of(z - axis)
        rows, cols, vals = [], [], []
        for i in range(grid.N):
            if fwd[i] >= 0:
                rows += [i, i]
                cols += [fwd[i], i]
            elif bwd[i] >= 0:
                rows += [i, i]
                cols += [i, bwd[i]]
            else:
                continue
            vals += [1.0, -1.0]
        mats.append(sp.csr_matrix((vals, (rows, cols)), shape=(grid.N, grid.N)))
    d1, d2 = mats
    c, s = math.cos(grid.theta), math.sin(grid.theta)
    gx = ((c * d1 - s * d2) / grid.h).tocsr()
    gy = ((s * d1 + c * d2) / grid.h).tocsr()
    return gx, gy


def _unique_rows(matrix) -> sp.csr_matrix:
    """Drop zero rows and exact duplicates"""
    matrix = sp.csr_matrix(matrix)
    seen, keep = set(), []
    for r in range(matrix.shape[0]):
        start, end = matrix.indptr[r], matrix.indptr[r + 1]
        order = np.argsort(matrix.indices[start:end])
        key = (tuple(matrix.indices[start:end][order]), tuple(np.round(matrix.data[start:end][order], 12)))
        if end > start and key not in seen:
            seen.add(key)
            keep.append(r)
    return matrix[keep]


def discretize(instance: MonopolistInstance, grid: GridDomain) -> ConvexProgram:
    """
    Negated profit as a convex program in the grid values (plus, for the
    bundle cost, one auxiliary variable fixed to 1).

    Raises:
        InvalidArgumentError: unsupported cost model
    """
    if instance.cost == CostModel.NONE:
        raise InvalidArgumentError("Cost model 'none' cannot be discretized")
    mu = quadrature_weights(instance, grid)
    if mu.sum() <= 0:
        raise InvalidArgumentError("Customer support does not meet the grid")
    gx, gy = gradient_operators(grid)
    z = grid.coords
    n = grid.N
    linear = mu - gx.T @ (mu * z[:, 0]) - gy.T @ (mu * z[:, 1])
    G = _unique_rows(sp.vstack([gx, gy]))
    if instance.cost == CostModel.QUADRATIC:
        M = sp.diags(mu)
        return ConvexProgram(
            n=n,
            quadratic=(gx.T @ M @ gx + gy.T @ M @ gy).tocsr(),
            linear=linear,
            constraints=G,
            lower=np.zeros(n),
        )
    # 0 <= grad u <= 1, with t fixed to 1 standing for the constant
    t_col = sp.csr_matrix(np.ones((G.shape[0], 1)))
    upper = sp.hstack([-G, t_col])
    lower_rows = sp.hstack([G, sp.csr_matrix((G.shape[0], 1))])
    bounds = np.zeros(n + 1)
    bounds[n] = -np.inf
    return ConvexProgram(
        n=n + 1,
        quadratic=None,
        linear=np.concatenate([linear, [0.0]]),
        constraints=sp.vstack([lower_rows, upper]).tocsr(),
        lower=bounds,
        fixed={n: 1.0},
    )


@dataclass
class MonopolistEnergy:
    """Energy adapter for the refinement loops"""

    instance: MonopolistInstance

    def program(self, grid: GridDomain) -> ConvexProgram:
        return discretize(self.instance, grid)


def _hull_facets(grid, u):
    """Lower-hull triangles with physical gradient and intercept: U(x) = <g, x> + c"""
    hull = lower_hull(grid.points, np.asarray(u, dtype=float))
    rot = rotation(grid.theta)
    lattice_grad = hull.planes[:, :2]
    grads = lattice_grad @ rot.T / grid.h
    intercepts = hull.planes[:, 2] - lattice_grad @ np.asarray(grid.xi)
    return hull.triangles, grads, intercepts


def exact_profit(instance: MonopolistInstance, grid: GridDomain, u) -> float:
    """
    Profit of the largest convex function below u, integrated exactly per facet.

    On a facet with U(x) = <g, x> + c the integrand <g, x> - U - Cost(g) is
    the constant -c - Cost(g). Returns -inf when a facet carrying customers has
    its gradient outside the cost domain.
    """
    triangles, grads, intercepts = _hull_facets(grid, u)
    coords = grid.coords
    total = 0.0
    for tri, g, c in zip(triangles, grads, intercepts):
        mass = instance.mass_of(coords[tri])
        if mass <= 0:
            continue
        if not instance.cost.in_domain(g):
            logger.warning("Gradient %s outside the cost domain on a facet of mass %.3g", g, mass)
            return -math.inf
        total += mass * (-c - float(instance.cost.cost(g)))
    return total


@dataclass
class EconomicReport:
    profit: float
    envelope: np.ndarray
    exclusion: np.ndarray
    bunching: np.ndarray
    det_estimates: np.ndarray
    sales: np.ndarray
    sales_mass: np.ndarray
    prices: np.ndarray
    margins: np.ndarray
    thresholds: dict = field(default_factory=dict)
    triangulation: Optional[object] = None
    cells: Optional[object] = None

    def to_json(self) -> dict:
        return {
            "profit": self.profit,
            "exclusion_count": int(self.exclusion.sum()),
            "bunching_count": int(self.bunching.sum()),
            "exclusion": np.nonzero(self.exclusion)[0].tolist(),
            "bunching": np.nonzero(self.bunching)[0].tolist(),
            "sales": [
                {"product": g.tolist(), "mass": float(m), "price": float(p), "margin": float(r)}
                for g, m, p, r in zip(self.sales, self.sales_mass, self.prices, self.margins)
            ],
            "thresholds": self.thresholds,
        }


def economic_report(
    instance: MonopolistInstance, grid: GridDomain, u, exclusion_threshold=1e-4, bunching_threshold=0.07
) -> EconomicReport:
    """
    Exclusion and bunching masks, product sales and margins of a solution.

    Masks are restricted to grid points inside the customer support; the
    bunching mask uses the subgradient-cell estimate of det(Hessian U).
    """
    U = convex_envelope(grid, u)
    T, _ = flip_to_u_delaunay(standard_delaunay(grid), U)
    cells = subgradient_cells(grid, U, T)
    dets = cells.estimates_on_grid(grid.N)
    inside = instance.contains(grid.coords)
    exclusion = inside & (U < exclusion_threshold)
    with np.errstate(invalid="ignore"):
        bunching = inside & ~exclusion & ~np.isnan(dets) & (dets < bunching_threshold)

    coords = grid.coords
    grads = triangle_gradients(grid, T, U)
    sales, masses, prices, margins = [], [], [], []
    for tri, g in grads.items():
        mass = instance.mass_of(coords[list(tri)])
        if mass <= 0:
            continue
        a = tri[0]
        price = float(g @ coords[a] - U[a])
        sales.append(g)
        masses.append(mass)
        prices.append(price)
        margins.append(price - float(instance.cost.cost(g)))
    sales = np.asarray(sales).reshape(-1, 2)
    masses = np.asarray(masses)
    margins = np.asarray(margins)
    profit = float(masses @ margins) if len(masses) else 0.0
    return EconomicReport(
        profit=profit,
        envelope=U,
        exclusion=exclusion,
        bunching=bunching,
        det_estimates=dets,
        sales=sales,
        sales_mass=masses,
        prices=np.asarray(prices),
        margins=margins,
        thresholds={"exclusion": exclusion_threshold, "bunching": bunching_threshold},
        triangulation=T,
        cells=cells,
    )


def _fixed_width(method) -> int:
    return int(method[2:])


def baseline_systems(instance, grid, method, settings: RefineSettings = RefineSettings()) -> ConvexProgram:
    """
    Full convex program of a method: CLRM (all of Conv(X)), OF_k (S forms on
    the fixed stencils V_k) or an adaptive refinement's final system.
    """
    energy = MonopolistEnergy(instance)
    if method == "clrm":
        cone = Cone.full_conv()
    elif method in ("of2", "of3"):
        cone = Cone.dconv_prime_v(fixed_stencils(grid, _fixed_width(method)))
    elif method in ("adaptive-conv", "adaptive-dconv"):
        family = "conv" if method == "adaptive-conv" else "dconv"
        result = run(energy, grid, _with_family(settings, family))
        return with_cone(energy.program(grid), result.system)[0]
    else:
        raise InvalidArgumentError(f"Unknown method {method!r}, expected one of {', '.join(METHODS)}")
    return with_cone(energy.program(grid), assemble(grid, cone))[0]


def _with_family(settings, family):
    return replace(settings, cone_family=family)


@dataclass
class MethodResult:
    method: str
    n: int
    grid: GridDomain
    values: np.ndarray
    constraint_count: int
    objective: float
    full_defect: float
    directional_defect: float
    profit: float
    wall_time: float
    iterations: int = 1
    status: str = "optimal"
    run: Optional[object] = None

    ROW_HEADER = (
        "method", "n", "constraints", "full_defect", "directional_defect", "profit", "objective", "iterations",
        "wall_time", "status",
    )

    def row(self):
        return (
            self.method, self.n, self.constraint_count, self.full_defect, self.directional_defect,
            self.profit, self.objective, self.iterations, self.wall_time, self.status,
        )


def solve_instance(instance, n, method="adaptive-conv", settings: RefineSettings = RefineSettings()) -> MethodResult:
    """Solve an instance on an n x n grid with one method and measure the result"""
    grid = instance.build_grid(n)
    started = time.perf_counter()
    energy = MonopolistEnergy(instance)
    run_result = None
    if method in ("adaptive-conv", "adaptive-dconv"):
        family = "conv" if method == "adaptive-conv" else "dconv"
        run_result = run(energy, grid, _with_family(settings, family))
        solution, count, iterations = run_result.solution, len(run_result.system), len(run_result.iterations)
    else:
        program = baseline_systems(instance, grid, method, settings)
        solution = solve(program, settings.solver)
        count = program.m - energy.program(grid).m
        iterations = 1
        if not solution.usable:
            raise SolverError(f"{method} solve ended with status {solution.status.value}", solution)
    values = solution.primal[: grid.N]
    elapsed = time.perf_counter() - started
    logger.info("%s n=%d: %d constraints, objective %.10g, %.2fs", method, n, count, solution.objective, elapsed)
    return MethodResult(
        method=method,
        n=n,
        grid=grid,
        values=values,
        constraint_count=count,
        objective=solution.objective,
        full_defect=convexity_defect(grid, values, "full"),
        directional_defect=convexity_defect(grid, values, "directional"),
        profit=exact_profit(instance, grid, values),
        wall_time=elapsed,
        iterations=iterations,
        status=solution.status.value,
        run=run_result,
    )
