"""
Adaptive stencil refinement.

Both loops start from the minimal stencils and grow V until the minimizer
over the working cone is the minimizer over Conv(X) (or DConv(X)):

  subcones   solve over Conv(V) and add candidates whose P rows carry a
             positive multiplier
  supercones solve over Conv'(V) and add candidates whose P form is
             negative at the solution
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
import scipy.sparse as sp

from core.constraints import Cone, ConstraintSystem, FormKind, assemble, convexity_defect
from core.errors import InvalidArgumentError, SolverError
from core.grid import GridDomain
from core.lattice import lex_positive
from core.solver import ConvexProgram, Solution, SolverSettings, solve
from core.stencils import StencilFamily, minimal_stencils, refine
from utils.file_operations import write_csv

logger = logging.getLogger(__name__)

CONE_FAMILIES = ("conv", "dconv")
ACTIVITY_THRESHOLD = 0.9


class Energy(Protocol):
    """Objective whose first N variables are the grid values"""

    def program(self, grid: GridDomain) -> ConvexProgram:
        ...


@dataclass
class ProjectionEnergy:
    """1/2 sum_x w_x (u_x - b_x)^2"""

    target: np.ndarray
    weights: Optional[np.ndarray] = None

    def program(self, grid: GridDomain) -> ConvexProgram:
        b = np.asarray(self.target, dtype=float)
        if b.shape != (grid.N,):
            raise InvalidArgumentError(f"Projection target has shape {b.shape}, expected ({grid.N},)")
        w = np.ones(grid.N) if self.weights is None else np.asarray(self.weights, dtype=float)
        return ConvexProgram(
            n=grid.N,
            quadratic=sp.diags(w).tocsr(),
            linear=-w * b,
            constraints=sp.csr_matrix((0, grid.N)),
            constant=0.5 * float(w @ (b * b)),
        )


@dataclass(frozen=True)
class RefineSettings:
    rho: float = 1.5
    max_outer: int = 50
    multiplier_threshold: float = 1e-7
    violation_tol: float = 1e-9
    cone_family: str = "conv"
    algorithm: int = 2
    solver: SolverSettings = SolverSettings()

    def __post_init__(self):
        if self.rho < 1:
            raise InvalidArgumentError(f"rho must be >= 1, got {self.rho}")
        if self.cone_family not in CONE_FAMILIES:
            raise InvalidArgumentError(f"Unknown cone family {self.cone_family!r}")
        if self.algorithm not in (1, 2):
            raise InvalidArgumentError(f"Unknown refinement algorithm {self.algorithm}")


@dataclass
class IterationRecord:
    iteration: int
    stencil_count: int
    constraint_count: int
    objective: float
    added: int
    wall_time: float


@dataclass
class RefinementRun:
    grid: GridDomain
    stencils: StencilFamily
    solution: Solution
    system: ConstraintSystem
    converged: bool
    algorithm: int
    iterations: list = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return self.solution.primal[: self.grid.N]

    @property
    def objective(self) -> float:
        return self.solution.objective

    TRACE_HEADER = ("iteration", "stencil_count", "constraint_count", "objective", "violations", "wall_time")

    def trace_rows(self):
        return [
            (r.iteration, r.stencil_count, r.constraint_count, r.objective, r.added, r.wall_time)
            for r in self.iterations
        ]

    def write_trace(self, path, meta=None):
        write_csv(path, self.TRACE_HEADER, self.trace_rows(), meta)


def with_cone(program: ConvexProgram, system: ConstraintSystem):
    """
    Energy program plus the cone rows (padded over auxiliary variables), with
    the implicit equalities of the cone flagged; returns (program, first cone row)
    """
    extra = program.n - system.matrix.shape[1]
    if extra < 0:
        raise InvalidArgumentError("Energy has fewer variables than grid points")
    rows = sp.hstack([system.matrix, sp.csr_matrix((len(system), extra))]).tocsr()
    start = program.m
    equalities = np.concatenate([program.equalities, system.implicit_equalities])
    return program.with_constraints(sp.vstack([program.constraints, rows]).tocsr(), equalities), start


def solve_over(energy: Energy, grid: GridDomain, cone: Cone, settings=SolverSettings(), warm_start=None):
    """
    Minimize the energy over one cone.

    Returns:
        (Solution, ConstraintSystem, first cone row)

    Raises:
        SolverError: the solver did not reach an optimal point
    """
    system = assemble(grid, cone)
    program, start = with_cone(energy.program(grid), system)
    solution = solve(program, settings, warm_start=warm_start)
    if not solution.usable:
        raise SolverError(
            f"Solve over {cone.describe()} ended with status {solution.status.value}", solution
        )
    return solution, system, start


def _offsets_of_row(V, i, kind, offset, rho):
    if kind == FormKind.P.value:
        return [offset]
    # an H row stands for the candidates e and -e of the same line
    return [e for e in V.candidates(i, rho) if lex_positive(e) == offset]


def _check_inputs(grid, settings):
    if settings.cone_family not in CONE_FAMILIES:
        raise InvalidArgumentError(f"Unknown cone family {settings.cone_family!r}")
    if not grid.has_interior():
        raise InvalidArgumentError("Refinement needs a grid with nonempty interior")


def run_subcones(energy: Energy, grid: GridDomain, settings: RefineSettings = RefineSettings()) -> RefinementRun:
    """
    Refinement over the growing sub-cones Conv(V_i) (or DConv(V_i)).

    Candidates are added where the multiplier of their P row (H row for the
    DConv family) exceeds multiplier_threshold times the largest multiplier.
    Rows that vanish on the whole sub-cone are solved as equalities and
    count by the magnitude of their multiplier.
    """
    _check_inputs(grid, settings)
    V = minimal_stencils(grid)
    build = Cone.conv_v if settings.cone_family == "conv" else Cone.dconv_v
    kind = FormKind.P.value if settings.cone_family == "conv" else FormKind.H.value
    records, warm = [], None
    converged = False
    for iteration in range(1, settings.max_outer + 1):
        started = time.perf_counter()
        solution, system, start = solve_over(energy, grid, build(V, settings.rho), settings.solver, warm)
        warm = solution.primal
        strength = solution.multiplier_strength()[start:]
        cutoff = settings.multiplier_threshold * max(1.0, float(strength.max(initial=0.0)))
        # rows with zero slack and zero multiplier have activity near 1/2; equality rows have 1
        active = (strength > cutoff) & (solution.activity[start:] > ACTIVITY_THRESHOLD)
        additions = []
        for r in np.nonzero((system.kinds == kind) & active)[0]:
            i = int(system.bases[r])
            offset = (int(system.offsets[r, 0]), int(system.offsets[r, 1]))
            additions.extend((i, e) for e in _offsets_of_row(V, i, kind, offset, settings.rho))
        records.append(
            IterationRecord(iteration, V.count(), len(system), solution.objective, len(additions), time.perf_counter() - started)
        )
        logger.info(
            "subcones %d: #V=%d rows=%d objective=%.10g active=%d",
            iteration, V.count(), len(system), solution.objective, len(additions),
        )
        refined = refine(V, additions) if additions else V
        if refined is V:
            converged = True
            break
        V = refined
    if not converged:
        logger.warning("Sub-cone refinement did not stabilize after %d iterations", settings.max_outer)
    return RefinementRun(grid, V, solution, system, converged, 1, records)


def violated_candidates(V: StencilFamily, u, cone_family="conv", rho=1.0, tol=1e-9) -> list:
    """(x, e) with e a candidate at x whose P form (H for DConv) is below -tol * max(1, |u|_inf)"""
    u = np.asarray(u, dtype=float)
    threshold = -tol * max(1.0, float(np.abs(u).max(initial=0.0)))
    cone = Cone.conv_v(V, rho) if cone_family == "conv" else Cone.dconv_v(V, rho)
    kind = FormKind.P.value if cone_family == "conv" else FormKind.H.value
    system = assemble(V.grid, cone)
    values = system.evaluate(u)
    found = []
    for r in np.nonzero((system.kinds == kind) & (values < threshold))[0]:
        i = int(system.bases[r])
        offset = (int(system.offsets[r, 0]), int(system.offsets[r, 1]))
        found.extend((i, e) for e in _offsets_of_row(V, i, kind, offset, rho))
    return found


def run_supercones(energy: Energy, grid: GridDomain, settings: RefineSettings = RefineSettings()) -> RefinementRun:
    """
    Refinement over the shrinking super-cones Conv'(V_i) (or DConv'(V_i)).

    Candidates of H_rho(x) with P_x^e(u) < -violation_tol * scale are added
    (H_x^e for the DConv family) until none is violated.
    """
    _check_inputs(grid, settings)
    V = minimal_stencils(grid)
    build = Cone.conv_prime_v if settings.cone_family == "conv" else Cone.dconv_prime_v
    records, warm = [], None
    converged = False
    for iteration in range(1, settings.max_outer + 1):
        started = time.perf_counter()
        solution, system, _ = solve_over(energy, grid, build(V), settings.solver, warm)
        warm = solution.primal
        u = solution.primal[: grid.N]
        additions = violated_candidates(V, u, settings.cone_family, settings.rho, settings.violation_tol)
        records.append(
            IterationRecord(iteration, V.count(), len(system), solution.objective, len(additions), time.perf_counter() - started)
        )
        logger.info(
            "supercones %d: #V=%d rows=%d objective=%.10g violated=%d",
            iteration, V.count(), len(system), solution.objective, len(additions),
        )
        if not additions:
            converged = True
            break
        V = refine(V, additions)
    if not converged:
        logger.warning("Super-cone refinement did not stabilize after %d iterations", settings.max_outer)
    return RefinementRun(grid, V, solution, system, converged, 2, records)


def run(energy: Energy, grid: GridDomain, settings: RefineSettings = RefineSettings()) -> RefinementRun:
    """Dispatch on settings.algorithm"""
    if settings.algorithm == 1:
        return run_subcones(energy, grid, settings)
    return run_supercones(energy, grid, settings)


def certificate(run_result: RefinementRun, cone_family="conv") -> float:
    """Convexity defect of the final values (full mode for Conv, directional for DConv)"""
    mode = "full" if cone_family == "conv" else "directional"
    return convexity_defect(run_result.grid, run_result.values, mode)
