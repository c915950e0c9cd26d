"""
Sparse convex quadratic programs and a primal-dual interior point solver.

Programs read

    minimize    1/2 x'Qx + c'x + constant
    subject to  A x >= 0 (rows flagged in ``equalities``: A x = 0),
                x >= lower,  x[k] = fixed[k]

Constant terms in constraint rows are written with a fixed auxiliary
variable (homogenization); the solver eliminates fixed variables before
iterating.
"""

import json
import logging
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from core.errors import InvalidArgumentError, SolverError
from utils.file_operations import read_matrix_market, safe_write, write_matrix_market

logger = logging.getLogger(__name__)

DENSE_LIMIT = 400
STAGNATION_WINDOW = 30
# dual regularization of the equality block, in scaled units
EQUALITY_REGULARIZATION = 1e-10


@dataclass(frozen=True)
class SolverSettings:
    tol_rel: float = 1e-9
    max_iter: int = 200
    regularization: float = 1e-12


class Status(str, Enum):
    OPTIMAL = "optimal"
    INACCURATE = "inaccurate"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max-iter"


@dataclass
class Solution:
    primal: np.ndarray
    duals: np.ndarray
    bound_duals: np.ndarray
    status: Status
    kkt_residuals: dict
    iterations: int = 0
    objective: float = float("nan")
    activity: Optional[np.ndarray] = None
    equalities: Optional[np.ndarray] = None

    @property
    def optimal(self):
        return self.status == Status.OPTIMAL

    @property
    def usable(self):
        """Optimal, or stalled within 100 times the tolerance"""
        return self.status in (Status.OPTIMAL, Status.INACCURATE)

    def multiplier_strength(self) -> np.ndarray:
        """Row multipliers, by magnitude on equality rows (their sign is free)"""
        if self.equalities is None or not self.equalities.any():
            return self.duals
        return np.where(self.equalities, np.abs(self.duals), self.duals)


@dataclass
class ConvexProgram:
    """
    Quadratic objective over n variables with homogeneous sparse rows A x >= 0.

    ``lower`` holds per-variable lower bounds (-inf for none), ``fixed``
    maps variable index to value and ``equalities`` flags rows that hold
    with equality.
    """

    n: int
    quadratic: Optional[sp.spmatrix]
    linear: np.ndarray
    constraints: sp.csr_matrix
    lower: Optional[np.ndarray] = None
    fixed: dict = field(default_factory=dict)
    constant: float = 0.0
    equalities: Optional[np.ndarray] = None

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float)
        if self.quadratic is None:
            self.quadratic = sp.csr_matrix((self.n, self.n))
        self.quadratic = sp.csr_matrix(self.quadratic, dtype=float)
        self.constraints = sp.csr_matrix(self.constraints, dtype=float)
        if self.lower is None:
            self.lower = np.full(self.n, -np.inf)
        self.lower = np.asarray(self.lower, dtype=float)
        self.fixed = {int(k): float(v) for k, v in self.fixed.items()}
        if self.equalities is None:
            self.equalities = np.zeros(self.constraints.shape[0], dtype=bool)
        self.equalities = np.asarray(self.equalities, dtype=bool)

    @property
    def m(self):
        return self.constraints.shape[0]

    def validate(self):
        """
        Raises:
            InvalidArgumentError: inconsistent shapes, zero rows, or a quadratic
            part that is not symmetric positive semidefinite
        """
        n = self.n
        if self.quadratic.shape != (n, n) or self.linear.shape != (n,) or self.lower.shape != (n,):
            raise InvalidArgumentError("Objective and bounds must match the variable count")
        if self.constraints.shape[1] != n:
            raise InvalidArgumentError(f"Constraint matrix has {self.constraints.shape[1]} columns, expected {n}")
        if self.equalities.shape != (self.m,):
            raise InvalidArgumentError(f"Equality flags have shape {self.equalities.shape}, expected ({self.m},)")
        if any(not 0 <= k < n for k in self.fixed):
            raise InvalidArgumentError("Fixed variable index out of range")
        if self.m and np.any(np.diff(self.constraints.indptr) == 0):
            raise InvalidArgumentError("Constraint matrix has an empty row")
        q = self.quadratic
        scale = max(1.0, float(abs(q).max())) if q.nnz else 1.0
        if q.nnz and abs(q - q.T).max() > 1e-12 * scale:
            raise InvalidArgumentError("Quadratic part is not symmetric")
        if q.nnz and n <= 2000:
            try:
                np.linalg.cholesky(q.toarray() + 1e-10 * scale * np.eye(n))
            except np.linalg.LinAlgError as exc:
                raise InvalidArgumentError("Quadratic part is not positive semidefinite") from exc
        return self

    def with_constraints(self, constraints, equalities=None):
        constraints = sp.csr_matrix(constraints)
        if equalities is None:
            equalities = np.zeros(constraints.shape[0], dtype=bool)
        return replace(self, constraints=constraints, equalities=equalities)

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.quadratic @ x) + self.linear @ x + self.constant)

    def export(self, prefix):
        """Write <prefix>.json, <prefix>.Q.mtx and <prefix>.A.mtx"""
        write_matrix_market(f"{prefix}.Q.mtx", self.quadratic)
        write_matrix_market(f"{prefix}.A.mtx", self.constraints)
        header = {
            "n": self.n,
            "linear": self.linear.tolist(),
            "lower": [None if not np.isfinite(v) else float(v) for v in self.lower],
            "fixed": {str(k): v for k, v in sorted(self.fixed.items())},
            "constant": self.constant,
            "equalities": np.nonzero(self.equalities)[0].tolist(),
            "quadratic": os.path.basename(f"{prefix}.Q.mtx"),
            "constraints": os.path.basename(f"{prefix}.A.mtx"),
        }
        safe_write(f"{prefix}.json", json.dumps(header, indent=2))

    @classmethod
    def load(cls, prefix):
        with open(f"{prefix}.json", "r") as f:
            header = json.load(f)
        folder = os.path.dirname(prefix)
        constraints = read_matrix_market(os.path.join(folder, header["constraints"]))
        equalities = np.zeros(constraints.shape[0], dtype=bool)
        equalities[header.get("equalities", [])] = True
        return cls(
            n=header["n"],
            quadratic=read_matrix_market(os.path.join(folder, header["quadratic"])),
            linear=np.asarray(header["linear"], dtype=float),
            constraints=constraints,
            lower=np.array([-np.inf if v is None else v for v in header["lower"]], dtype=float),
            fixed={int(k): v for k, v in header["fixed"].items()},
            constant=header["constant"],
            equalities=equalities,
        )

@dataclass
class _Reduced:
    """Program over the free variables in the form Gx >= h, Ex = f"""

    free: np.ndarray
    Q: sp.csr_matrix
    c: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    row_norms: np.ndarray
    E: sp.csr_matrix
    f: np.ndarray
    eq_norms: np.ndarray
    ineq_rows: np.ndarray
    eq_rows: np.ndarray
    m_rows: int
    bound_vars: np.ndarray
    kappa: float


def _unit_rows(M, rhs):
    if M.shape[0] == 0:
        return M.tocsr(), rhs, np.ones(0)
    norms = np.sqrt(np.asarray(M.multiply(M).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    return (sp.diags(1.0 / norms) @ M).tocsr(), rhs / norms, norms


def _reduce(program: ConvexProgram) -> _Reduced:
    n = program.n
    fixed_idx = np.array(sorted(program.fixed), dtype=np.int64)
    fixed_val = np.array([program.fixed[k] for k in fixed_idx], dtype=float)
    free = np.setdiff1d(np.arange(n), fixed_idx)
    Q = program.quadratic.tocsc()
    A = program.constraints.tocsc()
    c = program.linear[free].copy()
    h = np.zeros(program.m)
    if len(fixed_idx):
        c += Q[free][:, fixed_idx] @ fixed_val
        h -= A[:, fixed_idx] @ fixed_val
    Qf = Q[free][:, free].tocsr()
    Af = A[:, free].tocsr()
    eq_rows = np.nonzero(program.equalities)[0]
    ineq_rows = np.nonzero(~program.equalities)[0]
    lower = program.lower[free]
    bound_vars = np.nonzero(np.isfinite(lower))[0]
    B = sp.csr_matrix((np.ones(len(bound_vars)), (np.arange(len(bound_vars)), bound_vars)), shape=(len(bound_vars), len(free)))
    G, h_ineq, norms = _unit_rows(sp.vstack([Af[ineq_rows], B]).tocsr(), np.concatenate([h[ineq_rows], lower[bound_vars]]))
    E, f, eq_norms = _unit_rows(Af[eq_rows], h[eq_rows])
    scale = max(1.0, float(np.abs(c).max(initial=0.0)), float(abs(Qf).max()) if Qf.nnz else 0.0)
    kappa = 1.0 / scale
    return _Reduced(
        free, (Qf * kappa).tocsr(), c * kappa, G, h_ineq, norms, E, f, eq_norms,
        ineq_rows, eq_rows, program.m, bound_vars, kappa,
    )


def _factorize(M, regularization, E=None):
    """
    Solve callable for the system [[M + reg I, E'], [E, -delta I]], raising
    the regularization on failure. Without equality rows this is M + reg I.
    """
    n = M.shape[0]
    k = 0 if E is None else E.shape[0]
    diag = M.diagonal()
    base = regularization * (1.0 + float(np.abs(diag).max(initial=0.0)))
    dense = n + k <= DENSE_LIMIT or M.nnz > 0.2 * n * n
    for attempt in range(8):
        reg = base * 100.0 ** attempt
        try:
            if k == 0:
                if dense:
                    factor = scipy.linalg.cho_factor(M.toarray() + reg * np.eye(n))
                    return lambda rhs, factor=factor: scipy.linalg.cho_solve(factor, rhs)
                return spla.factorized((M + reg * sp.identity(n)).tocsc())
            delta = max(reg, EQUALITY_REGULARIZATION)
            K = sp.bmat([[M + reg * sp.identity(n), E.T], [E, -delta * sp.identity(k)]], format="csc")
            if dense:
                lu = scipy.linalg.lu_factor(K.toarray(), check_finite=False)
                return lambda rhs, lu=lu: scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            return spla.factorized(K)
        except (np.linalg.LinAlgError, RuntimeError):
            logger.debug("Factorization failed with regularization %.1e", reg)
    raise SolverError("Normal equations could not be factorized")


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def solve(program: ConvexProgram, settings: SolverSettings = SolverSettings(), warm_start=None) -> Solution:
    """
    Primal-dual interior point method with Mehrotra predictor-corrector steps.

    Rows are scaled to unit norm and the objective to unit magnitude; the
    returned multipliers are for the original rows. Equality rows enter the
    Newton systems through a regularized augmented block, so cones whose
    inequalities have empty interior can be passed with their implicit
    equalities flagged. A warm start only sets the initial primal point;
    slacks are reset to the interior.

    Returns a Solution whose status is optimal, inaccurate (stalled within
    100 times the tolerance), infeasible or max-iter (the best iterate found).
    """
    program.validate()
    red = _reduce(program)
    nf, m, k = len(red.free), red.G.shape[0], red.E.shape[0]
    G, GT, E, ET, Q = red.G, red.G.T.tocsr(), red.E, red.E.T.tocsr(), red.Q
    x = np.zeros(nf)
    if warm_start is not None:
        x = np.asarray(warm_start, dtype=float)[red.free].copy()
    tol = settings.tol_rel
    h_scale = 1.0 + max(float(np.abs(red.h).max(initial=0.0)), float(np.abs(red.f).max(initial=0.0)))

    def residuals(x, s, z, y):
        r_d = Q @ x + red.c - GT @ z - ET @ y
        r_p = G @ x - red.h - s
        r_e = E @ x - red.f
        return r_d, r_p, r_e

    def measures(x, s, z, r_d, r_p, r_e):
        primal = max(float(np.abs(r_p).max(initial=0.0)), float(np.abs(r_e).max(initial=0.0))) / h_scale
        dual = float(np.abs(r_d).max(initial=0.0)) / (1.0 + float(np.abs(red.c).max(initial=0.0)) + float(np.abs(Q @ x).max(initial=0.0)))
        obj = 0.5 * x @ (Q @ x) + red.c @ x
        gap = float(s @ z) / (1.0 + abs(obj)) if m else 0.0
        return primal, dual, gap

    y = np.zeros(k)
    if m == 0:
        # equality-constrained (or free) QP: a few refined Newton steps
        solve_K = _factorize(Q.tocsc(), settings.regularization, E if k else None)
        empty = np.zeros(0)
        for _ in range(3):
            r_d, _, r_e = residuals(x, empty, empty, y)
            step = solve_K(np.concatenate([-r_d, -r_e]))
            x, y = x + step[:nf], y - step[nf:]
        r_d, r_p, r_e = residuals(x, empty, empty, y)
        measured = measures(x, empty, empty, r_d, r_p, r_e)
        status = Status.OPTIMAL if max(measured) <= tol else Status.MAX_ITER
        return _finish(program, red, x, empty, empty, y, status, measured, 1)

    s = np.maximum(G @ x - red.h, 1.0)
    z = np.ones(m)
    best = None
    best_merit = np.inf
    history = []
    status = Status.MAX_ITER
    iteration = 0
    for iteration in range(1, settings.max_iter + 1):
        r_d, r_p, r_e = residuals(x, s, z, y)
        primal, dual, gap = measures(x, s, z, r_d, r_p, r_e)
        merit = max(primal, dual, gap)
        if merit < best_merit:
            best_merit, best = merit, (x.copy(), s.copy(), z.copy(), y.copy(), (primal, dual, gap))
        logger.debug("iter %3d  primal %.2e  dual %.2e  gap %.2e", iteration, primal, dual, gap)
        if merit <= tol:
            status = Status.OPTIMAL
            break
        history.append(primal)
        if (
            len(history) > STAGNATION_WINDOW
            and history[-1] > 0.9 * history[-1 - STAGNATION_WINDOW]
            and history[-1] > tol
            and z.max() > 1e8
        ):
            status = Status.INFEASIBLE
            break

        mu = float(s @ z) / m
        W = z / s
        M = (Q + GT @ sp.diags(W) @ G).tocsc()
        try:
            solve_K = _factorize(M, settings.regularization, E if k else None)
        except SolverError:
            logger.warning("Interior point stopped: normal equations are singular")
            break

        def direction(r_c):
            rhs = -r_d - GT @ (W * r_p + r_c / s)
            step = solve_K(np.concatenate([rhs, -r_e]))
            dx, dy = step[:nf], -step[nf:]
            ds = G @ dx + r_p
            dz = -(r_c + z * ds) / s
            return dx, ds, dz, dy

        dx, ds, dz, dy = direction(s * z)
        alpha = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + alpha * ds) @ (z + alpha * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, ds, dz, dy = direction(s * z + ds * dz - sigma * mu)
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(z, dz)))
        if alpha < 1e-14:
            logger.debug("Interior point step vanished")
            break
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
        y = y + alpha * dy
        np.maximum(s, 1e-300, out=s)
        np.maximum(z, 1e-300, out=z)

    if status == Status.MAX_ITER and best is not None:
        x, s, z, y, measured = best
        if best_merit <= 1e2 * tol:
            logger.warning("Interior point stalled at relative KKT residual %.1e", best_merit)
            status = Status.INACCURATE
        else:
            logger.warning("Interior point did not converge (relative KKT residual %.1e)", best_merit)
    else:
        r_d, r_p, r_e = residuals(x, s, z, y)
        measured = measures(x, s, z, r_d, r_p, r_e)
    if status == Status.INFEASIBLE:
        logger.info("Program detected infeasible after %d iterations", iteration)
    return _finish(program, red, x, s, z, y, status, measured, iteration)


def _least_norm(red, y):
    """Equality multipliers with the same E'y and the least norm (dependent rows share their weight)"""
    if len(y) == 0:
        return y
    target = red.E.T @ y
    return spla.lsqr(red.E.T, target, atol=1e-14, btol=1e-14)[0]


def _finish(program, red, x_free, s_scaled, z_scaled, y_scaled, status, measured, iterations) -> Solution:
    x = np.empty(program.n)
    for k, v in program.fixed.items():
        x[k] = v
    x[red.free] = x_free
    n_ineq = len(red.ineq_rows)
    z = z_scaled / (red.kappa * red.row_norms) if len(z_scaled) else z_scaled
    duals = np.zeros(red.m_rows)
    bound_duals = np.zeros(program.n)
    activity = np.zeros(red.m_rows)
    if len(z):
        duals[red.ineq_rows] = z[:n_ineq]
        bound_duals[red.free[red.bound_vars]] = z[n_ineq:]
        # near 1 on rows that are active with a clearly positive multiplier, near 0 on inactive rows
        activity[red.ineq_rows] = z_scaled[:n_ineq] / (z_scaled[:n_ineq] + s_scaled[:n_ineq])
    if len(red.eq_rows):
        duals[red.eq_rows] = _least_norm(red, y_scaled) / (red.kappa * red.eq_norms)
        activity[red.eq_rows] = 1.0
    primal, dual, gap = measured
    return Solution(
        primal=x,
        duals=duals,
        bound_duals=bound_duals,
        status=status,
        kkt_residuals={"primal": primal, "dual": dual, "complementarity": gap},
        iterations=iterations,
        objective=program.objective(x),
        activity=activity,
        equalities=program.equalities.copy(),
    )


def active_rows(solution: Solution, threshold=1e-7) -> set:
    """Rows whose multiplier (its magnitude on equality rows) exceeds threshold * max(1, largest multiplier)"""
    if not solution.usable:
        raise InvalidArgumentError(f"Active rows need an optimal solution, status is {solution.status.value}")
    if solution.duals.size == 0:
        return set()
    strength = solution.multiplier_strength()
    cutoff = threshold * max(1.0, float(strength.max()))
    return set(np.nonzero(strength > cutoff)[0].tolist())


def active_bounds(solution: Solution, threshold=1e-7) -> set:
    """Variables whose lower-bound multiplier exceeds the same scaled cutoff"""
    if not solution.usable:
        raise InvalidArgumentError(f"Active bounds need an optimal solution, status is {solution.status.value}")
    cutoff = threshold * max(1.0, float(solution.bound_duals.max(initial=0.0)))
    return set(np.nonzero(solution.bound_duals > cutoff)[0].tolist())
