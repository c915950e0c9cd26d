"""
Second-order linear forms (S, T, P, H) and the constraint systems of the
discrete convexity cones.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Iterator, Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from core.errors import InvalidArgumentError, SolverError, StencilValidationError
from core.grid import GridDomain
from core.lattice import (
    Vector,
    add,
    angle_key,
    as_vector,
    irreducible_box,
    is_irreducible,
    lex_positive,
    norm_sq,
    parents,
    sub,
)

logger = logging.getLogger(__name__)


class FormKind(str, Enum):
    S = "S"
    T = "T"
    P = "P"
    H = "H"


S_WEIGHTS = (1, -2, 1)
T_WEIGHTS = (1, 1, 1, -3)
P_WEIGHTS = (1, -1, -1, 1)
H_WEIGHTS = (1, 1, -1, -1, -1, -1, 2)


@dataclass(frozen=True)
class LinearForm:
    """
    Weighted sum of Dirac masses at lattice sites.

    Sites are lattice coordinates rather than point ordinals, so a form can be
    built without a grid; ``GridDomain.is_supported`` tells whether it lives on X.
    """

    kind: FormKind
    base: Vector
    offset: Vector
    sites: tuple
    weights: tuple

    def terms(self) -> dict:
        return combine(self)

    def normalized(self) -> tuple:
        """Sorted (site, weight) pairs, repeated sites merged and zeros dropped"""
        return tuple(sorted(combine(self).items()))

    def __add__(self, other):
        if isinstance(other, LinearForm):
            other = combine(other)
        if not isinstance(other, dict):
            return NotImplemented
        total = Counter(combine(self))
        total.update(other)
        return {site: w for site, w in total.items() if w != 0}

    __radd__ = __add__

    def apply(self, fn) -> float:
        """Value on a function given as a callable of lattice coordinates"""
        return sum(w * fn(site) for site, w in zip(self.sites, self.weights))

    def evaluate(self, grid: GridDomain, u) -> float:
        idx = grid.indices_of(np.asarray(self.sites))
        if np.any(idx < 0):
            raise InvalidArgumentError(f"{self.kind.value} form at {self.base} is not supported on the grid")
        return float(np.dot(self.weights, np.asarray(u, dtype=float)[idx]))


def combine(*forms, coefficients=None) -> dict:
    """Merged site -> weight map of a linear combination of forms (zeros dropped)"""
    coefficients = coefficients or [1] * len(forms)
    total = Counter()
    for c, form in zip(coefficients, forms):
        for site, w in zip(form.sites, form.weights):
            total[site] += c * w
    return {site: w for site, w in total.items() if w != 0}


def _check_irreducible(e):
    e = as_vector(e)
    if not is_irreducible(e):
        raise InvalidArgumentError(f"{e} is not irreducible")
    return e


def form_S(x, e) -> LinearForm:
    """S_x^e(u) = u(x+e) - 2u(x) + u(x-e)"""
    x, e = tuple(x), _check_irreducible(e)
    return LinearForm(FormKind.S, x, e, (add(x, e), x, sub(x, e)), S_WEIGHTS)


def form_T(x, e) -> LinearForm:
    """T_x^e(u) = u(x+e) + u(x-f) + u(x-g) - 3u(x)"""
    x, e = tuple(x), _check_irreducible(e)
    f, g = parents(e)
    return LinearForm(FormKind.T, x, e, (add(x, e), sub(x, f), sub(x, g), x), T_WEIGHTS)


def form_P(x, e) -> LinearForm:
    """P_x^e(u) = u(x+e) - u(x+f) - u(x+g) + u(x)"""
    x, e = tuple(x), _check_irreducible(e)
    f, g = parents(e)
    return LinearForm(FormKind.P, x, e, (add(x, e), add(x, f), add(x, g), x), P_WEIGHTS)


def form_H(x, e) -> LinearForm:
    """H_x^e = P_x^e + P_x^{-e}; the parents of -e are (-f, -g)"""
    x, e = tuple(x), _check_irreducible(e)
    f, g = parents(e)
    sites = (add(x, e), sub(x, e), add(x, f), add(x, g), sub(x, f), sub(x, g), x)
    return LinearForm(FormKind.H, x, e, sites, H_WEIGHTS)


FORM_BUILDERS = {FormKind.S: form_S, FormKind.T: form_T, FormKind.P: form_P, FormKind.H: form_H}


class ConeKind(str, Enum):
    FULL_CONV = "FullConv"
    CONV_V = "ConvV"
    CONV_PRIME_V = "ConvPrimeV"
    DCONV_X = "DConvX"
    DCONV_V = "DConvV"
    DCONV_PRIME_V = "DConvPrimeV"


@dataclass(frozen=True)
class Cone:
    """Which cone a constraint system describes, and over which stencils"""

    kind: ConeKind
    stencils: Optional[object] = None
    rho: float = 1.0

    @classmethod
    def full_conv(cls):
        return cls(ConeKind.FULL_CONV)

    @classmethod
    def dconv_x(cls):
        return cls(ConeKind.DCONV_X)

    @classmethod
    def conv_v(cls, stencils, rho=1.0):
        return cls(ConeKind.CONV_V, stencils, rho)

    @classmethod
    def conv_prime_v(cls, stencils):
        return cls(ConeKind.CONV_PRIME_V, stencils)

    @classmethod
    def dconv_v(cls, stencils, rho=1.0):
        return cls(ConeKind.DCONV_V, stencils, rho)

    @classmethod
    def dconv_prime_v(cls, stencils):
        return cls(ConeKind.DCONV_PRIME_V, stencils)

    @property
    def needs_stencils(self):
        return self.kind not in (ConeKind.FULL_CONV, ConeKind.DCONV_X)

    def describe(self) -> str:
        if not self.needs_stencils:
            return self.kind.value
        return f"{self.kind.value}(#V={self.stencils.count()}, rho={self.rho:g})"


@dataclass
class ConstraintSystem:
    """Rows are linear forms, columns are grid points; feasibility is matrix @ u >= 0"""

    grid: GridDomain
    cone: Cone
    kinds: np.ndarray
    bases: np.ndarray
    offsets: np.ndarray
    matrix: sp.csr_matrix

    def __len__(self):
        return self.matrix.shape[0]

    def evaluate(self, u) -> np.ndarray:
        return self.matrix @ np.asarray(u, dtype=float)

    def rows_of_kind(self, *kinds) -> np.ndarray:
        return np.nonzero(np.isin(self.kinds, [FormKind(k).value for k in kinds]))[0]

    def counts(self) -> dict:
        return {k.value: int(np.count_nonzero(self.kinds == k.value)) for k in FormKind}

    def form(self, r) -> LinearForm:
        builder = FORM_BUILDERS[FormKind(self.kinds[r])]
        return builder(self.grid.point(self.bases[r]), tuple(int(c) for c in self.offsets[r]))

    def forms(self) -> Iterator[LinearForm]:
        for r in range(len(self)):
            yield self.form(r)

    def key(self, r):
        return str(self.kinds[r]), int(self.bases[r]), (int(self.offsets[r, 0]), int(self.offsets[r, 1]))

    @cached_property
    def implicit_equalities(self) -> np.ndarray:
        """
        Rows that vanish on the whole cone.

        Only P and H rows can: q is strictly positive on S and T rows. One LP
        finds them: maximize sum t_r over the P/H rows subject to row_r(u) >= t_r,
        0 <= t_r <= 1 and the other rows >= 0. The cone is homogeneous, so t_r
        reaches 1 exactly on the rows that are positive somewhere on it.
        """
        flags = np.zeros(len(self), dtype=bool)
        candidates = np.nonzero(np.isin(self.kinds, [FormKind.P.value, FormKind.H.value]))[0]
        if len(candidates) == 0:
            return flags
        n, k = self.matrix.shape[1], len(candidates)
        pick = sp.csr_matrix((np.ones(k), (candidates, np.arange(k))), shape=(len(self), k))
        result = linprog(
            np.concatenate([np.zeros(n), -np.ones(k)]),
            A_ub=sp.hstack([-self.matrix, pick]).tocsc(),
            b_ub=np.zeros(len(self)),
            bounds=[(None, None)] * n + [(0.0, 1.0)] * k,
            method="highs",
        )
        if result.status != 0:
            raise SolverError(f"Implicit equality search over {self.cone.describe()} failed: {result.message}")
        flags[candidates] = result.x[n:] < 0.5
        logger.debug("%s: %d implicit equalities among %d P/H rows", self.cone.describe(), flags.sum(), k)
        return flags

    def to_json_rows(self) -> list:
        rows = []
        for form in self.forms():
            rows.append(
                {
                    "kind": form.kind.value,
                    "base": list(form.base),
                    "offset": list(form.offset),
                    "sites": [list(s) for s in form.sites],
                    "weights": list(form.weights),
                }
            )
        return rows


class _SystemBuilder:
    """Accumulates rows block by block, then builds the sparse matrix once"""

    def __init__(self, grid):
        self.grid = grid
        self._blocks = []
        self._pending = {}

    def add_block(self, kind, e, bases, sites, weights):
        self._blocks.append((kind, np.broadcast_to(np.asarray(e), (len(bases), 2)), bases, sites, weights))

    def add(self, kind, i, e, sites):
        bases, offsets, rows = self._pending.setdefault(kind, ([], [], []))
        bases.append(i)
        offsets.append(e)
        rows.append(sites)

    def build(self, cone) -> ConstraintSystem:
        weights = {FormKind.S: S_WEIGHTS, FormKind.T: T_WEIGHTS, FormKind.P: P_WEIGHTS, FormKind.H: H_WEIGHTS}
        for kind in FormKind:
            if kind in self._pending:
                bases, offsets, rows = self._pending.pop(kind)
                self.add_block(
                    kind,
                    np.asarray(offsets, dtype=np.int64),
                    np.asarray(bases, dtype=np.int64),
                    np.asarray(rows, dtype=np.int64),
                    weights[kind],
                )
        kinds, bases, offsets, row_idx, col_idx, vals = [], [], [], [], [], []
        start = 0
        for kind, e, base, sites, w in self._blocks:
            m, k = sites.shape
            kinds.append(np.full(m, kind.value))
            bases.append(base)
            offsets.append(np.asarray(e, dtype=np.int64).reshape(m, 2))
            row_idx.append(np.repeat(np.arange(start, start + m), k))
            col_idx.append(sites.ravel())
            vals.append(np.tile(np.asarray(w, dtype=float), m))
            start += m
        n = self.grid.N
        if start == 0:
            return ConstraintSystem(
                self.grid,
                cone,
                np.zeros(0, dtype="<U1"),
                np.zeros(0, dtype=np.int64),
                np.zeros((0, 2), dtype=np.int64),
                sp.csr_matrix((0, n)),
            )
        matrix = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(row_idx), np.concatenate(col_idx))), shape=(start, n)
        ).tocsr()
        return ConstraintSystem(
            self.grid,
            cone,
            np.concatenate(kinds),
            np.concatenate(bases),
            np.concatenate(offsets),
            matrix,
        )


def _full_blocks(grid: GridDomain, with_triangles: bool):
    """Every supported S form (one per {e, -e}) and, optionally, every supported T form"""
    z = grid.points
    d1, d2 = grid.extent
    for a, b in irreducible_box(max(d1, d2)).tolist():
        if abs(a) > d1 or abs(b) > d2:
            continue
        e = (a, b)
        if lex_positive(e) == e and 2 * abs(a) <= d1 and 2 * abs(b) <= d2:
            plus = grid.indices_of(z + e)
            minus = grid.indices_of(z - e)
            mask = (plus >= 0) & (minus >= 0)
            if mask.any():
                base = np.nonzero(mask)[0]
                yield FormKind.S, e, base, np.column_stack([plus[mask], base, minus[mask]]), S_WEIGHTS
        if with_triangles and a * a + b * b > 1:
            f, g = parents(e)
            plus = grid.indices_of(z + e)
            mf = grid.indices_of(z - f)
            mg = grid.indices_of(z - g)
            mask = (plus >= 0) & (mf >= 0) & (mg >= 0)
            if mask.any():
                base = np.nonzero(mask)[0]
                sites = np.column_stack([plus[mask], mf[mask], mg[mask], base])
                yield FormKind.T, e, base, sites, T_WEIGHTS


def _stencil_rows(grid, cone, builder):
    V = cone.stencils
    with_t = cone.kind in (ConeKind.CONV_V, ConeKind.CONV_PRIME_V)
    index = grid.index
    for i in range(grid.N):
        x = grid.point(i)
        seen_s = set()
        for e in V.sorted_offsets(i):
            r = lex_positive(e)
            if r not in seen_s:
                seen_s.add(r)
                plus, minus = index.get(add(x, r)), index.get(sub(x, r))
                if plus is not None and minus is not None:
                    builder.add(FormKind.S, i, r, (plus, i, minus))
            if with_t and norm_sq(e) > 1:
                f, g = parents(e)
                sites = (index.get(add(x, e)), index.get(sub(x, f)), index.get(sub(x, g)), i)
                if None not in sites:
                    builder.add(FormKind.T, i, e, sites)
        if cone.kind == ConeKind.CONV_V:
            for e in sorted(V.candidates(i, cone.rho), key=angle_key):
                f, g = parents(e)
                sites = (index.get(add(x, e)), index.get(add(x, f)), index.get(add(x, g)), i)
                if None not in sites:
                    builder.add(FormKind.P, i, e, sites)
        elif cone.kind == ConeKind.DCONV_V:
            seen_h = set()
            for e in sorted(V.candidates(i, cone.rho), key=angle_key):
                r = lex_positive(e)
                if r in seen_h:
                    continue
                seen_h.add(r)
                f, g = parents(r)
                sites = (
                    index.get(add(x, r)),
                    index.get(sub(x, r)),
                    index.get(add(x, f)),
                    index.get(add(x, g)),
                    index.get(sub(x, f)),
                    index.get(sub(x, g)),
                    i,
                )
                if None not in sites:
                    builder.add(FormKind.H, i, r, sites)


def assemble(grid: GridDomain, cone: Cone) -> ConstraintSystem:
    """
    Constraint system of a cone.

    FullConv: all supported S (one per {e, -e}) and T forms.
    ConvV: S and T on V(x), P on the candidates of V(x).
    ConvPrimeV: S and T on V(x) only.
    DConvX: all supported S forms.
    DConvV: S on V(x), supported H on the candidates.
    DConvPrimeV: S on V(x) only.

    Raises:
        StencilValidationError: ConvV or DConvV over an invalid family
    """
    builder = _SystemBuilder(grid)
    if not cone.needs_stencils:
        for block in _full_blocks(grid, with_triangles=cone.kind == ConeKind.FULL_CONV):
            builder.add_block(*block)
    else:
        V = cone.stencils
        if V is None:
            raise InvalidArgumentError(f"{cone.kind.value} needs a stencil family")
        if V.grid is not grid:
            raise InvalidArgumentError("Stencil family belongs to another grid")
        if cone.kind in (ConeKind.CONV_V, ConeKind.DCONV_V):
            report = V.validate()
            if not report:
                raise StencilValidationError(report)
        _stencil_rows(grid, cone, builder)
    system = builder.build(cone)
    logger.debug("Assembled %s: %d rows %s", cone.describe(), len(system), system.counts())
    return system


def quadratic_values(grid: GridDomain) -> np.ndarray:
    """q(z) = |z|^2 / 2 at every grid point, in grid units"""
    z = grid.points.astype(float)
    return 0.5 * (z * z).sum(axis=1)


def convexity_defect(grid: GridDomain, u, mode="full") -> float:
    """
    Smallest eps >= 0 with u + eps q in Conv(X) (mode "full", S and T forms)
    or in DConv(X) (mode "directional", S forms only), q in grid units.
    """
    if mode not in ("full", "directional"):
        raise InvalidArgumentError(f"Unknown defect mode {mode!r}")
    u = _as_values(grid, u)
    q = quadratic_values(grid)
    worst = 0.0
    for _, _, _, sites, w in _full_blocks(grid, with_triangles=mode == "full"):
        w = np.asarray(w, dtype=float)
        ratio = -(u[sites] @ w) / (q[sites] @ w)
        worst = max(worst, float(ratio.max()))
    return worst


def is_member(grid: GridDomain, u, cone: Cone, tol=1e-9) -> bool:
    """True iff every form of the cone is >= -tol * max(1, |u|_inf) on u"""
    if tol < 0:
        raise InvalidArgumentError("Tolerance must be nonnegative")
    u = _as_values(grid, u)
    threshold = -tol * max(1.0, float(np.abs(u).max(initial=0.0)))
    if not cone.needs_stencils:
        for _, _, _, sites, w in _full_blocks(grid, with_triangles=cone.kind == ConeKind.FULL_CONV):
            if (u[sites] @ np.asarray(w, dtype=float)).min() < threshold:
                return False
        return True
    values = assemble(grid, cone).evaluate(u)
    return bool(values.size == 0 or values.min() >= threshold)


def restrict_to_sublattice(grid: GridDomain, u, step=2):
    """Restriction of u to X ∩ step Z^2, returned on its own grid with step h"""
    u = _as_values(grid, u)
    mask = np.all(grid.points % step == 0, axis=1)
    coarse = GridDomain(
        grid.domain,
        grid.h * step,
        grid.theta,
        (grid.xi[0] / step, grid.xi[1] / step),
        grid.points[mask] // step,
    )
    return coarse, u[mask]


def _as_values(grid, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.N,):
        raise InvalidArgumentError(f"Expected {grid.N} values, got shape {u.shape}")
    return u
