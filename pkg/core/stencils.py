"""
Stencil families V: per grid point sets of irreducible offsets, closed under
Stability and satisfying Visibility.
"""

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from core.constraints import Cone, is_member
from core.errors import InvalidArgumentError, NotConvexError, StencilValidationError
from core.grid import GridDomain
from core.lattice import (
    ParentTable,
    Vector,
    add,
    ancestors,
    angle_sort,
    cyclic_between,
    irreducible_box,
    is_direct_acute,
    is_irreducible,
    norm_sq,
    parents,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of a stencil validation; falsy when a property is violated"""

    ok: bool
    violation: Optional[str] = None
    point: Optional[int] = None
    offset: Optional[Vector] = None

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "ok"
        return f"{self.violation} violated at point {self.point} by offset {self.offset}"


class StencilFamily:
    """Immutable per-point offset sets over one grid"""

    def __init__(self, grid: GridDomain, sets):
        self.grid = grid
        self._sets = tuple(frozenset(tuple(e) for e in s) for s in sets)
        if len(self._sets) != grid.N:
            raise InvalidArgumentError(f"Expected {grid.N} stencils, got {len(self._sets)}")
        self._sorted = {}

    def __getitem__(self, i) -> frozenset:
        return self._sets[i]

    def __len__(self):
        return len(self._sets)

    def __iter__(self):
        return iter(self._sets)

    def __eq__(self, other):
        return isinstance(other, StencilFamily) and self.grid is other.grid and self._sets == other._sets

    def __hash__(self):
        return hash(self._sets)

    def offsets(self, i) -> frozenset:
        return self._sets[i]

    def sorted_offsets(self, i) -> tuple:
        """V(x) sorted by polar angle"""
        if i not in self._sorted:
            self._sorted[i] = tuple(angle_sort(self._sets[i]))
        return self._sorted[i]

    def count(self) -> int:
        """#V, the total number of (x, e) pairs"""
        return sum(len(s) for s in self._sets)

    def pairs(self):
        for i, s in enumerate(self._sets):
            for e in sorted(s):
                yield i, e

    def candidates(self, i, rho=1.0) -> set:
        return extended_candidates(self, i, rho) if rho != 1.0 else refinement_candidates(self, i)

    def validate(self) -> ValidationReport:
        return validate(self)

    def issubset(self, other) -> bool:
        return all(a <= b for a, b in zip(self._sets, other._sets))

    def to_json(self) -> dict:
        return {
            "points": [list(p) for p in self.grid.points.tolist()],
            "stencils": [[list(e) for e in self.sorted_offsets(i)] for i in range(len(self))],
        }

    @classmethod
    def from_json(cls, grid, data):
        if [list(p) for p in grid.points.tolist()] != data["points"]:
            raise InvalidArgumentError("Stencil file does not match the grid")
        return check(cls(grid, [[tuple(e) for e in s] for s in data["stencils"]]))

    def __repr__(self):
        return f"StencilFamily(N={len(self)}, count={self.count()})"


def _consecutive_pairs(ordered):
    m = len(ordered)
    if m < 2:
        return
    for k in range(m):
        yield ordered[k], ordered[(k + 1) % m]


def maximal_stencils(grid: GridDomain) -> StencilFamily:
    """V_max at every point (quadratic size: meant for small grids)"""
    return StencilFamily(grid, [grid.max_stencil(i) for i in range(grid.N)])


def minimal_stencils(grid: GridDomain) -> StencilFamily:
    """
    V_min(x): offsets of V_max(x) with no parent, or exactly one parent, in V_max(x).

    Computed offset by offset over all points at once.
    """
    if "minimal_stencils" in grid.cache:
        return grid.cache["minimal_stencils"]
    sets = [[] for _ in range(grid.N)]
    z = grid.points
    d1, d2 = grid.extent
    radius = max(d1, d2)
    offsets = irreducible_box(radius)
    offsets = offsets[(np.abs(offsets[:, 0]) <= d1) & (np.abs(offsets[:, 1]) <= d2)]
    fs, gs, split = ParentTable(radius).lookup(offsets)
    for e, f, g, has_parents in zip(map(tuple, offsets.tolist()), fs, gs, split):
        present = grid.indices_of(z + e) >= 0
        if has_parents:
            both = (grid.indices_of(z + f) >= 0) & (grid.indices_of(z + g) >= 0)
            present &= ~both
        for i in np.nonzero(present)[0]:
            sets[i].append(e)
    family = StencilFamily(grid, sets)
    grid.cache["minimal_stencils"] = family
    return family


def fixed_stencils(grid: GridDomain, k: int) -> StencilFamily:
    """V_k(x) = {e in V_max(x) : |e|_inf <= k}"""
    if k < 1:
        raise InvalidArgumentError("Stencil width must be at least 1")
    sets = [[] for _ in range(grid.N)]
    for a, b in irreducible_box(k).tolist():
        for i in np.nonzero(grid.indices_of(grid.points + (a, b)) >= 0)[0]:
            sets[i].append((a, b))
    return StencilFamily(grid, sets)


def _in_cone(ordered, e) -> bool:
    """Whether e lies in the cone spanned by an angle-sorted set of vectors"""
    if e in ordered:
        return True
    for a, b in _consecutive_pairs(ordered):
        if cyclic_between(a, e, b):
            return a[0] * b[1] - a[1] * b[0] > 0
    return False


def validate(V: StencilFamily) -> ValidationReport:
    """
    Check containment in V_max, Stability and Visibility.

    Visibility is tested against V_min, whose cone equals the cone of V_max.
    Reports the first violated property with its witness (x, e).
    """
    grid = V.grid
    vmin = minimal_stencils(grid)
    for i in range(len(V)):
        for e in V.sorted_offsets(i):
            if not is_irreducible(e) or not grid.has_offset(i, e):
                return ValidationReport(False, "containment", i, e)
            if norm_sq(e) > 1:
                for p in parents(e):
                    if grid.has_offset(i, p) and p not in V[i]:
                        return ValidationReport(False, "stability", i, e)
        ordered = V.sorted_offsets(i)
        for e in vmin.sorted_offsets(i):
            if not _in_cone(ordered, e):
                return ValidationReport(False, "visibility", i, e)
    return ValidationReport(True)


def refinement_candidates(V: StencilFamily, x: int) -> set:
    """H(x): offsets of V_max(x) outside V(x) whose two parents lie in V(x)"""
    grid = V.grid
    found = set()
    for a, b in _consecutive_pairs(V.sorted_offsets(x)):
        if is_direct_acute(a, b):
            e = add(a, b)
            if e not in V[x] and grid.has_offset(x, e):
                found.add(e)
    return found


def extended_candidates(V: StencilFamily, x: int, rho: float) -> set:
    """
    H_rho(x): offsets e outside V(x) with parents f, g between consecutive
    f', g' of V(x) (f' <= f < g <= g') and |f| |g| <= rho |f'| |g'|.
    """
    if rho < 1:
        raise InvalidArgumentError(f"rho must be >= 1, got {rho}")
    grid = V.grid
    found = set()
    for a, b in _consecutive_pairs(V.sorted_offsets(x)):
        if not is_direct_acute(a, b):
            continue
        bound = rho * rho * norm_sq(a) * norm_sq(b) * (1 + 1e-12)
        stack = [(a, b)]
        while stack:
            f, g = stack.pop()
            if norm_sq(f) * norm_sq(g) > bound:
                continue
            e = add(f, g)
            # descendants of an offset outside V_max(x) are outside too
            if not grid.has_offset(x, e):
                continue
            found.add(e)
            stack.append((f, e))
            stack.append((e, g))
    return found


def refine(V: StencilFamily, additions: Iterable) -> StencilFamily:
    """
    Add offsets (x, e) to V, together with their ancestors that lie in V_max(x).

    Raises:
        InvalidArgumentError: some e is not in V_max(x)
    """
    grid = V.grid
    sets = [set(s) for s in V]
    changed = False
    for i, e in additions:
        e = (int(e[0]), int(e[1]))
        if not is_irreducible(e) or not grid.has_offset(i, e):
            raise InvalidArgumentError(f"Offset {e} is not in V_max at point {i}")
        if e in sets[i]:
            continue
        changed = True
        for a in ancestors(e):
            if grid.has_offset(i, a):
                sets[i].add(a)
    if not changed:
        return V
    return StencilFamily(grid, sets)


def _same_grid(V, W):
    if V.grid is not W.grid:
        raise InvalidArgumentError("Stencil families live on different grids")


def union(V: StencilFamily, W: StencilFamily) -> StencilFamily:
    _same_grid(V, W)
    return StencilFamily(V.grid, [a | b for a, b in zip(V, W)])


def intersect(V: StencilFamily, W: StencilFamily) -> StencilFamily:
    _same_grid(V, W)
    return StencilFamily(V.grid, [a & b for a, b in zip(V, W)])


def random_refinement(V: StencilFamily, rng, steps=10, rho=1.0) -> StencilFamily:
    """Refine V by `steps` random candidates drawn at random points"""
    for _ in range(steps):
        order = rng.permutation(len(V))
        for i in order:
            options = sorted(V.candidates(int(i), rho))
            if options:
                V = refine(V, [(int(i), options[rng.integers(len(options))])])
                break
        else:
            break
    return V


def minimal_stencils_for(grid: GridDomain, u, tol=1e-9) -> StencilFamily:
    """
    Smallest family V with u in Conv(V).

    For |e| > 1, e is in V(x) iff P_x^e is unsupported or P_x^e(u) < -tol * scale,
    with scale = max(1, |u|_inf). The family is grown from V_min: an offset can
    only enter once both of its parents are in, so the search visits candidates.

    Raises:
        NotConvexError: u is not in Conv(X) (up to the tolerance)
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (grid.N,):
        raise InvalidArgumentError(f"Expected {grid.N} values, got shape {u.shape}")
    threshold = -tol * max(1.0, float(np.abs(u).max(initial=0.0)))
    index = grid.index
    base = minimal_stencils(grid)
    sets = []
    for i in range(grid.N):
        x = grid.point(i)
        current = set(base[i])
        work = [(a, b) for a, b in _consecutive_pairs(base.sorted_offsets(i)) if is_direct_acute(a, b)]
        while work:
            f, g = work.pop()
            e = add(f, g)
            if e in current:
                continue
            j = index.get(add(x, e))
            if j is None:
                continue
            value = u[j] - u[index[add(x, f)]] - u[index[add(x, g)]] + u[i]
            if value < threshold:
                current.add(e)
                work.append((f, e))
                work.append((e, g))
        sets.append(current)
    family = StencilFamily(grid, sets)
    if not is_member(grid, u, Cone.conv_v(family), tol):
        raise NotConvexError("u is not discretely convex on the grid")
    return family


def stencils_of_triangulation(T) -> StencilFamily:
    """V(x) = V_max(x) ∩ union of Anc(e) over the edge offsets e of T at x"""
    report = T.validate()
    if not report:
        raise InvalidArgumentError(f"Invalid triangulation: {report}")
    grid = T.grid
    sets = []
    for i in range(grid.N):
        found = set()
        for e in T.edge_offsets(i):
            found.update(a for a in ancestors(e) if grid.has_offset(i, a))
        sets.append(found)
    return StencilFamily(grid, sets)


def worst_case_bound(grid: GridDomain) -> float:
    """6 (N - 2) (diam + 2), diam in grid units"""
    return 6 * (grid.N - 2) * (grid.diameter_grid_units() + 2)


def check(V: StencilFamily) -> StencilFamily:
    """Return V, raising when it is not a valid stencil family"""
    report = validate(V)
    if not report:
        raise StencilValidationError(report)
    return V

