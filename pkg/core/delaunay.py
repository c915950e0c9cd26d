"""
Triangulations of X, the in-circle predicate, u-Delaunay triangulations by
edge flipping, subgradient cells and Hessian-determinant estimates.

Triangles live on integer lattice coordinates, so orientation tests are exact.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

from core.errors import DegenerateDomainError, InvalidArgumentError, NotConvexError
from core.grid import GridDomain, rotation
from core.lattice import det, dot, norm_sq

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TriangulationReport:
    ok: bool
    message: str = "ok"

    def __bool__(self):
        return self.ok

    def __str__(self):
        return self.message


class Triangulation:
    """
    Triangulation with vertex set X.

    Adjacency is a map from each directed edge (i, j) to the apex k of the
    counterclockwise triangle (i, j, k) on its left.
    """

    def __init__(self, grid: GridDomain, triangles):
        self.grid = grid
        self._apex = {}
        self._neighbors = None
        pts = grid.points
        for tri in np.asarray(triangles, dtype=np.int64).reshape(-1, 3).tolist():
            a, b, c = tri
            area = _orient(pts[a], pts[b], pts[c])
            if area == 0:
                raise InvalidArgumentError(f"Degenerate triangle {tri}")
            if area < 0:
                b, c = c, b
            self._add(a, b, c)

    def _add(self, a, b, c):
        self._neighbors = None
        for p, q, r in ((a, b, c), (b, c, a), (c, a, b)):
            if (p, q) in self._apex:
                raise InvalidArgumentError(f"Edge {(p, q)} is shared by more than two triangles")
            self._apex[(p, q)] = r

    def _remove(self, a, b, c):
        self._neighbors = None
        for p, q in ((a, b), (b, c), (c, a)):
            del self._apex[(p, q)]

    def copy(self):
        other = Triangulation.__new__(Triangulation)
        other.grid = self.grid
        other._apex = dict(self._apex)
        other._neighbors = None
        return other

    def apex(self, i, j):
        """Third vertex of the triangle left of the directed edge (i, j), or None"""
        return self._apex.get((i, j))

    @property
    def triangles(self) -> np.ndarray:
        tris = set()
        for (a, b), c in self._apex.items():
            k = min(range(3), key=lambda t: (a, b, c)[t])
            tris.add(((a, b, c)[k], (a, b, c)[(k + 1) % 3], (a, b, c)[(k + 2) % 3]))
        return np.asarray(sorted(tris), dtype=np.int64).reshape(-1, 3)

    def edges(self) -> list:
        return sorted({(min(a, b), max(a, b)) for a, b in self._apex})

    def is_interior_edge(self, i, j) -> bool:
        return (i, j) in self._apex and (j, i) in self._apex

    def interior_edges(self) -> list:
        return [e for e in self.edges() if self.is_interior_edge(*e)]

    def boundary_vertices(self) -> set:
        found = set()
        for a, b in self._apex:
            if (b, a) not in self._apex:
                found.update((a, b))
        return found

    def neighbors(self, i) -> set:
        return set(self._incident().get(i, ()))

    def edge_offsets(self, i) -> set:
        """Offsets z_j - z_i over the edges (i, j) of T"""
        pts = self.grid.points
        x = pts[i]
        return {(int(pts[j, 0] - x[0]), int(pts[j, 1] - x[1])) for j in self._incident().get(i, ())}

    def _incident(self) -> dict:
        if self._neighbors is None:
            found = {}
            for a, b in self._apex:
                found.setdefault(a, set()).add(b)
                found.setdefault(b, set()).add(a)
            self._neighbors = found
        return self._neighbors

    def is_convex_quad(self, i, j) -> bool:
        c, d = self.apex(i, j), self.apex(j, i)
        if c is None or d is None:
            return False
        pts = self.grid.points
        return _orient(pts[i], pts[d], pts[c]) > 0 and _orient(pts[d], pts[j], pts[c]) > 0

    def flip(self, i, j):
        """Replace the diagonal (i, j) of a strictly convex quad by the other diagonal"""
        if not self.is_convex_quad(i, j):
            raise InvalidArgumentError(f"Edge {(i, j)} is not the diagonal of a convex quad")
        c, d = self._apex[(i, j)], self._apex[(j, i)]
        self._remove(i, j, c)
        self._remove(j, i, d)
        self._add(i, d, c)
        self._add(d, j, c)
        return c, d

    def validate(self) -> TriangulationReport:
        """Vertex set is X, triangles are unimodular (empty) and cover Hull(X)"""
        pts = self.grid.points
        tris = self.triangles
        used = np.zeros(self.grid.N, dtype=bool)
        used[tris.ravel()] = True
        if not used.all():
            return TriangulationReport(False, f"point {int(np.argmin(used))} is not a vertex")
        areas = [_orient(pts[a], pts[b], pts[c]) for a, b, c in tris.tolist()]
        if any(area != 1 for area in areas):
            return TriangulationReport(False, "some triangle contains other grid points")
        hull_twice = _hull_area_twice(pts)
        if sum(areas) != hull_twice:
            return TriangulationReport(False, "triangles do not cover the convex hull")
        return TriangulationReport(True)

    def to_off(self) -> str:
        pts = self.grid.coords
        tris = self.triangles
        lines = ["OFF", f"{len(pts)} {len(tris)} 0"]
        lines += [f"{x:.17g} {y:.17g} 0" for x, y in pts]
        lines += [f"3 {a} {b} {c}" for a, b, c in tris.tolist()]
        return "\n".join(lines) + "\n"


def _orient(a, b, c):
    return int((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def _hull_area_twice(points) -> int:
    """Twice the area of the convex hull of integer points (monotone chain)"""
    pts = sorted(map(tuple, np.asarray(points).tolist()))

    def half(seq):
        chain = []
        for p in seq:
            while len(chain) >= 2 and _orient(chain[-2], chain[-1], p) <= 0:
                chain.pop()
            chain.append(p)
        return chain

    lower, upper = half(pts), half(reversed(pts))
    hull = lower[:-1] + upper[:-1]
    return abs(sum(hull[k][0] * hull[(k + 1) % len(hull)][1] - hull[(k + 1) % len(hull)][0] * hull[k][1] for k in range(len(hull))))


def in_circle(e, f, k) -> int:
    """k(k-1)|e|^2 + 2k<e, f>, for a basis with det(e, f) = 1"""
    if det(e, f) != 1:
        raise InvalidArgumentError("in_circle expects det(e, f) = 1")
    return k * (k - 1) * norm_sq(e) + 2 * k * dot(e, f)


def _edge_defect(T, u, i, j):
    """u(d) minus the plane through the triangle (i, j, c), d across the edge"""
    c, d = T.apex(i, j), T.apex(j, i)
    pts = T.grid.points
    a, b, pc, pd = pts[i], pts[j], pts[c], pts[d]
    area = _orient(a, b, pc)
    s = _orient(a, pd, pc) / area
    t = _orient(a, b, pd) / area
    plane = u[i] + s * (u[j] - u[i]) + t * (u[c] - u[i])
    return u[d] - plane


def is_u_delaunay(T: Triangulation, u, tol=1e-9) -> bool:
    """True iff the piecewise-linear interpolation of u on T is convex across every interior edge"""
    u = np.asarray(u, dtype=float)
    threshold = -tol * max(1.0, float(np.abs(u).max(initial=0.0)))
    return all(_edge_defect(T, u, i, j) >= threshold for i, j in T.interior_edges())


def standard_delaunay(grid: GridDomain) -> Triangulation:
    """
    Delaunay triangulation (lifting by q) of X.

    Qhull gives the starting triangulation; exact integer flips with the
    lifting |z|^2 then remove any edge Qhull got wrong. Cocircular quads keep
    the diagonal found first.

    Raises:
        DegenerateDomainError: X is collinear
    """
    if not grid.has_interior():
        raise DegenerateDomainError("Grid points are collinear")
    try:
        simplices = Delaunay(grid.points.astype(float)).simplices
    except QhullError as exc:
        raise DegenerateDomainError(f"Delaunay triangulation failed: {exc}") from exc
    pts = grid.points
    keep = [t for t in simplices.tolist() if _orient(pts[t[0]], pts[t[1]], pts[t[2]]) != 0]
    T = Triangulation(grid, keep)
    lift = (pts.astype(np.int64) ** 2).sum(axis=1).astype(float)
    T, flips = flip_to_u_delaunay(T, lift, tol=0.0)
    if flips:
        logger.debug("Repaired %d Qhull edges", flips)
    report = T.validate()
    if not report:
        raise DegenerateDomainError(f"Delaunay triangulation is invalid: {report}")
    return T


@dataclass
class FlipRecord:
    """One flip: the created edge as (base point, offset) and midpoint values before/after"""

    base: int
    offset: tuple
    before: float
    after: float


def flip_to_u_delaunay(T: Triangulation, u, tol=1e-9, history=None):
    """
    Flip edges of a copy of T until it is u-Delaunay.

    Edges are scanned in index order; after a flip the four edges around the
    new diagonal are rescanned. Equality cases are not flipped.

    Returns:
        (Triangulation, flip_count)

    Raises:
        NotConvexError: a violated edge is not flippable, or the flip count
        exceeds the bound valid for u in Conv(X)
    """
    u = np.asarray(u, dtype=float)
    if u.shape != (T.grid.N,):
        raise InvalidArgumentError(f"Expected {T.grid.N} values, got shape {u.shape}")
    T = T.copy()
    threshold = -tol * max(1.0, float(np.abs(u).max(initial=0.0)))
    grid = T.grid
    limit = 6 * grid.N * (grid.diameter_grid_units() + 3) + len(T.edges())
    stack = sorted(T.interior_edges(), reverse=True)
    flips = 0
    pts = grid.points
    while stack:
        i, j = stack.pop()
        if not T.is_interior_edge(i, j):
            continue
        if _edge_defect(T, u, i, j) >= threshold:
            continue
        if not T.is_convex_quad(i, j):
            raise NotConvexError(f"Edge {(i, j)} violates convexity but cannot be flipped: u is not in Conv(X)")
        c, d = T.flip(i, j)
        flips += 1
        if history is not None:
            lo, hi = min(c, d), max(c, d)
            offset = (int(pts[hi, 0] - pts[lo, 0]), int(pts[hi, 1] - pts[lo, 1]))
            history.append(FlipRecord(lo, offset, 0.5 * (u[i] + u[j]), 0.5 * (u[c] + u[d])))
        if flips > limit:
            raise NotConvexError("Flip count exceeded the bound for convex lifting maps")
        for p, q in ((i, d), (d, j), (j, c), (c, i)):
            stack.append((min(p, q), max(p, q)))
    logger.debug("u-Delaunay reached after %d flips", flips)
    return T, flips


@dataclass
class SubgradientCellMap:
    """Per interior point: polygon of gradients of the incident triangles"""

    points: np.ndarray
    polygons: list
    areas: np.ndarray
    det_estimates: np.ndarray
    h: float = 1.0
    extra: dict = field(default_factory=dict)

    def estimates_on_grid(self, n) -> np.ndarray:
        """Det estimates scattered to all N points (NaN on the boundary)"""
        out = np.full(n, np.nan)
        out[self.points] = self.det_estimates
        return out

    def to_json(self) -> dict:
        return {
            "points": self.points.tolist(),
            "polygons": [p.tolist() for p in self.polygons],
            "areas": self.areas.tolist(),
            "det_estimates": self.det_estimates.tolist(),
        }


def triangle_gradients(grid: GridDomain, T: Triangulation, u) -> dict:
    """Physical gradient of the linear interpolation of u on each triangle"""
    u = np.asarray(u, dtype=float)
    pts = grid.points.astype(float)
    rot = rotation(grid.theta)
    grads = {}
    for a, b, c in T.triangles.tolist():
        m = np.array([pts[b] - pts[a], pts[c] - pts[a]])
        lattice_grad = np.linalg.solve(m, np.array([u[b] - u[a], u[c] - u[a]]))
        grads[(a, b, c)] = rot @ lattice_grad / grid.h
    return grads


def _fan(T, i):
    """Triangles around an interior vertex i in counterclockwise order"""
    start = min(T._incident()[i])
    fan, j = [], start
    while True:
        k = T.apex(i, j)
        fan.append((i, j, k))
        j = k
        if j == start:
            return fan


def _canonical(tri):
    k = tri.index(min(tri))
    return tri[k], tri[(k + 1) % 3], tri[(k + 2) % 3]


def subgradient_cells(grid: GridDomain, u, triangulation=None, tol=1e-9) -> SubgradientCellMap:
    """
    Subgradient polygon at each interior point of the u-Delaunay triangulation.

    The cell area divided by h^2 estimates det(Hessian U) at the point.
    """
    u = np.asarray(u, dtype=float)
    T = triangulation
    if T is None:
        T, _ = flip_to_u_delaunay(standard_delaunay(grid), u, tol)
    grads = triangle_gradients(grid, T, u)
    boundary = T.boundary_vertices()
    scale = max(1.0, max((float(np.abs(g).max()) for g in grads.values()), default=1.0))
    points, polygons, areas = [], [], []
    for i in range(grid.N):
        if i in boundary:
            continue
        ring = [grads[_canonical(t)] for t in _fan(T, i)]
        merged = []
        for g in ring:
            if not merged or np.abs(g - merged[-1]).max() > 1e-12 * scale:
                merged.append(g)
        while len(merged) > 1 and np.abs(merged[0] - merged[-1]).max() <= 1e-12 * scale:
            merged.pop()
        poly = np.asarray(merged).reshape(-1, 2)
        points.append(i)
        polygons.append(poly)
        if len(poly) < 3:
            areas.append(0.0)
        else:
            x, y = poly[:, 0], poly[:, 1]
            areas.append(0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))))
    areas = np.asarray(areas)
    return SubgradientCellMap(
        np.asarray(points, dtype=np.int64), polygons, areas, areas / grid.h ** 2, grid.h
    )


def hessian_det_naive(grid: GridDomain, u) -> np.ndarray:
    """Determinant of the centered finite-difference Hessian (NaN without a full 3x3 neighborhood)"""
    u = np.asarray(u, dtype=float)
    z = grid.points

    def at(dx, dy):
        return grid.indices_of(z + (dx, dy))

    neigh = {d: at(*d) for d in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)]}
    ok = np.all([idx >= 0 for idx in neigh.values()], axis=0)
    out = np.full(grid.N, np.nan)
    i = np.nonzero(ok)[0]

    def val(d):
        return u[neigh[d][i]]

    h2 = grid.h ** 2
    uxx = (val((1, 0)) - 2 * u[i] + val((-1, 0))) / h2
    uyy = (val((0, 1)) - 2 * u[i] + val((0, -1))) / h2
    uxy = (val((1, 1)) - val((1, -1)) - val((-1, 1)) + val((-1, -1))) / (4 * h2)
    out[i] = uxx * uyy - uxy ** 2
    return out
