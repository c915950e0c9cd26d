"""
Lower convex hull of lifted grid points, convex envelopes and extensibility.

This is the ground truth the constraint systems are checked against. Small
inputs go through a brute-force facet enumeration with exact integer plane
tests when the values are integers; larger inputs use Qhull.
"""

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from core.errors import DegenerateDomainError, InvalidArgumentError

logger = logging.getLogger(__name__)

EXACT_LIMIT = 200


@dataclass
class LiftedHull:
    """Lower hull of the points (sites[i], values[i]) in R^3"""

    sites: np.ndarray
    values: np.ndarray
    triangles: np.ndarray
    planes: np.ndarray
    on_hull: np.ndarray

    def envelope(self, points=None) -> np.ndarray:
        """Largest convex function below the lifted sites, at points of their hull"""
        p = self.sites if points is None else np.atleast_2d(np.asarray(points, dtype=float))
        result = np.full(len(p), -np.inf)
        # chunks keep the planes x points table small
        step = max(1, 4_000_000 // max(1, len(self.planes)))
        for start in range(0, len(p), step):
            chunk = p[start:start + step]
            heights = chunk @ self.planes[:, :2].T + self.planes[:, 2]
            result[start:start + step] = heights.max(axis=1)
        return result


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _check_input(sites, values):
    sites = np.asarray(sites)
    values = np.asarray(values)
    if sites.ndim != 2 or sites.shape[1] != 2 or len(sites) != len(values):
        raise InvalidArgumentError("Expected (N, 2) sites and N values")
    if len(sites) < 3 or np.linalg.matrix_rank((sites[1:] - sites[0]).astype(float)) < 2:
        raise DegenerateDomainError("Lower hull needs three affinely independent sites")
    return sites, values


def _plane(sites, values, tri):
    """(a, b, c) with z = a x + b y + c through three lifted sites"""
    p = sites[list(tri)].astype(float)
    z = values[list(tri)].astype(float)
    m = np.column_stack([p, np.ones(3)])
    return np.linalg.solve(m, z)


def _facet_triangulation(sites, members):
    """
    Deterministic triangulation of a planar point set: greedy maximal
    non-crossing edge set, shortest edges first, ties by index pair.
    """
    members = sorted(members)
    pts = {i: sites[i] for i in members}

    def blocked(i, j):
        a, b = pts[i], pts[j]
        for k in members:
            if k in (i, j):
                continue
            c = pts[k]
            if _orient(a, b, c) == 0 and min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]):
                return True
        return False

    def crosses(e1, e2):
        (i, j), (k, m) = e1, e2
        if len({i, j, k, m}) < 4:
            return False
        a, b, c, d = pts[i], pts[j], pts[k], pts[m]
        o1, o2 = _orient(a, b, c), _orient(a, b, d)
        o3, o4 = _orient(c, d, a), _orient(c, d, b)
        return o1 * o2 < 0 and o3 * o4 < 0

    def length(edge):
        d = pts[edge[0]] - pts[edge[1]]
        return float(d @ d)

    accepted = []
    for edge in sorted(combinations(members, 2), key=lambda e: (length(e), e)):
        if blocked(*edge):
            continue
        if any(crosses(edge, other) for other in accepted):
            continue
        accepted.append(edge)
    adjacency = {i: set() for i in members}
    for i, j in accepted:
        adjacency[i].add(j)
        adjacency[j].add(i)
    triangles = []
    for i, j in accepted:
        for k in adjacency[i] & adjacency[j]:
            if k <= j:
                continue
            a, b, c = pts[i], pts[j], pts[k]
            area = _orient(a, b, c)
            if area == 0:
                continue
            empty = True
            for m in members:
                if m in (i, j, k):
                    continue
                p = pts[m]
                s1, s2, s3 = _orient(a, b, p), _orient(b, c, p), _orient(c, a, p)
                if (s1 >= 0 and s2 >= 0 and s3 >= 0) or (s1 <= 0 and s2 <= 0 and s3 <= 0):
                    empty = False
                    break
            if empty:
                triangles.append((i, j, k) if area > 0 else (i, k, j))
    return triangles


def _exact_lower_hull(sites, values, tol):
    """Brute force over all site triples; exact when sites and values are integers"""
    n = len(sites)
    exact = np.issubdtype(values.dtype, np.integer) and np.issubdtype(sites.dtype, np.integer)
    p = sites.astype(np.int64) if exact else sites.astype(float)
    z = values.astype(np.int64) if exact else values.astype(float)
    scale = max(1.0, float(np.abs(z).max()))
    facets = set()
    for i in range(n):
        for j in range(i + 1, n):
            ks = np.arange(j + 1, n)
            if len(ks) == 0:
                continue
            d = (p[j, 0] - p[i, 0]) * (p[ks, 1] - p[i, 1]) - (p[j, 1] - p[i, 1]) * (p[ks, 0] - p[i, 0])
            ks, d = ks[d != 0], d[d != 0]
            if len(ks) == 0:
                continue
            # residual(m) * D for the plane through i, j, k, sign-normalized by D
            rel = p - p[i]
            beta = rel[None, :, 0] * (p[ks, 1] - p[i, 1])[:, None] - rel[None, :, 1] * (p[ks, 0] - p[i, 0])[:, None]
            gamma = (p[j, 0] - p[i, 0]) * rel[None, :, 1] - (p[j, 1] - p[i, 1]) * rel[None, :, 0]
            residual = d[:, None] * (z[None, :] - z[i]) - beta * (z[j] - z[i]) - gamma * (z[ks] - z[i])[:, None]
            residual = residual * np.sign(d)[:, None]
            limit = 0 if exact else tol * scale * np.abs(d)[:, None]
            supporting = np.all(residual >= -limit, axis=1)
            for row in np.nonzero(supporting)[0]:
                on_plane = residual[row] == 0 if exact else np.abs(residual[row]) <= limit[row, 0]
                facets.add(frozenset(np.nonzero(on_plane)[0].tolist()))
    triangles = []
    for members in sorted(facets, key=sorted):
        triangles.extend(_facet_triangulation(p, members))
    return np.asarray(sorted(triangles), dtype=np.int64).reshape(-1, 3)


def _qhull_lower_hull(sites, values):
    """Lower facets from Qhull; a tiny paraboloid term splits coplanar facets"""
    p = sites.astype(float)
    z = values.astype(float)
    centered = p - p.mean(axis=0)
    span = max(1.0, float(np.abs(centered).max()))
    eps = 1e-9 * max(1.0, float(np.abs(z).max())) / span ** 2
    lifted = np.column_stack([p, z + eps * (centered ** 2).sum(axis=1)])
    try:
        hull = ConvexHull(lifted, qhull_options="Qt")
    except QhullError as exc:
        raise DegenerateDomainError(f"Qhull failed on the lifted sites: {exc}") from exc
    lower = hull.equations[:, 2] < -1e-12
    triangles = []
    for a, b, c in hull.simplices[lower]:
        if _orient(p[a], p[b], p[c]) < 0:
            b, c = c, b
        if _orient(p[a], p[b], p[c]) > 0:
            triangles.append((a, b, c))
    return np.asarray(sorted(triangles), dtype=np.int64).reshape(-1, 3)


def lower_hull(sites, values, tol=1e-12, method="auto") -> LiftedHull:
    """
    Lower convex hull of the lifted sites.

    Args:
        sites: (N, 2) base points, integer lattice coordinates for exact tests
        values: N heights
        tol: relative tolerance for the floating-point plane tests
        method: "exact", "qhull" or "auto" (exact up to EXACT_LIMIT sites)

    Raises:
        DegenerateDomainError: all sites are collinear
    """
    sites, values = _check_input(sites, values)
    if method == "auto":
        method = "exact" if len(sites) <= EXACT_LIMIT else "qhull"
    if method == "exact":
        triangles = _exact_lower_hull(sites, values, tol)
    elif method == "qhull":
        triangles = _qhull_lower_hull(sites, values)
    else:
        raise InvalidArgumentError(f"Unknown hull method {method!r}")
    planes = np.array([_plane(sites, values, t) for t in triangles]).reshape(-1, 3)
    hull = LiftedHull(sites.astype(float), values.astype(float), triangles, planes, np.zeros(len(sites), bool))
    env = hull.envelope()
    scale = max(1.0, float(np.abs(hull.values).max()))
    hull.on_hull = env >= hull.values - 1e-9 * scale
    logger.debug("Lower hull (%s): %d triangles, %d/%d sites on hull", method, len(triangles), hull.on_hull.sum(), len(sites))
    return hull


def convex_envelope(grid, u, method="auto") -> np.ndarray:
    """Values on X of the largest convex function below u"""
    u = np.asarray(u)
    if u.shape != (grid.N,):
        raise InvalidArgumentError(f"Expected {grid.N} values, got shape {u.shape}")
    hull = lower_hull(grid.points, u, method=method)
    env = hull.envelope()
    # on-hull sites keep their exact value
    return np.where(hull.on_hull, u.astype(float), np.minimum(env, u.astype(float)))


def is_extensible(grid, u, tol=1e-9) -> bool:
    """True iff u is the restriction of a convex function (u equals its envelope)"""
    u = np.asarray(u)
    env = convex_envelope(grid, u)
    scale = max(1.0, float(np.abs(u).max()))
    return bool(np.all(u - env <= tol * scale))
