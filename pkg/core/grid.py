"""
Convex polygonal domains and the grids X = Omega ∩ h R_theta (xi + Z^2)
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from core.errors import DegenerateDomainError, InvalidArgumentError
from core.lattice import Vector

logger = logging.getLogger(__name__)


def polygon_area(vertices) -> float:
    """Unsigned shoelace area of a vertex sequence (empty or degenerate -> 0)"""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def rotation(theta) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class ConvexPolygon:
    """Strictly convex polygon, vertices in counterclockwise order"""

    vertices: tuple

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise InvalidArgumentError("A polygon needs at least 3 vertices")
        edges = np.roll(v, -1, axis=0) - v
        turns = edges[:, 0] * np.roll(edges[:, 1], -1) - edges[:, 1] * np.roll(edges[:, 0], -1)
        scale = max(1.0, float(np.abs(v).max())) ** 2
        if np.any(turns <= 1e-14 * scale):
            raise InvalidArgumentError(
                "Polygon vertices must be strictly convex and counterclockwise"
            )
        object.__setattr__(self, "vertices", tuple((float(x), float(y)) for x, y in v))

    @classmethod
    def rectangle(cls, x0, y0, x1, y1):
        return cls(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))

    @classmethod
    def rotated_square(cls, center, side, angle):
        """Axis-aligned square of the given side, rotated by angle about its center"""
        c = np.asarray(center, dtype=float)
        half = 0.5 * side
        corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
        return cls(tuple(map(tuple, corners @ rotation(angle).T + c)))

    @classmethod
    def regular_polygon(cls, center, radius, count=64):
        """Inscribed regular polygon, used as a disc"""
        t = 2 * np.pi * np.arange(count) / count
        c = np.asarray(center, dtype=float)
        pts = c + radius * np.column_stack([np.cos(t), np.sin(t)])
        return cls(tuple(map(tuple, pts)))

    def array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    def signed_distances(self, points) -> np.ndarray:
        """Distances of points to every edge line, positive inside; shape (M, edges)"""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        v = self.array()
        edges = np.roll(v, -1, axis=0) - v
        lengths = np.hypot(edges[:, 0], edges[:, 1])
        rel_x = p[:, None, 0] - v[None, :, 0]
        rel_y = p[:, None, 1] - v[None, :, 1]
        return (edges[None, :, 0] * rel_y - edges[None, :, 1] * rel_x) / lengths[None, :]

    def contains(self, points, tol=0.0) -> np.ndarray:
        """Boundary-inclusive membership of each point, up to tol on the signed distance"""
        return np.all(self.signed_distances(points) >= -tol, axis=1)

    def area(self) -> float:
        return polygon_area(self.vertices)

    def diameter(self) -> float:
        v = self.array()
        d = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((d ** 2).sum(axis=2)).max())

    def bounding_box(self):
        v = self.array()
        return (*v.min(axis=0), *v.max(axis=0))

    def clip(self, subject) -> np.ndarray:
        """Intersection of a convex vertex sequence with this polygon (Sutherland-Hodgman)"""
        output = [tuple(p) for p in np.asarray(subject, dtype=float)]
        v = self.array()
        for i in range(len(v)):
            if not output:
                break
            a, b = v[i], v[(i + 1) % len(v)]
            ex, ey = b - a

            def side(p):
                return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

            points, output = output, []
            for j, cur in enumerate(points):
                prev = points[j - 1]
                s_cur, s_prev = side(cur), side(prev)
                if s_cur >= 0:
                    if s_prev < 0:
                        output.append(_intersect(prev, cur, s_prev, s_cur))
                    output.append(cur)
                elif s_prev >= 0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
        return np.asarray(output, dtype=float).reshape(-1, 2)

    def rotated(self, angle, center):
        c = np.asarray(center, dtype=float)
        return ConvexPolygon(tuple(map(tuple, (self.array() - c) @ rotation(angle).T + c)))


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


class GridDomain:
    """
    The grid X: lattice points z whose embedding h R_theta (xi + z) lies in the domain.

    Points are stored as an (N, 2) int64 array in lexicographic order of their
    lattice coordinates; ``index`` maps a coordinate tuple to its ordinal.
    """

    def __init__(self, domain, h, theta, xi, points):
        if h <= 0:
            raise InvalidArgumentError("Grid step h must be positive")
        self.domain = domain
        self.h = float(h)
        self.theta = float(theta)
        self.xi = (float(xi[0]), float(xi[1]))
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((pts[:, 1], pts[:, 0]))
        self.points = pts[order]
        self.points.setflags(write=False)
        self.index = {(int(a), int(b)): i for i, (a, b) in enumerate(self.points.tolist())}
        if len(self.index) != len(self.points):
            raise InvalidArgumentError("Duplicate lattice points")
        self.lo = self.points.min(axis=0) if len(self.points) else np.zeros(2, np.int64)
        hi = self.points.max(axis=0) if len(self.points) else np.zeros(2, np.int64)
        self._table = np.full(tuple(hi - self.lo + 1), -1, dtype=np.int64)
        if len(self.points):
            self._table[self.points[:, 0] - self.lo[0], self.points[:, 1] - self.lo[1]] = np.arange(
                len(self.points)
            )
        self.cache = {}

    @classmethod
    def from_lattice_points(cls, points, h=1.0):
        """Grid on explicit lattice points with the identity embedding (scaled by h)"""
        return cls(None, h, 0.0, (0.0, 0.0), points)

    def __len__(self):
        return len(self.points)

    @property
    def N(self):
        return len(self.points)

    @property
    def extent(self):
        """Largest coordinate differences along each lattice axis"""
        return tuple(int(s) - 1 for s in self._table.shape)

    def indices_of(self, coords) -> np.ndarray:
        """Ordinals of lattice coordinates (..., 2); -1 where absent"""
        z = np.asarray(coords, dtype=np.int64)
        a = z[..., 0] - self.lo[0]
        b = z[..., 1] - self.lo[1]
        shape = self._table.shape
        inside = (a >= 0) & (a < shape[0]) & (b >= 0) & (b < shape[1])
        result = np.full(a.shape, -1, dtype=np.int64)
        result[inside] = self._table[a[inside], b[inside]]
        return result

    def index_of(self, z) -> int:
        return self.index.get((int(z[0]), int(z[1])), -1)

    def point(self, i) -> Vector:
        a, b = self.points[i]
        return int(a), int(b)

    def has_offset(self, i, e) -> bool:
        """True iff x_i + e is a grid point"""
        a, b = self.points[i]
        return (int(a) + e[0], int(b) + e[1]) in self.index

    def embed(self, coords) -> np.ndarray:
        z = np.asarray(coords, dtype=float)
        return self.h * (z + np.asarray(self.xi)) @ rotation(self.theta).T

    @property
    def coords(self) -> np.ndarray:
        if "coords" not in self.cache:
            self.cache["coords"] = self.embed(self.points)
        return self.cache["coords"]

    def max_stencil(self, i) -> frozenset:
        """V_max(x): irreducible offsets e with x + e in X"""
        diffs = self.points - self.points[i]
        keep = np.gcd(diffs[:, 0], diffs[:, 1]) == 1
        return frozenset((int(a), int(b)) for a, b in diffs[keep].tolist())

    def is_supported(self, form) -> bool:
        """True iff every site of the linear form lies in X"""
        return all(site in self.index for site in form.sites)

    def diameter_grid_units(self) -> float:
        """Diameter of the domain measured in grid steps"""
        if self.domain is not None:
            return self.domain.diameter() / self.h
        d = self.points[:, None, :] - self.points[None, :, :]
        return float(np.sqrt((d ** 2).sum(axis=2)).max())

    def has_interior(self) -> bool:
        if len(self.points) < 3:
            return False
        rel = (self.points[1:] - self.points[0]).astype(float)
        return bool(np.linalg.matrix_rank(rel) == 2)

    def to_descriptor(self) -> dict:
        if self.domain is None:
            raise InvalidArgumentError("Grid was not built from a domain")
        return {
            "polygon": [list(v) for v in self.domain.vertices],
            "h": self.h,
            "theta": self.theta,
            "xi": list(self.xi),
        }

    @classmethod
    def from_descriptor(cls, descriptor: dict):
        try:
            polygon = ConvexPolygon(tuple(map(tuple, descriptor["polygon"])))
            return build_grid(
                polygon,
                float(descriptor["h"]),
                float(descriptor.get("theta", 0.0)),
                tuple(descriptor.get("xi", (0.0, 0.0))),
            )
        except KeyError as exc:
            raise InvalidArgumentError(f"Grid descriptor is missing {exc}") from exc

    def __repr__(self):
        return f"GridDomain(N={self.N}, h={self.h:g}, theta={self.theta:g}, xi={self.xi})"


def build_grid(domain: ConvexPolygon, h, theta=0.0, xi=(0.0, 0.0)) -> GridDomain:
    """
    Enumerate the lattice points whose embedding h R_theta (xi + z) lies in the domain.

    Points on the boundary are included (tolerance 1e-12 h on signed distances).

    Raises:
        DegenerateDomainError: fewer than 3 points
    """
    if h <= 0:
        raise InvalidArgumentError("Grid step h must be positive")
    xi = np.asarray(xi, dtype=float)
    # lattice coordinates of the polygon vertices
    back = domain.array() @ rotation(theta) / h - xi
    lo = np.floor(back.min(axis=0)).astype(np.int64) - 1
    hi = np.ceil(back.max(axis=0)).astype(np.int64) + 1
    a, b = np.meshgrid(np.arange(lo[0], hi[0] + 1), np.arange(lo[1], hi[1] + 1), indexing="ij")
    candidates = np.column_stack([a.ravel(), b.ravel()])
    embedded = h * (candidates + xi) @ rotation(theta).T
    keep = domain.contains(embedded, tol=1e-12 * h)
    points = candidates[keep]
    if len(points) < 3:
        raise DegenerateDomainError(f"Grid has {len(points)} points, at least 3 are required")
    grid = GridDomain(domain, h, theta, tuple(xi), points)
    logger.debug("Built %r", grid)
    return grid


def square_grid(n, x0=0.0, y0=0.0, side=None) -> GridDomain:
    """n x n grid on the square [x0, x0 + side]^2 (side defaults to n - 1, i.e. h = 1)"""
    if n < 2:
        raise DegenerateDomainError("A square grid needs n >= 2")
    side = float(n - 1) if side is None else float(side)
    h = side / (n - 1)
    domain = ConvexPolygon.rectangle(x0, y0, x0 + side, y0 + side)
    return build_grid(domain, h, 0.0, (x0 / h, y0 / h))
