"""
Integer arithmetic on irreducible lattice vectors.

Vectors are plain ``(a, b)`` tuples of Python ints. Every predicate in this
module (determinant, scalar product, cyclic order) is evaluated with exact
integer arithmetic.
"""

import math
from functools import cmp_to_key, lru_cache
from typing import Iterable, NamedTuple

import numpy as np

from core.errors import InvalidArgumentError, NoParentsError

Vector = tuple[int, int]

# Grids never come close to this; it keeps products well inside int64.
COORD_LIMIT = 1 << 20


class Basis(NamedTuple):
    """A basis (f, g) of Z^2"""

    f: Vector
    g: Vector

    @property
    def direct(self):
        return det(self.f, self.g) == 1

    @property
    def acute(self):
        return dot(self.f, self.g) >= 0


def as_vector(e) -> Vector:
    """Normalize a pair of integers, rejecting the zero vector"""
    a, b = int(e[0]), int(e[1])
    if a == 0 and b == 0:
        raise InvalidArgumentError("Zero vector is not allowed")
    if abs(a) >= COORD_LIMIT or abs(b) >= COORD_LIMIT:
        raise InvalidArgumentError(f"Coordinates of {(a, b)} exceed {COORD_LIMIT}")
    return a, b


def det(u, v):
    return u[0] * v[1] - u[1] * v[0]


def dot(u, v):
    return u[0] * v[0] + u[1] * v[1]


def norm_sq(e):
    return e[0] * e[0] + e[1] * e[1]


def norm_inf(e):
    return max(abs(e[0]), abs(e[1]))


def add(u, v) -> Vector:
    return u[0] + v[0], u[1] + v[1]


def sub(u, v) -> Vector:
    return u[0] - v[0], u[1] - v[1]


def neg(e) -> Vector:
    return -e[0], -e[1]


def is_irreducible(e) -> bool:
    """True iff the coordinates of e are coprime (gcd(0, n) = |n|)"""
    a, b = as_vector(e)
    return math.gcd(a, b) == 1


def is_unit(e) -> bool:
    return norm_sq(e) == 1


def is_direct_acute(f, g) -> bool:
    return det(f, g) == 1 and dot(f, g) >= 0


def lex_positive(e) -> Vector:
    """Representative of {e, -e} with positive first nonzero coordinate"""
    if e[0] > 0 or (e[0] == 0 and e[1] > 0):
        return e[0], e[1]
    return -e[0], -e[1]


def _bezout(a, b):
    """Extended Euclid: returns (g, x, y) with a*x + b*y = g"""
    x0, x1, y0, y1 = 1, 0, 0, 1
    while b:
        q = a // b
        a, b = b, a - q * b
        x0, x1 = x1, x0 - q * x1
        y0, y1 = y1, y0 - q * y1
    if a < 0:
        return -a, -x0, -y0
    return a, x0, y0


@lru_cache(maxsize=1 << 18)
def _parents(a, b):
    n2 = a * a + b * b
    if n2 == 1:
        raise NoParentsError()
    g, x, y = _bezout(a, b)
    if g != 1:
        raise InvalidArgumentError(f"{(a, b)} is not irreducible")
    # det(f0, e) = 1; shifting by multiples of e keeps the determinant
    f0 = (y, -x)
    k = -((f0[0] * a + f0[1] * b) // n2)
    f = (f0[0] + k * a, f0[1] + k * b)
    return Basis(f, (a - f[0], b - f[1]))


def parents(e) -> Basis:
    """
    The unique direct acute basis (f, g) with f + g = e.

    Args:
        e: Irreducible vector with norm > 1

    Returns:
        Basis with det(f, g) = 1 and <f, g> >= 0

    Raises:
        NoParentsError: e is a unit vector
        InvalidArgumentError: e is zero or reducible
    """
    a, b = as_vector(e)
    return _parents(a, b)


def unit_orthogonal_pair(e) -> Basis:
    """For a unit e, the unit vectors f, g with det(f, e) = det(e, g) = 1"""
    a, b = as_vector(e)
    if a * a + b * b != 1:
        raise InvalidArgumentError(f"{(a, b)} is not a unit vector")
    return Basis((b, -a), (-b, a))


def children(e, norm_bound) -> list[Vector]:
    """
    All vectors whose parents contain e, up to a Euclidean norm bound.

    The children are f + k*e and k*e + g for k >= 1, where (f, g) are the
    parents of e (or the orthogonal unit pair when e is a unit vector).
    They are listed by increasing k, f-branch first.
    """
    e = as_vector(e)
    f, g = unit_orthogonal_pair(e) if is_unit(e) else parents(e)
    bound_sq = float(norm_bound) ** 2
    result = []
    k = 1
    while True:
        left = (f[0] + k * e[0], f[1] + k * e[1])
        right = (k * e[0] + g[0], k * e[1] + g[1])
        in_left = norm_sq(left) <= bound_sq
        in_right = norm_sq(right) <= bound_sq
        if not (in_left or in_right):
            return result
        if in_left:
            result.append(left)
        if in_right:
            result.append(right)
        k += 1


def ancestors(e) -> set[Vector]:
    """Smallest set containing e and closed under taking parents"""
    e = as_vector(e)
    found = {e}
    stack = [e]
    while stack:
        v = stack.pop()
        if is_unit(v):
            continue
        for p in parents(v):
            if p not in found:
                found.add(p)
                stack.append(p)
    return found


def _angle_class(ref, v):
    # 0: same direction, 1: (0, pi), 2: opposite, 3: (pi, 2pi)
    c = det(ref, v)
    if c == 0:
        return 0 if dot(ref, v) > 0 else 2
    return 1 if c > 0 else 3


def cyclic_between(f, e, g) -> bool:
    """True iff f < e < g in the strict cyclic trigonometric order"""
    f, e, g = as_vector(f), as_vector(e), as_vector(g)
    ce, cg = _angle_class(f, e), _angle_class(f, g)
    if ce == 0 or cg == 0:
        return False
    if ce != cg:
        return ce < cg
    if ce == 2:
        return False
    return det(e, g) > 0


def _half_plane(v):
    return 0 if v[1] > 0 or (v[1] == 0 and v[0] > 0) else 1


def _angle_cmp(u, v):
    hu, hv = _half_plane(u), _half_plane(v)
    if hu != hv:
        return hu - hv
    c = det(u, v)
    if c > 0:
        return -1
    return 1 if c < 0 else 0


angle_key = cmp_to_key(_angle_cmp)


def angle_sort(vectors: Iterable) -> list[Vector]:
    """Sort nonzero vectors by polar angle in [0, 2pi), integer comparisons only"""
    return sorted((tuple(v) for v in vectors), key=angle_key)


def irreducible_box(radius) -> np.ndarray:
    """All irreducible vectors with infinity norm <= radius, as an (M, 2) array"""
    r = np.arange(-radius, radius + 1)
    a, b = np.meshgrid(r, r, indexing="ij")
    a, b = a.ravel(), b.ravel()
    keep = np.gcd(a, b) == 1
    return np.column_stack([a[keep], b[keep]]).astype(np.int64)


def coprime_density(n) -> float:
    """Fraction of pairs in [1, n]^2 with coprime coordinates (tends to 6/pi^2)"""
    r = np.arange(1, n + 1)
    return float(np.count_nonzero(np.gcd.outer(r, r) == 1)) / (n * n)


class ParentTable:
    """
    Parents of every irreducible offset with infinity norm <= radius.

    ``lookup`` maps an (M, 2) array of offsets to the (M, 2) arrays f and g;
    unit vectors and reducible offsets map to zeros and are flagged in ``valid``.
    """

    def __init__(self, radius):
        if radius < 1:
            raise InvalidArgumentError("ParentTable radius must be >= 1")
        self.radius = int(radius)
        side = 2 * self.radius + 1
        self._f = np.zeros((side, side, 2), dtype=np.int64)
        self._g = np.zeros((side, side, 2), dtype=np.int64)
        self._valid = np.zeros((side, side), dtype=bool)
        for a, b in irreducible_box(self.radius).tolist():
            if a * a + b * b == 1:
                continue
            f, g = _parents(a, b)
            self._f[a + self.radius, b + self.radius] = f
            self._g[a + self.radius, b + self.radius] = g
            self._valid[a + self.radius, b + self.radius] = True

    def __contains__(self, e):
        a, b = int(e[0]) + self.radius, int(e[1]) + self.radius
        side = 2 * self.radius + 1
        return 0 <= a < side and 0 <= b < side and bool(self._valid[a, b])

    def lookup(self, offsets):
        """Returns (f, g, valid) for an array of offsets"""
        e = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
        if np.abs(e).max(initial=0) > self.radius:
            raise InvalidArgumentError(f"Offsets exceed the table radius {self.radius}")
        a, b = e[:, 0] + self.radius, e[:, 1] + self.radius
        return self._f[a, b], self._g[a, b], self._valid[a, b]
