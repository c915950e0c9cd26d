# convgrid
import math
import os

import numpy as np
import pytest
import scipy.optimize
import scipy.sparse as sp

from convgrid import main
from core.config import Config
from core.constraints import (
    Cone,
    assemble,
    convexity_defect,
    form_H,
    form_P,
    form_S,
    form_T,
    is_member,
    quadratic_values,
    restrict_to_sublattice,
)
from core.delaunay import (
    Triangulation,
    flip_to_u_delaunay,
    hessian_det_naive,
    in_circle,
    is_u_delaunay,
    standard_delaunay,
    subgradient_cells,
)
from core.errors import (
    DegenerateDomainError,
    InvalidArgumentError,
    NoParentsError,
    NotConvexError,
    StencilValidationError,
)
from core.experiments import (
    directional_counterexample,
    flip_experiment,
    make_function,
    sample_rng,
    stencil_stats,
)
from core.grid import ConvexPolygon, GridDomain, build_grid, rotation, square_grid
from core.hull import convex_envelope, is_extensible, lower_hull
from core.lattice import (
    ParentTable,
    ancestors,
    children,
    coprime_density,
    cyclic_between,
    is_irreducible,
    lex_positive,
    parents,
)
from core.monopolist import (
    CostModel,
    MethodResult,
    MonopolistInstance,
    bundles_kite,
    bundles_kite_conjecture,
    bundles_square,
    bundles_square_profit,
    bundles_square_solution,
    bundles_triangle,
    bundles_triangle_profit,
    bundles_triangle_solution,
    classical,
    classical_rotated,
    discretize,
    economic_report,
    exact_profit,
    load_instance,
    quadrature_weights,
    solve_instance,
)
from core.refine import (
    ProjectionEnergy,
    RefineSettings,
    certificate,
    run,
    solve_over,
    violated_candidates,
)
from core.solver import ConvexProgram, SolverSettings, Status, active_bounds, active_rows, solve
from core.stencils import (
    StencilFamily,
    extended_candidates,
    fixed_stencils,
    intersect,
    maximal_stencils,
    minimal_stencils,
    minimal_stencils_for,
    random_refinement,
    refine,
    refinement_candidates,
    stencils_of_triangulation,
    union,
    validate,
    worst_case_bound,
)
from utils.file_operations import ensure_dir, read_csv, read_json, read_off, safe_write, write_csv, write_values
from utils.plotting import point_map

SLOW = pytest.mark.skipif(os.environ.get("CONVGRID_SLOW") != "1", reason="set CONVGRID_SLOW=1 to run")
INSTANCES = os.path.join(os.path.dirname(os.path.abspath(__file__)), "instances")


def center_spike(n=3):
    """Zero on an n x n grid except 1 at the center"""
    grid = square_grid(n)
    u = np.zeros(grid.N)
    u[grid.index[(n // 2, n // 2)]] = 1.0
    return grid, u


def random_convex(grid, rng, pieces=6):
    """Max of random affine maps plus a random multiple of q, in lattice coordinates"""
    z = grid.points.astype(float)
    slopes = rng.normal(size=(pieces, 2))
    offsets = rng.normal(size=pieces)
    return (z @ slopes.T + offsets).max(axis=1) + rng.uniform(0.0, 0.5) * quadratic_values(grid)


class TestLattice:
    @pytest.mark.parametrize("e,expected", [((1, 0), True), ((2, 4), False), ((3, 5), True), ((0, -1), True)])
    def test_is_irreducible(self, e, expected):
        """Test the coprimality of coordinates"""
        assert is_irreducible(e) == expected

    def test_zero_vector_rejected(self):
        """Test that the zero vector is an invalid argument"""
        with pytest.raises(InvalidArgumentError):
            is_irreducible((0, 0))
        with pytest.raises(ValueError):
            cyclic_between((1, 0), (0, 0), (0, 1))

    @pytest.mark.parametrize("e,f,g", [((1, 1), (1, 0), (0, 1)), ((1, 2), (1, 1), (0, 1)), ((2, 3), (1, 1), (1, 2))])
    def test_parents(self, e, f, g):
        """Test the Stern-Brocot parents of a few vectors"""
        basis = parents(e)
        assert (basis.f, basis.g) == (f, g)
        assert basis.direct and basis.acute

    def test_parents_brute_force(self):
        """Test parents against an exhaustive search for the direct acute basis"""
        for a in range(-7, 8):
            for b in range(-7, 8):
                if (a, b) == (0, 0) or not is_irreducible((a, b)) or a * a + b * b == 1:
                    continue
                found = []
                for fa in range(-8, 9):
                    for fb in range(-8, 9):
                        ga, gb = a - fa, b - fb
                        if fa * gb - fb * ga == 1 and fa * ga + fb * gb >= 0:
                            found.append(((fa, fb), (ga, gb)))
                assert found == [tuple(parents((a, b)))]

    def test_unit_vector_has_no_parents(self):
        """Test that unit vectors raise the documented error"""
        with pytest.raises(NoParentsError) as e:
            parents((1, 0))
        assert "Unit vectors have no parents." in str(e.value)

    @pytest.mark.parametrize(
        "e,bound,expected",
        [((1, 1), 2.5, {(2, 1), (1, 2)}), ((1, 2), 3.7, {(2, 3), (1, 3)}), ((1, 1), 1, set())],
    )
    def test_children(self, e, bound, expected):
        """Test the children within a norm bound"""
        assert set(children(e, bound)) == expected
        for child in children(e, bound):
            assert e in parents(child)

    def test_ancestors(self):
        """Test ancestor closures and the size bound |e|_inf + 2"""
        assert ancestors((1, 0)) == {(1, 0)}
        assert ancestors((1, 2)) == {(1, 2), (1, 1), (0, 1), (1, 0)}
        anc = ancestors((2, 3))
        assert anc == {(2, 3), (1, 2), (1, 1), (1, 0), (0, 1)}
        assert len(anc) <= 3 + 2

    @pytest.mark.parametrize(
        "f,e,g,expected",
        [((1, 0), (1, 1), (0, 1), True), ((1, 0), (0, 1), (1, 1), False), ((0, 1), (-1, -1), (1, 0), True)],
    )
    def test_cyclic_between(self, f, e, g, expected):
        """Test the strict cyclic trigonometric order"""
        assert cyclic_between(f, e, g) == expected

    def test_lex_positive(self):
        """Test the representative of a line"""
        assert lex_positive((-1, 2)) == (1, -2)
        assert lex_positive((0, -1)) == (0, 1)
        assert lex_positive((2, -1)) == (2, -1)

    def test_coprime_density(self):
        """Test the density of irreducible vectors against 6/pi^2"""
        assert coprime_density(1000) == pytest.approx(6 / math.pi ** 2, rel=0.02)

    def test_parent_table(self):
        """Test the vectorized parent lookup against parents()"""
        table = ParentTable(4)
        offsets = [(2, 1), (-3, 2), (1, 0), (4, -1)]
        f, g, valid = table.lookup(offsets)
        assert valid.tolist() == [True, True, False, True]
        for k, e in enumerate(offsets):
            if valid[k]:
                assert (tuple(f[k]), tuple(g[k])) == tuple(parents(e))
        assert (2, 1) in table
        assert (2, 2) not in table
        with pytest.raises(InvalidArgumentError):
            table.lookup([(5, 1)])


class TestGrid:
    def test_unit_square(self):
        """Test that the unit square with h = 1 holds its four corners"""
        grid = build_grid(ConvexPolygon.rectangle(0, 0, 1, 1), 1.0)
        assert grid.N == 4

    def test_fifty_by_fifty(self):
        """Test the 50 x 50 grid of [1, 2]^2"""
        grid = build_grid(ConvexPolygon.rectangle(1, 1, 2, 2), 1 / 49, 0.0, (49, 49))
        assert grid.N == 2500

    def test_rotated_grid_matches_scan(self):
        """Test a rotated grid against a direct membership scan"""
        square = ConvexPolygon.rectangle(0, 0, 1, 1)
        h, theta = 0.6, math.pi / 4
        grid = build_grid(square, h, theta, (0, 0))
        a, b = np.meshgrid(np.arange(-3, 4), np.arange(-3, 4), indexing="ij")
        z = np.column_stack([a.ravel(), b.ravel()])
        inside = square.contains(h * z @ rotation(theta).T, tol=1e-12 * h)
        assert grid.N == int(inside.sum())

    def test_too_few_points(self):
        """Test that tiny domains are rejected"""
        with pytest.raises(DegenerateDomainError):
            build_grid(ConvexPolygon.rectangle(0, 0, 0.5, 0.5), 1.0)

    def test_polygon_must_be_counterclockwise(self):
        """Test the polygon orientation check"""
        with pytest.raises(InvalidArgumentError):
            ConvexPolygon(((0, 0), (0, 1), (1, 1), (1, 0)))

    def test_max_stencil(self):
        """Test maximal stencils at the center and corner of a 3 x 3 grid"""
        grid = square_grid(3)
        assert len(grid.max_stencil(grid.index[(1, 1)])) == 8
        assert grid.max_stencil(grid.index[(0, 0)]) == {(1, 0), (0, 1), (1, 1), (1, 2), (2, 1)}
        row = GridDomain.from_lattice_points([(0, 0), (1, 0)])
        assert row.max_stencil(0) == {(1, 0)}

    def test_is_supported(self):
        """Test form supports on a 3 x 3 grid"""
        grid = square_grid(3)
        assert grid.is_supported(form_S((1, 1), (1, 0)))
        assert not grid.is_supported(form_S((0, 0), (1, 0)))
        assert grid.is_supported(form_T((1, 1), (1, 1)))

    def test_polygon_helpers(self):
        """Test area, clipping and rotation of polygons"""
        square = ConvexPolygon.rectangle(0, 0, 2, 2)
        assert square.area() == pytest.approx(4.0)
        assert square.diameter() == pytest.approx(2 * math.sqrt(2))
        clipped = square.clip([(1, 1), (3, 1), (3, 3), (1, 3)])
        assert ConvexPolygon(tuple(map(tuple, clipped))).area() == pytest.approx(1.0)
        turned = ConvexPolygon.rotated_square((1, 1), 2, math.pi / 4)
        assert turned.area() == pytest.approx(4.0)
        assert turned.contains([(1, 1 + math.sqrt(2) - 1e-9)]).all()

    def test_descriptor(self):
        """Test that a grid is rebuilt from its descriptor"""
        grid = build_grid(ConvexPolygon.regular_polygon((0, 0), 3.0, 32), 1.0, 0.3, (0.2, 0.7))
        again = GridDomain.from_descriptor(grid.to_descriptor())
        assert np.array_equal(grid.points, again.points)
        assert np.allclose(grid.coords, again.coords)


class TestForms:
    @staticmethod
    def q(site):
        return 0.5 * (site[0] ** 2 + site[1] ** 2)

    def test_weights_sum_to_zero(self):
        """Test that every form annihilates constants"""
        for builder in (form_S, form_T, form_P, form_H):
            assert sum(builder((3, -2), (2, 1)).weights) == 0

    def test_forms_on_quadratic(self):
        """Test S, T, P and H on q"""
        assert form_S((4, 1), (1, 2)).apply(self.q) == 5
        assert form_T((0, 0), (1, 1)).apply(self.q) == 2
        assert form_P((0, 0), (1, 1)).apply(self.q) == 0
        assert form_P((2, 5), (2, 1)).apply(self.q) == 1
        assert form_H((1, 1), (2, 1)).apply(self.q) == 2

    def test_forms_on_affine(self):
        """Test that affine functions are in the kernel"""
        affine = lambda z: 3 * z[0] - 2 * z[1] + 1  # noqa: E731
        for builder in (form_S, form_T, form_P, form_H):
            assert builder((1, 2), (3, 2)).apply(affine) == 0

    def test_spike_and_ramp(self):
        """Test forms on a spike and on a ramp"""
        spike = lambda z: 1 if z == (0, 0) else 0  # noqa: E731
        assert form_S((0, 0), (1, 2)).apply(spike) == -2
        ramp = lambda z: max(0, z[0] + z[1] - 2)  # noqa: E731
        assert form_H((0, 0), (2, 1)).apply(ramp) == 1

    def test_unit_offsets_rejected(self):
        """Test that T, P and H need non-unit offsets"""
        for builder in (form_T, form_P, form_H):
            with pytest.raises(InvalidArgumentError):
                builder((0, 0), (0, 1))

    def test_form_identities(self):
        """Test S^e = H^e + S^f + S^g and T^e = P^e + S^f + S^g"""
        x, e = (1, -1), (3, 2)
        f, g = parents(e)
        assert form_H(x, e) + form_S(x, f) + form_S(x, g) == form_S(x, e).terms()
        assert form_P(x, e) + form_S(x, f) + form_S(x, g) == form_T(x, e).terms()
        assert dict(form_S(x, e).normalized()) == form_S(x, e).terms()

    def test_evaluate_outside_grid(self):
        """Test that forms leaving the grid cannot be evaluated"""
        grid = square_grid(3)
        with pytest.raises(InvalidArgumentError):
            form_S((0, 0), (1, 0)).evaluate(grid, np.zeros(grid.N))


class TestAssembly:
    def test_aligned_points(self):
        """Test that N aligned points carry only the N - 2 second differences"""
        grid = GridDomain.from_lattice_points([(k, 0) for k in range(7)])
        system = assemble(grid, Cone.full_conv())
        assert len(system) == 5
        assert set(system.kinds.tolist()) == {"S"}

    def test_full_conv_brute_force(self):
        """Test the FullConv row count on a 3 x 3 grid against an enumeration"""
        grid = square_grid(3)
        expected = 0
        for i in range(grid.N):
            for e in grid.max_stencil(i):
                if lex_positive(e) == e and grid.has_offset(i, (-e[0], -e[1])):
                    expected += 1
                if e[0] ** 2 + e[1] ** 2 > 1:
                    f, g = parents(e)
                    if grid.has_offset(i, (-f[0], -f[1])) and grid.has_offset(i, (-g[0], -g[1])):
                        expected += 1
        assert len(assemble(grid, Cone.full_conv())) == expected

    def test_conv_v_at_maximal_stencils(self):
        """Test that ConvV over V_max has the FullConv rows and no P row"""
        grid = square_grid(4)
        full = assemble(grid, Cone.full_conv())
        adaptive = assemble(grid, Cone.conv_v(maximal_stencils(grid)))
        assert adaptive.counts()["P"] == 0
        assert {full.key(r) for r in range(len(full))} == {adaptive.key(r) for r in range(len(adaptive))}

    def test_invalid_stencils_rejected(self):
        """Test that ConvV validates its stencils"""
        grid = square_grid(5)
        vmin = minimal_stencils(grid)
        sets = [set(s) for s in vmin]
        sets[grid.index[(2, 2)]].discard((1, 0))
        with pytest.raises(StencilValidationError):
            assemble(grid, Cone.conv_v(StencilFamily(grid, sets)))

    def test_system_rows(self):
        """Test that rows evaluate like their forms"""
        grid = square_grid(4)
        u = np.random.default_rng(3).normal(size=grid.N)
        system = assemble(grid, Cone.dconv_v(minimal_stencils(grid)))
        values = system.evaluate(u)
        for r in range(len(system)):
            assert values[r] == pytest.approx(system.form(r).evaluate(grid, u))
        assert len(system.to_json_rows()) == len(system)

    def test_implicit_equalities_of_conv_v(self):
        """Test that ConvV(V_min) forces exactly the P rows with unit parents to vanish"""
        grid = square_grid(4)
        system = assemble(grid, Cone.conv_v(minimal_stencils(grid)))
        flags = system.implicit_equalities
        unit_parents = (system.kinds == "P") & (np.abs(system.offsets).max(axis=1) == 1)
        assert unit_parents.any()
        assert np.array_equal(flags, unit_parents)
        q = system.evaluate(quadratic_values(grid))
        assert np.allclose(q[flags], 0.0)
        assert np.all(q[~flags] > 0)

    def test_implicit_equalities_of_dconv_v(self):
        """Test that DConvV(V_min) has vanishing H rows and nothing else"""
        grid = square_grid(5)
        system = assemble(grid, Cone.dconv_v(minimal_stencils(grid)))
        flags = system.implicit_equalities
        assert flags.any()
        assert set(system.kinds[flags].tolist()) == {"H"}
        assert np.allclose(system.evaluate(quadratic_values(grid))[flags], 0.0)

    def test_full_cones_have_interior(self):
        """Test that FullConv and DConvX have no implicit equality"""
        grid = square_grid(4)
        assert not assemble(grid, Cone.full_conv()).implicit_equalities.any()
        assert not assemble(grid, Cone.dconv_x()).implicit_equalities.any()


class TestDefect:
    def test_quadratic_and_affine(self):
        """Test that convex functions have no defect"""
        grid = square_grid(5)
        q = quadratic_values(grid)
        assert convexity_defect(grid, q) == 0
        assert convexity_defect(grid, q, "directional") == 0
        z = grid.points.astype(float)
        affine_max = np.maximum(z[:, 0] - 2 * z[:, 1], 0.5 * z[:, 0] + z[:, 1] - 3)
        assert convexity_defect(grid, affine_max) == 0

    def test_center_spike(self):
        """Test the defect of a center spike"""
        grid, u = center_spike()
        assert convexity_defect(grid, u) == pytest.approx(2.0)
        assert convexity_defect(grid, u, "directional") == pytest.approx(2.0)
        assert not is_member(grid, u, Cone.full_conv(), tol=0.0)

    def test_defect_is_tight(self):
        """Test that u + eps q is convex exactly at the defect"""
        grid = square_grid(5)
        u = np.random.default_rng(7).normal(size=grid.N)
        eps = convexity_defect(grid, u)
        q = quadratic_values(grid)
        assert is_member(grid, u + eps * q, Cone.full_conv(), tol=1e-9)
        assert not is_member(grid, u + 0.99 * eps * q, Cone.full_conv(), tol=1e-9)

    def test_size_mismatch(self):
        """Test that value arrays must match the grid"""
        with pytest.raises(InvalidArgumentError):
            convexity_defect(square_grid(3), np.zeros(4))


class TestDirectionalConvexity:
    @pytest.fixture
    def counterexample(self):
        """Directionally convex function that is not convex"""
        return directional_counterexample(3)

    def test_only_one_negative_form(self, counterexample):
        """Test S >= 1, T >= 2 except T_0^(1,1) = -1"""
        grid, u = counterexample
        system = assemble(grid, Cone.full_conv())
        values = system.evaluate(u)
        s_rows = system.rows_of_kind("S")
        t_rows = system.rows_of_kind("T")
        assert values[s_rows].min() >= 1 - 1e-12
        negative = [r for r in t_rows if values[r] < 2 - 1e-12]
        assert len(negative) == 1
        r = negative[0]
        assert system.key(r) == ("T", grid.index[(0, 0)], (1, 1))
        assert values[r] == pytest.approx(-1.0)
        assert form_T((0, 0), (1, 1)).evaluate(grid, u) == pytest.approx(-1.0)

    def test_membership_and_defects(self, counterexample):
        """Test DConvX membership without FullConv membership"""
        grid, u = counterexample
        assert is_member(grid, u, Cone.dconv_x())
        assert not is_member(grid, u, Cone.full_conv())
        assert not is_extensible(grid, u)
        assert convexity_defect(grid, u) == pytest.approx(0.5)
        assert convexity_defect(grid, u, "directional") == 0

    @pytest.mark.parametrize("trials", [20, pytest.param(100, marks=SLOW)])
    def test_coarse_grid_is_convex(self, trials):
        """Test that directionally convex functions are convex on X ∩ 2Z^2"""
        grid = square_grid(9)
        rng = np.random.default_rng(11)
        base = 2.0 * (grid.points.astype(float) ** 2).sum(axis=1)
        for _ in range(trials):
            u = base + rng.uniform(-1.0, 1.0, size=grid.N)
            assert is_member(grid, u, Cone.dconv_x(), tol=0.0)
            coarse, v = restrict_to_sublattice(grid, u)
            assert coarse.N == 25
            assert is_member(coarse, v, Cone.full_conv(), tol=0.0)


class TestStencils:
    @pytest.fixture
    def grid(self):
        """5 x 5 unit grid"""
        return square_grid(5)

    def test_minimal_stencils(self, grid):
        """Test V_min at interior points and corners"""
        vmin = minimal_stencils(grid)
        assert vmin[grid.index[(2, 2)]] == {(1, 0), (0, 1), (-1, 0), (0, -1)}
        small = square_grid(3)
        assert minimal_stencils(small)[small.index[(0, 0)]] == {(1, 0), (0, 1)}
        row = GridDomain.from_lattice_points([(k, 0) for k in range(5)])
        assert minimal_stencils(row)[2] == {(1, 0), (-1, 0)}

    def test_minimal_and_maximal_validate(self, grid):
        """Test that V_min and V_max are stencil families"""
        assert validate(minimal_stencils(grid))
        assert validate(maximal_stencils(grid))
        assert validate(fixed_stencils(grid, 2))

    def test_visibility_violation(self, grid):
        """Test a missing unit vector at an interior point"""
        sets = [set(s) for s in minimal_stencils(grid)]
        center = grid.index[(2, 2)]
        sets[center].discard((1, 0))
        report = validate(StencilFamily(grid, sets))
        assert not report
        assert report.violation == "visibility"
        assert report.point == center

    def test_stability_violation(self, grid):
        """Test an offset whose parent is missing"""
        sets = [set(s) for s in minimal_stencils(grid)]
        center = grid.index[(2, 2)]
        sets[center].add((2, 1))
        report = validate(StencilFamily(grid, sets))
        assert report.violation == "stability"
        assert report.offset == (2, 1)

    def test_refinement_candidates(self, grid):
        """Test candidates of V_min and V_max"""
        center = grid.index[(2, 2)]
        assert refinement_candidates(minimal_stencils(grid), center) == {(1, 1), (-1, 1), (-1, -1), (1, -1)}
        vmax = maximal_stencils(grid)
        assert all(not refinement_candidates(vmax, i) for i in range(grid.N))
        row = GridDomain.from_lattice_points([(k, 0) for k in range(5)])
        assert not refinement_candidates(minimal_stencils(row), 2)

    def test_extended_candidates(self, grid):
        """Test the rho-extended candidates"""
        vmin = minimal_stencils(grid)
        center = grid.index[(2, 2)]
        assert extended_candidates(vmin, center, 1.0) == refinement_candidates(vmin, center)
        wide = extended_candidates(vmin, center, 1.5)
        assert refinement_candidates(vmin, center) < wide
        assert (2, 1) in wide and (-1, 2) in wide
        row = GridDomain.from_lattice_points([(k, 0) for k in range(3)])
        assert not extended_candidates(minimal_stencils(row), 1, 3.0)
        with pytest.raises(InvalidArgumentError):
            extended_candidates(vmin, center, 0.5)

    def test_refine(self, grid):
        """Test refinement by candidates, with ancestors added"""
        vmin = minimal_stencils(grid)
        center = grid.index[(2, 2)]
        assert refine(vmin, []) is vmin
        once = refine(vmin, [(center, (1, 1))])
        assert once.count() == vmin.count() + 1
        assert once[center] - vmin[center] == {(1, 1)}
        assert validate(once)
        deeper = refine(vmin, [(center, (2, 1))])
        assert {(2, 1), (1, 1)} <= deeper[center]
        assert validate(deeper)
        with pytest.raises(InvalidArgumentError):
            refine(vmin, [(grid.index[(0, 0)], (-1, 0))])

    def test_union_and_intersection(self, grid):
        """Test the lattice operations on stencil families"""
        rng = np.random.default_rng(5)
        vmin, vmax = minimal_stencils(grid), maximal_stencils(grid)
        V = random_refinement(vmin, rng, steps=6, rho=1.5)
        assert intersect(V, vmax) == V
        assert union(vmin, V) == V
        W = random_refinement(vmin, rng, steps=6, rho=1.5)
        assert validate(intersect(V, W))
        assert validate(union(V, W))

    def test_json(self, grid):
        """Test saving and loading stencils"""
        V = refine(minimal_stencils(grid), [(grid.index[(2, 2)], (1, 1))])
        assert StencilFamily.from_json(grid, V.to_json()) == V
        with pytest.raises(InvalidArgumentError):
            StencilFamily.from_json(square_grid(4), V.to_json())


class TestHierarchy:
    @pytest.mark.parametrize("pairs,samples", [(8, 8), pytest.param(50, 50, marks=SLOW)])
    def test_intersection_identity(self, pairs, samples):
        """Test Conv(V) ∩ Conv(V') = Conv(V ∩ V') on random families and functions"""
        grid = square_grid(6)
        rng = np.random.default_rng(21)
        vmin = minimal_stencils(grid)
        for _ in range(pairs):
            V = random_refinement(vmin, rng, steps=8)
            W = random_refinement(vmin, rng, steps=8)
            both = intersect(V, W)
            assert validate(both)
            for _ in range(samples):
                u = random_convex(grid, rng) + 0.05 * rng.normal(size=grid.N)
                in_v = is_member(grid, u, Cone.conv_v(V))
                in_w = is_member(grid, u, Cone.conv_v(W))
                assert is_member(grid, u, Cone.conv_v(both)) == (in_v and in_w)

    def test_sub_cones_are_convex(self):
        """Test Conv(V) ⊂ Conv(X) ⊂ Conv'(V) on sampled functions"""
        grid = square_grid(6)
        rng = np.random.default_rng(4)
        V = random_refinement(minimal_stencils(grid), rng, steps=5)
        for _ in range(40):
            u = random_convex(grid, rng) + 0.05 * rng.normal(size=grid.N)
            if is_member(grid, u, Cone.conv_v(V)):
                assert is_member(grid, u, Cone.full_conv())
            if is_member(grid, u, Cone.full_conv()):
                assert is_member(grid, u, Cone.conv_prime_v(V))


class TestMinimalStencilsFor:
    def test_quadratic_and_affine(self):
        """Test that q and affine functions need only V_min"""
        grid = square_grid(6)
        vmin = minimal_stencils(grid)
        assert minimal_stencils_for(grid, quadratic_values(grid)) == vmin
        z = grid.points.astype(float)
        assert minimal_stencils_for(grid, 2 * z[:, 0] - z[:, 1]) == vmin

    def test_absolute_value(self):
        """Test |z_1| on a 5 x 5 grid"""
        grid = square_grid(5)
        V = minimal_stencils_for(grid, np.abs(grid.points[:, 0] - 2.0))
        assert all(max(abs(a), abs(b)) <= 1 for s in V for a, b in s)

    def test_characterization(self):
        """Test that the family contains u and is minimal among refinements"""
        rng = np.random.default_rng(9)
        grid = square_grid(8)
        for _ in range(10):
            u = random_convex(grid, rng)
            V = minimal_stencils_for(grid, u)
            assert validate(V)
            assert is_member(grid, u, Cone.conv_v(V))
            assert V.count() <= worst_case_bound(grid)

    def test_no_violated_candidate_left(self):
        """Test that refinement from the returned family adds nothing"""
        rng = np.random.default_rng(21)
        grid = square_grid(7)
        for _ in range(5):
            u = random_convex(grid, rng)
            V = minimal_stencils_for(grid, u)
            assert violated_candidates(V, u) == []
            assert minimal_stencils_for(grid, u) == V

    def test_leaf_offsets_are_needed(self):
        """Test that dropping any offset that is no other offset's ancestor loses u"""
        rng = np.random.default_rng(22)
        grid = square_grid(6)
        vmin = minimal_stencils(grid)
        checked = 0
        for _ in range(4):
            u = random_convex(grid, rng)
            V = minimal_stencils_for(grid, u)
            for i in range(grid.N):
                for e in V[i] - vmin[i]:
                    if any(e in ancestors(f) for f in V[i] if f != e):
                        continue
                    sets = [set(s) for s in V]
                    sets[i].discard(e)
                    smaller = StencilFamily(grid, sets)
                    assert validate(smaller)
                    assert not is_member(grid, u, Cone.conv_v(smaller))
                    checked += 1
                    if checked % 3 == 0:
                        break
        assert checked > 0

    def test_not_convex(self):
        """Test that a spike is rejected"""
        grid, u = center_spike(5)
        with pytest.raises(NotConvexError):
            minimal_stencils_for(grid, u)


class TestHull:
    def test_square_corners(self):
        """Test the four corners lifted by 2q"""
        hull = lower_hull(np.array([[0, 0], [1, 0], [0, 1], [1, 1]]), np.array([0, 1, 1, 2]))
        assert len(hull.triangles) == 2
        assert hull.on_hull.all()

    def test_quadratic_lift(self):
        """Test that a strictly convex lift keeps every site"""
        grid = square_grid(3)
        hull = lower_hull(grid.points, (grid.points ** 2).sum(axis=1))
        assert hull.on_hull.all()
        assert is_extensible(grid, quadratic_values(grid))

    def test_center_spike(self):
        """Test the spike against its envelope"""
        grid, u = center_spike()
        center = grid.index[(1, 1)]
        hull = lower_hull(grid.points, u.astype(np.int64))
        assert not hull.on_hull[center]
        env = convex_envelope(grid, u)
        assert env[center] == pytest.approx(0.0)
        assert not is_extensible(grid, u)

    def test_spike_on_quadratic(self):
        """Test that the envelope of q plus a spike lies between q and the spike"""
        grid = square_grid(3)
        q = quadratic_values(grid)
        u = q.copy()
        center = grid.index[(1, 1)]
        u[center] += 1.0
        env = convex_envelope(grid, u)
        assert env[center] == pytest.approx(1.5)
        assert np.allclose(np.delete(env, center), np.delete(q, center))

    def test_collinear_sites(self):
        """Test that collinear sites are rejected"""
        with pytest.raises(DegenerateDomainError):
            lower_hull(np.array([[0, 0], [1, 0], [2, 0]]), np.array([0.0, 1.0, 0.0]))

    def test_exact_and_qhull_agree(self):
        """Test both hull methods on a random convex function"""
        grid = square_grid(6)
        u = random_convex(grid, np.random.default_rng(2)) + 0.1 * np.random.default_rng(3).normal(size=grid.N)
        exact = lower_hull(grid.points, u, method="exact").envelope()
        qhull = lower_hull(grid.points, u, method="qhull").envelope()
        assert np.allclose(exact, qhull, atol=1e-7)

    def test_float_and_integer_values_agree(self):
        """Test the floating-point plane tests against the integer ones"""
        grid, u = directional_counterexample(3)
        exact = lower_hull(grid.points, u, method="exact")
        integer = lower_hull(grid.points, u.astype(np.int64), method="exact")
        assert np.array_equal(exact.triangles, integer.triangles)
        qhull = lower_hull(grid.points, u, method="qhull")
        assert np.allclose(exact.envelope(), qhull.envelope(), atol=1e-7)
        assert np.all(exact.envelope() <= u + 1e-9)
        assert not is_extensible(grid, u)
        assert not is_extensible(grid, u.astype(np.int64))

    def test_envelope_is_idempotent(self):
        """Test that the envelope stays below u and is its own envelope"""
        rng = np.random.default_rng(31)
        grid = square_grid(6)
        for _ in range(6):
            u = rng.normal(size=grid.N) + rng.uniform(0.0, 1.0) * quadratic_values(grid)
            env = convex_envelope(grid, u)
            assert np.all(env <= u + 1e-12)
            assert np.allclose(convex_envelope(grid, env), env, atol=1e-9)
            assert is_extensible(grid, env)

    def test_exact_profit_on_a_coarse_grid(self):
        """Test the facet-wise profit where the exact hull handles float values"""
        square = bundles_square()
        grid = square.build_grid(10)
        profit = exact_profit(square, grid, bundles_square_solution(grid.coords))
        assert math.isfinite(profit)
        assert profit == pytest.approx(bundles_square_profit(), abs=5e-2)

    @pytest.mark.parametrize("trials", [60, pytest.param(500, marks=SLOW)])
    def test_membership_matches_extensibility(self, trials):
        """Test FullConv membership against the lower hull on integer functions"""
        rng = np.random.default_rng(1)
        disagreements = 0
        for k in range(trials):
            grid = square_grid(3 + k % 3)
            z = grid.points
            slopes = rng.integers(-3, 4, size=(3, 2))
            offsets = rng.integers(-3, 4, size=3)
            u = (z @ slopes.T + offsets).max(axis=1) + rng.integers(0, 2) * (z ** 2).sum(axis=1)
            if rng.random() < 0.6:
                u[rng.integers(grid.N)] += rng.integers(-2, 3)
            u = u.astype(np.int64)
            member = is_member(grid, u, Cone.full_conv(), tol=0.0)
            disagreements += member != is_extensible(grid, u)
        assert disagreements == 0


class TestDelaunay:
    def test_in_circle(self):
        """Test the in-circle predicate"""
        assert in_circle((1, 0), (0, 1), 0) == 0
        assert in_circle((1, 0), (0, 1), 1) == 0
        assert in_circle((1, 0), (1, 1), 1) == 2
        assert in_circle((1, 0), (0, 1), 2) == 2
        with pytest.raises(InvalidArgumentError):
            in_circle((1, 1), (1, 0), 1)

    @pytest.mark.parametrize("n", [2, 3, 6])
    def test_standard_delaunay(self, n):
        """Test triangle counts and validity on square grids"""
        grid = square_grid(n)
        T = standard_delaunay(grid)
        assert len(T.triangles) == 2 * (n - 1) ** 2
        assert T.validate()
        assert is_u_delaunay(T, quadratic_values(grid))

    def test_collinear(self):
        """Test that collinear grids have no triangulation"""
        with pytest.raises(DegenerateDomainError):
            standard_delaunay(GridDomain.from_lattice_points([(0, 0), (1, 0), (2, 0)]))

    def test_single_flip(self):
        """Test the flip of a wrong diagonal on a 2 x 2 grid"""
        grid = square_grid(2)
        T = standard_delaunay(grid)
        (i, j), = T.interior_edges()
        u = np.zeros(grid.N)
        u[[i, j]] = 1.0
        assert not is_u_delaunay(T, u)
        flipped, flips = flip_to_u_delaunay(T, u)
        assert flips == 1
        assert is_u_delaunay(flipped, u)
        assert flipped.interior_edges() != T.interior_edges()

    def test_flips_on_convex_functions(self):
        """Test flip counts against #(V_T ∪ V_u)"""
        rng = np.random.default_rng(6)
        grid = build_grid(ConvexPolygon.rectangle(0, 0, 7, 7), 1.0, 0.4, (0.3, 0.6))
        start = standard_delaunay(grid)
        _, zero = flip_to_u_delaunay(start, quadratic_values(grid))
        assert zero == 0
        for _ in range(5):
            u = make_function("quadratic", rng)(grid.coords)
            T, flips = flip_to_u_delaunay(start, u)
            assert is_u_delaunay(T, u)
            assert T.validate()
            bound = union(stencils_of_triangulation(start), minimal_stencils_for(grid, u)).count()
            assert flips <= bound

    def test_flip_history(self):
        """Test that every flip lowers the edge midpoint, creates a new edge and ends on the lower hull"""
        rng = np.random.default_rng(17)
        grid = square_grid(6)
        z = grid.points.astype(float)
        start = standard_delaunay(grid)
        for _ in range(4):
            L = rng.normal(size=(2, 2))
            A = np.array([[1.0, 3.0], [3.0, 10.0]]) + 0.01 * L @ L.T
            u = 0.5 * np.einsum("ij,jk,ik->i", z, A, z) + z @ rng.normal(size=2)
            history = []
            T, flips = flip_to_u_delaunay(start, u, history=history)
            assert flips == len(history) > 0
            assert all(r.after < r.before for r in history)
            created = [(r.base, r.offset) for r in history]
            assert len(set(created)) == len(created)
            assert is_u_delaunay(T, u)
            hull = lower_hull(grid.points, u)
            assert {frozenset(t) for t in T.triangles.tolist()} == {frozenset(t) for t in hull.triangles.tolist()}

    def test_subgradient_cells_of_random_convex(self):
        """Test that the cells tile the gradient image of the interior points"""
        rng = np.random.default_rng(18)
        grid = square_grid(8)
        u = quadratic_values(grid) + 0.2 * random_convex(grid, rng)
        cells = subgradient_cells(grid, u)
        assert len(cells.points) == 36
        assert np.all(cells.areas >= 0)
        assert len(cells.polygons) == len(cells.points)

    def test_not_convex(self):
        """Test that flipping refuses non-convex lifts"""
        grid, u = center_spike(4)
        with pytest.raises(NotConvexError):
            flip_to_u_delaunay(standard_delaunay(grid), 10 * u)

    def test_stencils_of_delaunay(self):
        """Test that Delaunay stencils are the edge offsets"""
        grid = square_grid(6)
        T = standard_delaunay(grid)
        V = stencils_of_triangulation(T)
        assert all(V[i] == T.edge_offsets(i) for i in range(grid.N))
        assert validate(V)
        assert V.count() <= 6 * (grid.N - 2)

    def test_long_edge_ancestors(self):
        """Test that a long edge pulls in its ancestors"""
        grid = GridDomain.from_lattice_points([(0, 0), (1, 0), (2, 1), (3, 1)])
        T = Triangulation(grid, [(0, 1, 3), (0, 3, 2)])
        assert T.validate()
        assert stencils_of_triangulation(T)[0] == {(3, 1), (2, 1), (1, 0)}

    def test_subgradient_cells_of_quadratic(self):
        """Test that q has unit Hessian determinant estimates"""
        grid = square_grid(6)
        q = quadratic_values(grid)
        cells = subgradient_cells(grid, q)
        assert len(cells.points) == 16
        assert np.allclose(cells.det_estimates, 1.0)
        naive = hessian_det_naive(grid, q)
        assert np.allclose(naive[cells.points], 1.0)
        assert np.isnan(naive[grid.index[(0, 0)]])


class TestSolver:
    def test_projection(self):
        """Test min 1/2 |u - b|^2 subject to u >= 0"""
        b = np.array([1.0, -2.0, 3.0])
        program = ConvexProgram(n=3, quadratic=sp.identity(3), linear=-b, constraints=sp.csr_matrix((0, 3)), lower=np.zeros(3))
        solution = solve(program)
        assert solution.optimal
        assert np.allclose(solution.primal, [1.0, 0.0, 3.0], atol=1e-6)
        assert np.allclose(solution.bound_duals, [0.0, 2.0, 0.0], atol=1e-6)
        assert active_bounds(solution) == {1}

    def test_single_row(self):
        """Test min 1/2 |u|^2 - u_1 subject to u_2 - u_1 >= 0"""
        program = ConvexProgram(
            n=2, quadratic=sp.identity(2), linear=np.array([-1.0, 0.0]), constraints=sp.csr_matrix([[-1.0, 1.0]])
        )
        solution = solve(program)
        assert np.allclose(solution.primal, [0.5, 0.5], atol=1e-6)
        assert solution.duals[0] == pytest.approx(0.5, abs=1e-6)
        assert active_rows(solution) == {0}

    def test_inactive_row(self):
        """Test that an interior optimum has no active row"""
        program = ConvexProgram(
            n=2, quadratic=sp.identity(2), linear=np.array([-1.0, -1.0]), constraints=sp.csr_matrix([[1.0, 1.0]])
        )
        solution = solve(program)
        assert np.allclose(solution.primal, [1.0, 1.0], atol=1e-6)
        assert active_rows(solution) == set()

    def test_linear_program_with_constant(self):
        """Test min -u_1 subject to 1 - u_1 >= 0, the constant carried by a fixed variable"""
        program = ConvexProgram(
            n=2, quadratic=None, linear=np.array([-1.0, 0.0]), constraints=sp.csr_matrix([[-1.0, 1.0]]), fixed={1: 1.0}
        )
        solution = solve(program)
        assert solution.optimal
        assert solution.primal[0] == pytest.approx(1.0, abs=1e-6)
        assert solution.primal[1] == 1.0
        assert solution.duals[0] == pytest.approx(1.0, abs=1e-6)

    def test_infeasible(self):
        """Test that contradictory rows do not report an optimum"""
        program = ConvexProgram(
            n=2,
            quadratic=None,
            linear=np.array([1.0, 0.0]),
            constraints=sp.csr_matrix([[1.0, -1.0], [-1.0, -1.0]]),
            fixed={1: 1.0},
        )
        solution = solve(program, SolverSettings(max_iter=80))
        assert not solution.optimal
        with pytest.raises(InvalidArgumentError):
            active_rows(solution)

    def test_equality_rows(self):
        """Test min 1/2 |u - b|^2 subject to u_1 = u_2 and u_3 >= 0"""
        b = np.array([1.0, 3.0, -1.0])
        A = np.array([[1.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
        program = ConvexProgram(
            n=3, quadratic=sp.identity(3), linear=-b, constraints=sp.csr_matrix(A), equalities=np.array([True, False])
        )
        solution = solve(program)
        assert solution.optimal
        assert np.allclose(solution.primal, [2.0, 2.0, 0.0], atol=1e-6)
        assert np.allclose(solution.duals, [1.0, 1.0], atol=1e-6)
        assert active_rows(solution) == {0, 1}

    def test_opposite_rows_as_equalities(self):
        """Test a pair of opposite rows whose multipliers share the weight"""
        b = np.array([1.0, 3.0])
        program = ConvexProgram(
            n=2,
            quadratic=sp.identity(2),
            linear=-b,
            constraints=sp.csr_matrix([[1.0, -1.0], [-1.0, 1.0]]),
            equalities=np.array([True, True]),
        )
        solution = solve(program)
        assert solution.optimal
        assert np.allclose(solution.primal, [2.0, 2.0], atol=1e-6)
        assert solution.duals[0] - solution.duals[1] == pytest.approx(1.0, abs=1e-6)
        assert np.allclose(solution.multiplier_strength(), [0.5, 0.5], atol=1e-6)
        assert np.array_equal(solution.activity, [1.0, 1.0])

    def test_equalities_with_inequalities(self):
        """Test random programs with equality rows against SLSQP"""
        rng = np.random.default_rng(13)
        for _ in range(5):
            n, m = 6, 5
            L = rng.normal(size=(n, n))
            Q = L @ L.T + 0.1 * np.eye(n)
            c = rng.normal(size=n)
            A = rng.normal(size=(m, n))
            equalities = np.array([True, True, False, False, False])
            program = ConvexProgram(n=n, quadratic=sp.csr_matrix(Q), linear=c, constraints=sp.csr_matrix(A), equalities=equalities)
            solution = solve(program)
            assert solution.optimal
            reference = scipy.optimize.minimize(
                lambda x: 0.5 * x @ Q @ x + c @ x,
                np.zeros(n),
                jac=lambda x: Q @ x + c,
                constraints=[
                    {"type": "eq", "fun": lambda x: A[:2] @ x, "jac": lambda x: A[:2]},
                    {"type": "ineq", "fun": lambda x: A[2:] @ x, "jac": lambda x: A[2:]},
                ],
                method="SLSQP",
                options={"ftol": 1e-14, "maxiter": 500},
            )
            assert solution.objective == pytest.approx(reference.fun, abs=1e-6)
            assert np.abs(A[:2] @ solution.primal).max() < 1e-7
            assert np.all(solution.duals[2:] >= -1e-9)
            gradient = Q @ solution.primal + c - A.T @ solution.duals
            assert np.abs(gradient).max() < 1e-6

    def test_stalled_solve_is_inaccurate(self):
        """Test that a best iterate within 100 times the tolerance is usable but not optimal"""
        rng = np.random.default_rng(14)
        n = 5
        L = rng.normal(size=(n, n))
        program = ConvexProgram(
            n=n,
            quadratic=sp.csr_matrix(L @ L.T + 0.1 * np.eye(n)),
            linear=rng.normal(size=n),
            constraints=sp.csr_matrix(rng.normal(size=(4, n))),
        )
        truncated = solve(program, SolverSettings(tol_rel=1e-30, max_iter=3))
        assert truncated.status == Status.MAX_ITER
        assert not truncated.usable
        reached = max(truncated.kkt_residuals.values())
        stalled = solve(program, SolverSettings(tol_rel=reached / 10, max_iter=3))
        assert stalled.status == Status.INACCURATE
        assert stalled.usable and not stalled.optimal
        assert np.allclose(stalled.primal, truncated.primal)
        active_rows(stalled)

    def test_invalid_programs(self):
        """Test program validation"""
        with pytest.raises(InvalidArgumentError):
            ConvexProgram(n=2, quadratic=sp.csr_matrix([[1.0, 0.0], [0.0, -1.0]]), linear=np.zeros(2), constraints=sp.csr_matrix((0, 2))).validate()
        with pytest.raises(InvalidArgumentError):
            ConvexProgram(n=2, quadratic=None, linear=np.zeros(2), constraints=sp.csr_matrix([[0.0, 0.0]])).validate()
        with pytest.raises(InvalidArgumentError):
            ConvexProgram(n=2, quadratic=None, linear=np.zeros(3), constraints=sp.csr_matrix((0, 2))).validate()
        with pytest.raises(InvalidArgumentError):
            ConvexProgram(
                n=2, quadratic=None, linear=np.zeros(2), constraints=sp.csr_matrix([[1.0, 0.0]]), equalities=np.array([True, False])
            ).validate()

    @pytest.mark.parametrize("trials", [10, pytest.param(100, marks=SLOW)])
    def test_random_programs(self, trials):
        """Test objectives against SLSQP and the dual feasibility of the multipliers"""
        rng = np.random.default_rng(12)
        for _ in range(trials):
            n, m = 5, 4
            L = rng.normal(size=(n, n))
            Q = L @ L.T + 0.1 * np.eye(n)
            c = rng.normal(size=n)
            A = rng.normal(size=(m, n))
            program = ConvexProgram(n=n, quadratic=sp.csr_matrix(Q), linear=c, constraints=sp.csr_matrix(A))
            solution = solve(program)
            assert solution.optimal
            reference = scipy.optimize.minimize(
                lambda x: 0.5 * x @ Q @ x + c @ x,
                np.zeros(n),
                jac=lambda x: Q @ x + c,
                constraints=[{"type": "ineq", "fun": lambda x: A @ x, "jac": lambda x: A}],
                method="SLSQP",
                options={"ftol": 1e-14, "maxiter": 500},
            )
            assert solution.objective == pytest.approx(reference.fun, abs=1e-6)
            assert np.all(solution.duals >= -1e-9)
            gradient = Q @ solution.primal + c - A.T @ solution.duals
            assert np.abs(gradient).max() < 1e-6
            again = solve(program, warm_start=solution.primal)
            assert again.objective == pytest.approx(solution.objective, abs=1e-6)

    def test_export_and_load(self, tmp_path):
        """Test the Matrix-Market program files"""
        program = ConvexProgram(
            n=3,
            quadratic=sp.identity(3),
            linear=np.array([1.0, 2.0, 3.0]),
            constraints=sp.csr_matrix([[1.0, -1.0, 0.0], [0.0, 1.0, 1.0]]),
            lower=np.array([0.0, -np.inf, 0.0]),
            fixed={2: 1.0},
            equalities=np.array([False, True]),
        )
        prefix = os.path.join(tmp_path, "program")
        program.export(prefix)
        loaded = ConvexProgram.load(prefix)
        assert loaded.n == 3
        assert loaded.fixed == {2: 1.0}
        assert np.array_equal(loaded.lower, program.lower)
        assert abs(loaded.constraints - program.constraints).max() == 0
        assert loaded.equalities.tolist() == [False, True]


class TestRefinement:
    @pytest.fixture
    def grid(self):
        """5 x 5 unit grid"""
        return square_grid(5)

    def test_settings_validation(self):
        """Test refinement settings checks"""
        with pytest.raises(InvalidArgumentError):
            RefineSettings(rho=0.9)
        with pytest.raises(InvalidArgumentError):
            RefineSettings(cone_family="cone")
        with pytest.raises(InvalidArgumentError):
            RefineSettings(algorithm=3)

    def test_projection_of_quadratic_supercones(self, grid):
        """Test that projecting q stops after one super-cone iteration"""
        q = quadratic_values(grid)
        result = run(ProjectionEnergy(q), grid, RefineSettings(algorithm=2))
        assert result.converged
        assert len(result.iterations) == 1
        assert result.iterations[0].added == 0
        assert np.allclose(result.values, q, atol=1e-6)

    def test_projection_of_quadratic_subcones(self, grid):
        """Test that projecting q with sub-cones returns q"""
        q = quadratic_values(grid)
        result = run(ProjectionEnergy(q), grid, RefineSettings(algorithm=1))
        assert result.converged
        assert np.allclose(result.values, q, atol=1e-6)

    @pytest.mark.parametrize("family,mode", [("conv", "full"), ("dconv", "directional")])
    def test_algorithms_agree_with_direct_solve(self, grid, family, mode):
        """Test both refinement loops against the solve over the whole cone"""
        target = np.random.default_rng(8).normal(size=grid.N)
        energy = ProjectionEnergy(target)
        whole = Cone.full_conv() if family == "conv" else Cone.dconv_x()
        direct, _, _ = solve_over(energy, grid, whole)
        for algorithm in (1, 2):
            result = run(energy, grid, RefineSettings(algorithm=algorithm, cone_family=family))
            assert result.converged
            assert result.objective == pytest.approx(direct.objective, rel=1e-6, abs=1e-7)
            assert certificate(result, family) <= 1e-6
            assert convexity_defect(grid, result.values, mode) <= 1e-6

    def test_supercone_objectives_increase(self, grid):
        """Test the monotone objectives and the final stencils of Algorithm 2"""
        target = np.random.default_rng(10).normal(size=grid.N)
        result = run(ProjectionEnergy(target), grid, RefineSettings(algorithm=2, rho=1.5))
        objectives = [r.objective for r in result.iterations]
        assert all(b >= a - 1e-7 for a, b in zip(objectives, objectives[1:]))
        counts = [r.stencil_count for r in result.iterations]
        assert all(b > a for a, b in zip(counts, counts[1:]))
        needed = minimal_stencils_for(grid, result.values, tol=1e-6)
        assert needed.issubset(result.stencils)

    @pytest.mark.parametrize("family,whole", [("conv", Cone.full_conv()), ("dconv", Cone.dconv_x())])
    @pytest.mark.parametrize("seeds", [range(4), pytest.param(range(4, 20), marks=SLOW)])
    def test_random_targets(self, grid, family, whole, seeds):
        """Test both loops on random projections: monotone objectives and the same minimizer"""
        for seed in seeds:
            energy = ProjectionEnergy(np.random.default_rng(seed).normal(size=grid.N))
            direct, _, _ = solve_over(energy, grid, whole)
            for rho in (1.0, 1.5):
                inner = run(energy, grid, RefineSettings(algorithm=1, cone_family=family, rho=rho))
                assert inner.converged
                objectives = [r.objective for r in inner.iterations]
                assert all(b <= a + 1e-7 for a, b in zip(objectives, objectives[1:]))
                assert inner.objective == pytest.approx(direct.objective, rel=1e-6, abs=1e-7)
            outer = run(energy, grid, RefineSettings(algorithm=2, cone_family=family))
            objectives = [r.objective for r in outer.iterations]
            assert all(b >= a - 1e-7 for a, b in zip(objectives, objectives[1:]))
            assert outer.objective == pytest.approx(direct.objective, rel=1e-6, abs=1e-7)
            assert np.allclose(inner.values, outer.values, atol=1e-3)

    def test_subcone_solves_flag_equalities(self, grid):
        """Test that the first sub-cone solve carries the vanishing rows as equalities"""
        energy = ProjectionEnergy(np.random.default_rng(3).normal(size=grid.N))
        solution, system, start = solve_over(energy, grid, Cone.conv_v(minimal_stencils(grid)))
        assert solution.usable
        assert np.array_equal(solution.equalities[start:], system.implicit_equalities)
        assert np.abs(system.evaluate(solution.primal[: grid.N])[system.implicit_equalities]).max() < 1e-7

    def test_trace(self, grid, tmp_path):
        """Test the run trace CSV"""
        result = run(ProjectionEnergy(np.random.default_rng(1).normal(size=grid.N)), grid)
        path = os.path.join(tmp_path, "trace.csv")
        result.write_trace(path, {"seed": 1})
        meta, header, rows = read_csv(path)
        assert meta["schema"] == "1"
        assert meta["seed"] == "1"
        assert header == ["iteration", "stencil_count", "constraint_count", "objective", "violations", "wall_time"]
        assert len(rows) == len(result.iterations)

    def test_collinear_grid(self):
        """Test that refinement needs a two dimensional grid"""
        grid = GridDomain.from_lattice_points([(k, 0) for k in range(4)])
        with pytest.raises(InvalidArgumentError):
            run(ProjectionEnergy(np.zeros(4)), grid)


class TestMonopolist:
    def test_quadrature_weights(self):
        """Test that the quadrature carries the customer mass"""
        for instance in (classical(), classical_rotated(0.3), bundles_triangle()):
            grid = instance.build_grid(11)
            weights = quadrature_weights(instance, grid)
            assert np.all(weights >= 0)
            assert weights.sum() == pytest.approx(instance.total_mass(), rel=1e-9)

    def test_quadratic_objective_of_q(self):
        """Test that U = q costs h^2/4 per unit mass with one-sided differences"""
        instance = classical()
        grid = instance.build_grid(11)
        program = discretize(instance, grid)
        u = 0.5 * (grid.coords ** 2).sum(axis=1)
        assert program.objective(u) == pytest.approx(grid.h ** 2 / 4, rel=1e-9, abs=1e-12)

    def test_objective_gradient(self):
        """Test the assembled quadratic form against central differences"""
        instance = classical()
        grid = instance.build_grid(5)
        program = discretize(instance, grid)
        u = np.random.default_rng(0).normal(size=grid.N)
        gradient = program.quadratic @ u + program.linear
        eps = 1e-6
        for i in range(grid.N):
            step = np.zeros(grid.N)
            step[i] = eps
            fd = (program.objective(u + step) - program.objective(u - step)) / (2 * eps)
            assert fd == pytest.approx(gradient[i], rel=1e-6, abs=1e-8)

    def test_bundle_rows(self):
        """Test that gradients above 1 violate the bundle rows"""
        instance = bundles_square()
        grid = instance.build_grid(6)
        program = discretize(instance, grid)
        assert program.n == grid.N + 1
        assert program.fixed == {grid.N: 1.0}
        steep = np.concatenate([2.0 * grid.coords[:, 0], [1.0]])
        assert (program.constraints @ steep).min() < 0
        gentle = np.concatenate([0.5 * grid.coords[:, 0], [1.0]])
        assert (program.constraints @ gentle).min() >= -1e-12

    def test_no_cost_model(self):
        """Test that the cost-free model is not discretized"""
        instance = MonopolistInstance((ConvexPolygon.rectangle(0, 0, 1, 1),), CostModel.NONE)
        with pytest.raises(InvalidArgumentError):
            discretize(instance, instance.build_grid(4))

    def test_cost_model(self):
        """Test costs inside and outside their domains"""
        assert CostModel.QUADRATIC.cost([1.0, 2.0]) == pytest.approx(2.5)
        assert CostModel.QUADRATIC.cost([-1.0, 0.0]) == np.inf
        assert CostModel.BUNDLE.cost([1.0, 0.0]) == 0.0
        assert CostModel.BUNDLE.cost([1.5, 0.0]) == np.inf

    def test_null_catalog(self):
        """Test that U = 0 makes no profit"""
        instance = classical()
        grid = instance.build_grid(6)
        assert exact_profit(instance, grid, np.zeros(grid.N)) == pytest.approx(0.0, abs=1e-12)

    def test_bundles_closed_forms(self):
        """Test the exact profit of the known bundle optima"""
        assert bundles_square_profit() == pytest.approx(0.50693, abs=1e-5)
        assert bundles_triangle_profit() == pytest.approx(0.29811, abs=1e-5)
        square = bundles_square()
        grid = square.build_grid(61)
        assert exact_profit(square, grid, bundles_square_solution(grid.coords)) == pytest.approx(
            bundles_square_profit(), abs=5e-3
        )
        triangle = bundles_triangle()
        grid = triangle.build_grid(61)
        assert exact_profit(triangle, grid, bundles_triangle_solution(grid.coords)) == pytest.approx(
            bundles_triangle_profit(), abs=5e-3
        )

    def test_kite_conjecture_is_reported(self):
        """Test that the conjectured kite optimum has a finite profit"""
        kite = bundles_kite()
        grid = kite.build_grid(21)
        assert math.isfinite(exact_profit(kite, grid, bundles_kite_conjecture(grid.coords)))

    def test_steep_catalog_is_infinite(self):
        """Test profits of gradients outside the bundle box"""
        instance = bundles_square()
        grid = instance.build_grid(6)
        assert exact_profit(instance, grid, 3.0 * grid.coords[:, 0]) == -math.inf

    def test_report_of_quadratic(self):
        """Test the economics of U = q on [1, 2]^2"""
        instance = classical()
        grid = instance.build_grid(11)
        u = 0.5 * (grid.coords ** 2).sum(axis=1)
        report = economic_report(instance, grid, u)
        assert not report.exclusion.any()
        assert not report.bunching.any()
        inside = ~np.isnan(report.det_estimates)
        assert np.allclose(report.det_estimates[inside], 1.0)
        assert report.sales_mass.sum() == pytest.approx(instance.total_mass(), rel=1e-9)
        assert report.to_json()["exclusion_count"] == 0

    def test_instance_files(self):
        """Test the shipped instance files"""
        instance = load_instance(os.path.join(INSTANCES, "classical.json"))
        assert instance.cost == CostModel.QUADRATIC
        assert instance.total_mass() == pytest.approx(1.0)
        rotated = load_instance(os.path.join(INSTANCES, "classical.json"), theta=0.3)
        assert rotated.rotation == 0.3
        triangle = load_instance(os.path.join(INSTANCES, "bundles_triangle.json"))
        assert triangle.total_mass() == pytest.approx(0.25)
        assert triangle.grid_domain().area() == pytest.approx(1.0)
        with pytest.raises(InvalidArgumentError):
            MonopolistInstance.from_json({"cost": "quadratic"})

    def test_methods_agree(self):
        """Test adaptive refinement against the full cone on a small classical instance"""
        instance = classical()
        settings = RefineSettings()
        full = solve_instance(instance, 6, "clrm", settings)
        adaptive = solve_instance(instance, 6, "adaptive-conv", settings)
        # same minimizer from a fraction of the rows
        assert adaptive.objective == pytest.approx(full.objective, rel=1e-6, abs=1e-7)
        assert adaptive.constraint_count < full.constraint_count
        assert adaptive.full_defect <= 1e-6
        of2 = solve_instance(instance, 6, "of2", settings)
        assert of2.objective <= full.objective + 1e-7

    @pytest.mark.parametrize("n", [8, 10])
    def test_subcones_on_classical(self, n):
        """Test Algorithm 1 on the classical instance against the full cone"""
        instance = classical()
        full = solve_instance(instance, n, "clrm")
        result = solve_instance(instance, n, "adaptive-conv", RefineSettings(algorithm=1, rho=1.5))
        assert result.run.converged
        assert result.status in ("optimal", "inaccurate")
        assert result.objective == pytest.approx(full.objective, rel=1e-6, abs=1e-7)
        row = dict(zip(MethodResult.ROW_HEADER, result.row()))
        assert MethodResult.ROW_HEADER[-1] == "status"
        assert row["status"] == result.status

    def test_unknown_method(self):
        """Test the method check"""
        with pytest.raises(InvalidArgumentError):
            solve_instance(classical(), 4, "simplex")

    @SLOW
    def test_classical_comparison(self):
        """Test constraint counts and defects at n = 50"""
        instance = classical()
        grid = instance.build_grid(50)
        clrm = len(assemble(grid, Cone.full_conv()))
        assert 1_400_000 <= clrm <= 2_100_000
        of2 = len(assemble(grid, Cone.dconv_prime_v(fixed_stencils(grid, 2))))
        assert 0.7 * 18_000 <= of2 <= 1.3 * 18_000
        adaptive = solve_instance(instance, 50, "adaptive-conv", RefineSettings())
        assert adaptive.run.converged
        assert len(adaptive.run.iterations) <= 10
        assert adaptive.constraint_count < 0.05 * clrm
        assert adaptive.full_defect <= 1e-6

    @SLOW
    def test_algorithms_agree_on_classical(self):
        """Test Algorithms 1 and 2 and the full cone at n = 20"""
        instance = classical()
        full = solve_instance(instance, 20, "clrm")
        for algorithm in (1, 2):
            result = solve_instance(instance, 20, "adaptive-conv", RefineSettings(algorithm=algorithm))
            assert result.objective == pytest.approx(full.objective, rel=1e-6)

    @SLOW
    def test_exclusion_transition(self):
        """Test exclusion and bunching at theta = 0 and their absence of exclusion at pi/4"""
        for theta, excluded in ((0.0, True), (math.pi / 4, False)):
            instance = classical_rotated(theta)
            result = solve_instance(instance, 50, "adaptive-conv")
            report = economic_report(instance, result.grid, result.values)
            assert report.exclusion.any() == excluded
            if theta == 0.0:
                assert report.bunching.any()

    @SLOW
    def test_bundles_optimum(self):
        """Test the bundle solve against the known optimum at n = 100"""
        instance = bundles_square()
        result = solve_instance(instance, 100, "adaptive-conv")
        exact = bundles_square_solution(result.grid.coords)
        assert np.abs(result.values - exact).max() <= 2e-2
        assert result.profit == pytest.approx(bundles_square_profit(), abs=2e-3)
        report = economic_report(instance, result.grid, result.values)
        corners = np.array([[0, 0], [1, 0], [0, 1], [1, 1]])
        distance = np.abs(report.sales[:, None, :] - corners[None, :, :]).max(axis=2).min(axis=1)
        assert report.sales_mass[distance <= 0.02].sum() >= 0.9 * report.sales_mass.sum()


class TestExperiments:
    def test_rng_streams(self):
        """Test counter-based streams"""
        a = sample_rng(3, 5).normal(size=4)
        b = sample_rng(3, 5).normal(size=4)
        c = sample_rng(3, 6).normal(size=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_unknown_function(self):
        """Test the test-function factory check"""
        with pytest.raises(InvalidArgumentError):
            make_function("cubic", sample_rng(0, 0))

    def test_stencil_stats_deterministic(self):
        """Test that a seed fixes the sampled rows"""
        first, summary = stencil_stats("q", (3, 4), samples=3, seed=4)
        second, _ = stencil_stats("q", (3, 4), samples=3, seed=4)
        assert first == second
        assert len(first) == 6
        assert all(row[3] <= row[4] for row in first)
        assert len(summary["per_radius"]) == 2

    def test_ramp_under_worst_case(self):
        """Test the degenerate ramp against the worst-case bound"""
        rows, _ = stencil_stats("ramp", (4, 6), samples=4, seed=1)
        assert all(row[3] <= row[4] for row in rows)

    def test_flip_experiment(self):
        """Test flip counts on small grids"""
        rows, summary = flip_experiment("quadratic", (5, 7), samples=3, seed=2)
        assert summary["all_within_bound"]
        assert len(rows) == 6
        zero, _ = flip_experiment("q", (6,), samples=2, seed=2)
        assert all(row[3] == 0 for row in zero)

    @SLOW
    def test_average_cardinality(self):
        """Test the quasi-linear growth of minimal stencil counts"""
        for function in ("q", "quadratic"):
            _, summary = stencil_stats(function, (5, 10, 20, 40), samples=64, seed=0, jobs=4)
            assert 1.0 <= summary["exponent"] <= 1.3

    @SLOW
    def test_flip_bound_up_to_thirty(self):
        """Test the flip bound on grids up to 30 x 30"""
        _, summary = flip_experiment("quadratic", (10, 20, 30), samples=16, seed=0, jobs=4)
        assert summary["all_within_bound"]

    @SLOW
    def test_minimality_of_full_conv(self):
        """Test that each FullConv row can be violated alone (LP witness)"""
        grid = square_grid(4)
        system = assemble(grid, Cone.full_conv())
        A = system.matrix.toarray()
        for r in range(len(A)):
            others = np.delete(A, r, axis=0)
            witness = scipy.optimize.linprog(
                np.zeros(grid.N),
                A_ub=-others,
                b_ub=np.zeros(len(others)),
                A_eq=A[r:r + 1],
                b_eq=[-1.0],
                bounds=[(None, None)] * grid.N,
                method="highs",
            )
            assert witness.status == 0


class TestConfig:
    def test_defaults(self):
        """Test built-in defaults"""
        config = Config()
        assert config.get_int("experiment", "samples") == 64
        settings = config.refine_settings()
        assert settings.rho == 1.5
        assert settings.algorithm == 2
        assert settings.solver.tol_rel == 1e-9

    def test_file_overrides(self, tmp_path):
        """Test reading and saving a settings file"""
        path = os.path.join(tmp_path, "convgrid.ini")
        safe_write(path, "# settings\n[refine]\nrho = 2.0\ncone = dconv\n\n[solver]\nmax_iter = 50\n")
        config = Config(path)
        settings = config.refine_settings()
        assert settings.rho == 2.0
        assert settings.cone_family == "dconv"
        assert settings.solver.max_iter == 50
        assert settings.max_outer == 50
        config.set("experiment", "seed", 7)
        assert Config(path).get_int("experiment", "seed") == 7


class TestUtilities:
    def test_ensure_dir(self, tmpdir):
        """Test directory creation"""
        test_dir = os.path.join(tmpdir, "test_dir", "nested")
        ensure_dir(test_dir)
        assert os.path.exists(test_dir)

    @pytest.mark.parametrize("mode,content", [("w", "Text content"), ("wb", b"Binary content")])
    def test_safe_write(self, tmpdir, mode, content):
        """Test safe file writing with different modes"""
        test_file = os.path.join(tmpdir, "test_file.txt")
        safe_write(test_file, content, mode)
        read_mode = "r" if mode == "w" else "rb"
        with open(test_file, read_mode) as f:
            assert f.read() == content

    def test_csv(self, tmp_path):
        """Test the schema line and float precision of CSV files"""
        path = os.path.join(tmp_path, "table.csv")
        write_csv(path, ("a", "b"), [(1, 0.1 + 0.2), (2, np.float64(1 / 3))], {"seed": 5})
        with open(path) as f:
            assert f.readline() == "# schema=1\n"
        meta, header, rows = read_csv(path)
        assert meta == {"schema": "1", "seed": "5"}
        assert header == ["a", "b"]
        assert float(rows[0][1]) == 0.1 + 0.2
        assert float(rows[1][1]) == 1 / 3

    def test_point_map_has_sidecar(self, tmp_path):
        """Test that figures come with their numbers"""
        grid = square_grid(4)
        path = os.path.join(tmp_path, "figures", "q.svg")
        point_map(path, grid.coords, quadratic_values(grid), "q")
        assert os.path.exists(path)
        _, header, rows = read_csv(os.path.join(tmp_path, "figures", "q.csv"))
        assert header == ["x", "y", "value", "masked"]
        assert len(rows) == grid.N


class TestCommandLine:
    def test_defect(self, tmp_path, capsys):
        """Test the defect command on a center spike"""
        _, u = center_spike()
        path = os.path.join(tmp_path, "spike.txt")
        write_values(path, u)
        assert main(["defect", path, "--n", "3"]) == 0
        out = capsys.readouterr().out.split("\n")
        assert out[0] == "full 2"
        assert out[1] == "directional 2"

    def test_defect_size_mismatch(self, tmp_path, capsys):
        """Test the diagnostic on a value file of the wrong size"""
        path = os.path.join(tmp_path, "values.txt")
        write_values(path, np.zeros(5))
        assert main(["defect", path, "--n", "3"]) == 1
        assert capsys.readouterr().out.startswith("Error:")

    def test_no_samples(self, tmp_path, capsys):
        """Test that zero samples give an empty table"""
        out = os.path.join(tmp_path, "stats")
        assert main(["stencil-stats", "--samples", "0", "--seed", "3", "--out", out]) == 0
        meta, header, rows = read_csv(os.path.join(out, "stencil_stats.csv"))
        assert meta["seed"] == "3"
        assert header[0] == "radius"
        assert rows == []

    def test_solve(self, tmp_path, capsys):
        """Test an end-to-end solve with its outputs"""
        out = os.path.join(tmp_path, "solve")
        assert main(["solve", "--instance", "classical", "--n", "6", "--out", out]) == 0
        for name in ("values.csv", "trace.csv", "report.json", "solution_U.svg", "solution_U.csv"):
            assert os.path.exists(os.path.join(out, name))
        report = read_json(os.path.join(out, "report.json"))
        assert report["converged"] is True
        assert report["method"] == "adaptive-conv"
        assert report["status"] in ("optimal", "inaccurate")
        assert "Refinement converged" in capsys.readouterr().out

    def test_solve_geometry_outputs(self, tmp_path):
        """Test that the triangulation, cell and stencil files read back"""
        out = os.path.join(tmp_path, "solve")
        assert main(["solve", "--instance", "classical", "--n", "6", "--out", out]) == 0
        _, _, rows = read_csv(os.path.join(out, "values.csv"))
        coords = np.array([[float(x), float(y)] for x, y, _ in rows])
        vertices, faces = read_off(os.path.join(out, "triangulation.off"))
        assert np.allclose(vertices, coords)
        assert len(faces) > 0
        assert faces.min() >= 0 and faces.max() < len(coords)
        assert all(len(set(face)) == 3 for face in faces.tolist())
        cells = read_json(os.path.join(out, "cells.json"))
        assert len(cells["points"]) == len(cells["areas"]) == len(cells["polygons"])
        assert all(area >= 0 for area in cells["areas"])
        grid = classical().build_grid(6)
        V = StencilFamily.from_json(grid, read_json(os.path.join(out, "stencils.json")))
        assert minimal_stencils(grid).issubset(V)

    def test_read_off_rejects_other_files(self, tmp_path):
        """Test the OFF header check"""
        path = os.path.join(tmp_path, "values.txt")
        write_values(path, np.zeros(3))
        with pytest.raises(ValueError):
            read_off(path)

    def test_missing_instance(self, tmp_path, capsys):
        """Test a missing instance file"""
        assert main(["solve", "--instance", os.path.join(tmp_path, "nope.json"), "--out", str(tmp_path)]) == 1
        assert capsys.readouterr().out.startswith("Error:")

    def test_no_command(self, capsys):
        """Test that a bare invocation prints help"""
        assert main([]) == 1
        assert "usage" in capsys.readouterr().out


if __name__ == "__main__":
    pytest.main([__file__])
