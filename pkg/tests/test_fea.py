import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from trilattice import fea, rank3
from trilattice.fea import Fixation, LoadCase, ProblemSpec


def solid(problem):
    return np.broadcast_to(rank3.isotropic_voigt(1.0, 0.3), (problem.n_active, 3, 3)).copy()


def line_distance(a, b):
    """Distance between pi-periodic directions."""
    return np.abs(np.mod(np.asarray(a) - b + math.pi / 2, math.pi) - math.pi / 2)


def tension_bar(nx=8, ny=4, force=1.0, pad=0, active=None):
    """Bar under uniform end traction with minimal (roller) supports.

    ``pad`` shifts the bar by that many cells inside a larger inactive grid.
    """
    NX, NY = nx + 2 * pad, ny + 2 * pad
    mask = np.zeros((NY, NX), dtype=bool)
    mask[pad:pad + ny, pad:pad + nx] = True if active is None else active
    node = lambda i, j: (j + pad) * (NX + 1) + i + pad  # noqa: E731
    left = [node(0, j) for j in range(ny + 1)]
    right = [node(nx, j) for j in range(ny + 1)]
    f = np.full(ny + 1, force / ny)
    f[[0, -1]] *= 0.5
    return ProblemSpec(
        (NX, NY), mask,
        [Fixation(left, True, False), Fixation([node(0, 0)], False, True)],
        [LoadCase(right, np.c_[f, np.zeros(ny + 1)])],
    )


@pytest.fixture
def bar():
    return tension_bar()


@pytest.fixture
def two_load_problem():
    nx, ny = 6, 6
    fix = Fixation([j * (nx + 1) for j in range(ny + 1)])
    c1 = LoadCase([ny * (nx + 1) + nx], [[0.0, -1.0]])
    c2 = LoadCase([nx], [[1.0, 0.5]])
    return ProblemSpec((nx, ny), np.ones((ny, nx), bool), [fix], [c1, c2])


# --------------------------------------------------------------------------
# element level


def test_element_stiffness_matches_closed_form():
    K = fea.element_stiffness(rank3.isotropic_voigt(1.0, 0.3))
    np.testing.assert_allclose(K, oracles.q4_stiffness(1.0, 0.3), atol=1e-14)


@given(st.floats(0.05, 0.45), st.floats(0.1, 10.0))
def test_element_rigid_modes(v, E):
    K = fea.element_stiffness(rank3.isotropic_voigt(E, v))
    x = np.array([0, 1, 1, 0.0])
    y = np.array([0, 0, 1, 1.0])
    modes = [np.tile([1.0, 0.0], 4), np.tile([0.0, 1.0], 4), np.column_stack([-y, x]).ravel()]
    for r in modes:
        np.testing.assert_allclose(K @ r, 0.0, atol=1e-12 * E)
    assert np.linalg.matrix_rank(K) == 5


def test_energy_moments_reproduce_element_energy():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(5, 8))
    S = rank3.elasticity_matrix(rng.uniform(0.1, 0.5, (5, 3)), rng.uniform(0, 3, 5))
    E = fea.element_energy_moments(u)
    direct = np.einsum("ei,eij,ej->e", u, fea.element_stiffness(S), u)
    np.testing.assert_allclose(np.einsum("eab,eab->e", S, E), direct, rtol=1e-12)


# --------------------------------------------------------------------------
# global solve


def test_uniform_tension_compliance_is_exact(bar):
    res = fea.assemble_and_solve(bar, solid(bar))
    # C = F^2 L / (E A) with unit thickness
    assert res.total_compliance == pytest.approx(8 / 4, rel=1e-12)
    u = res.displacements[0].reshape(-1, 2)
    xs = bar.grid().node_xy(np.arange(bar.grid().n_nodes))[:, 0]
    np.testing.assert_allclose(u[:, 0], xs / 4, atol=1e-12)


@pytest.mark.parametrize("solver, precond", [("cg", "amg"), ("cg", "jacobi"), ("auto", "amg")])
def test_iterative_matches_direct(two_load_problem, solver, precond):
    p = two_load_problem
    S = rank3.elasticity_matrix(np.full((p.n_active, 3), 0.2), np.linspace(0, 2, p.n_active))
    ref = fea.assemble_and_solve(p, S, solver="direct")
    it = fea.assemble_and_solve(p, S, solver=solver, precond=precond, tol=1e-12)
    np.testing.assert_allclose(it.compliance_per_case, ref.compliance_per_case, rtol=1e-8)


def test_unsupported_problem_is_singular(bar):
    loose = ProblemSpec(bar.shape, bar.active, [], bar.load_cases)
    with pytest.raises(fea.SingularSystemError):
        fea.assemble_and_solve(loose, solid(loose))


def test_unknown_solver(bar):
    with pytest.raises(ValueError):
        fea.assemble_and_solve(bar, solid(bar), solver="magic")


def test_cg_iteration_cap(two_load_problem):
    p = two_load_problem
    with pytest.raises(fea.NonConvergenceError):
        fea.assemble_and_solve(p, solid(p), solver="cg", precond="jacobi", tol=1e-14, maxiter=2)


def test_compliance_invariant_under_translation():
    a = fea.assemble_and_solve(tension_bar(pad=0), solid(tension_bar(pad=0))).total_compliance
    shifted = tension_bar(pad=1)
    b = fea.assemble_and_solve(shifted, solid(shifted)).total_compliance
    assert b == pytest.approx(a, rel=1e-12)


def test_inactive_cells_carry_no_unknowns():
    mask = np.ones((4, 8), bool)
    mask[1:3, 3:5] = False  # a hole
    p = tension_bar(active=mask)
    g = p.grid()
    assert len(g.cells) == 28
    res = fea.assemble_and_solve(p, solid(p))
    assert res.total_compliance > 2.0  # the hole softens the bar
    unused = ~g.node_used
    assert not unused.any() or np.all(res.displacements[0].reshape(-1, 2)[unused] == 0)


def test_per_case_fixations():
    base = tension_bar()
    own = [Fixation(base.fixations[0].nodes), Fixation(base.fixations[1].nodes)]
    case = LoadCase(base.load_cases[0].nodes, base.load_cases[0].forces, fixations=own)
    p = ProblemSpec(base.shape, base.active, base.fixations, [base.load_cases[0], case])
    res = fea.assemble_and_solve(p, solid(p))
    # clamped left edge is stiffer than the roller support
    assert res.compliance_per_case[1] < res.compliance_per_case[0]
    np.testing.assert_allclose(p.weights, [0.5, 0.5])


def test_compliance_gradient_matches_fd(two_load_problem):
    p = two_load_problem
    rng = np.random.default_rng(3)
    a = rng.uniform(0.15, 0.45, (p.n_active, 3))
    th = rng.uniform(-1, 1, p.n_active)
    S, dSa, dSt = rank3.elasticity_sensitivities(a, th)
    res = fea.assemble_and_solve(p, S)
    g_a = fea.compliance_gradient(p.grid(), res, dSa)
    g_t = fea.compliance_gradient(p.grid(), res, dSt)
    h = 1e-6
    for e, k in [(0, 0), (7, 1), (20, 2), (35, 0)]:
        ap, am = a.copy(), a.copy()
        ap[e, k] += h
        am[e, k] -= h
        fd = (
            fea.assemble_and_solve(p, rank3.elasticity_matrix(ap, th)).total_compliance
            - fea.assemble_and_solve(p, rank3.elasticity_matrix(am, th)).total_compliance
        ) / (2 * h)
        assert g_a[e, k] == pytest.approx(fd, rel=1e-5)
    for e in (2, 17, 30):
        tp, tm = th.copy(), th.copy()
        tp[e] += h
        tm[e] -= h
        fd = (
            fea.assemble_and_solve(p, rank3.elasticity_matrix(a, tp)).total_compliance
            - fea.assemble_and_solve(p, rank3.elasticity_matrix(a, tm)).total_compliance
        ) / (2 * h)
        assert g_t[e] == pytest.approx(fd, rel=1e-5, abs=1e-10)


# --------------------------------------------------------------------------
# problem validation


@pytest.mark.parametrize(
    "change, message",
    [
        ({"active": np.ones((3, 8), bool)}, "mask shape"),
        ({"load_cases": []}, "load case"),
        ({"volume_budget": 0.0}, "volume budget"),
        ({"l_min": 0.6, "l_max": 0.5}, "l_min"),
        ({"coarsening": 3}, "coarsening"),
    ],
)
def test_problem_validation(bar, change, message):
    kw = dict(
        shape=bar.shape, active=bar.active, fixations=bar.fixations, load_cases=bar.load_cases,
    )
    kw.update(change)
    with pytest.raises(ValueError, match=message):
        ProblemSpec(**kw)


def test_weights_must_sum_to_one(bar):
    c = bar.load_cases[0]
    cases = [LoadCase(c.nodes, c.forces, weight=0.3), LoadCase(c.nodes, c.forces, weight=0.3)]
    with pytest.raises(ValueError, match="weights"):
        ProblemSpec(bar.shape, bar.active, bar.fixations, cases)


def test_load_outside_domain_rejected():
    mask = np.ones((4, 8), bool)
    mask[:, 6:] = False
    p = tension_bar(active=mask)
    with pytest.raises(ValueError, match="outside"):
        p.validate_nodes()


# --------------------------------------------------------------------------
# restriction


def fine_problem(c=4, nx=4, ny=2):
    NX, NY = nx * c, ny * c
    rng = np.random.default_rng(7)
    nodes = rng.choice((NX + 1) * (NY + 1), 12, replace=False)
    forces = rng.normal(size=(12, 2))
    fix = Fixation([j * (NX + 1) for j in range(NY + 1)], True, True)
    return ProblemSpec((NX, NY), np.ones((NY, NX), bool), [fix], [LoadCase(nodes, forces)], coarsening=c)


@pytest.mark.parametrize("c", [1, 2, 4])
def test_restriction_conserves_force(c):
    fine = fine_problem(c)
    coarse = fea.restrict_problem(fine)
    assert coarse.shape == (fine.nx // c, fine.ny // c)
    assert coarse.cell_size == c
    np.testing.assert_allclose(coarse.load_cases[0].forces.sum(axis=0), fine.load_cases[0].forces.sum(axis=0), atol=1e-12)


def test_restriction_coincident_node():
    c = 4
    NX, NY = 8, 8
    node = 4 * (NX + 1) + 4  # fine (4, 4) is coarse (1, 1)
    fine = ProblemSpec(
        (NX, NY), np.ones((NY, NX), bool), [Fixation([0, 1])], [LoadCase([node], [[0.3, -2.0]])], coarsening=c
    )
    coarse = fea.restrict_problem(fine)
    np.testing.assert_array_equal(coarse.load_cases[0].nodes, [1 * 3 + 1])
    np.testing.assert_allclose(coarse.load_cases[0].forces, [[0.3, -2.0]])


def test_restriction_uniform_traction_resultant():
    c = 4
    NX, NY = 16, 8
    top = NY * (NX + 1) + np.arange(NX + 1)
    f = np.full(NX + 1, -1.0 / NX)
    f[[0, -1]] *= 0.5
    fine = ProblemSpec((NX, NY), np.ones((NY, NX), bool), [Fixation([0, NX])], [LoadCase(top, np.c_[0 * f, f])], coarsening=c)
    coarse = fea.restrict_problem(fine)
    cf = coarse.load_cases[0].forces
    assert cf[:, 1].sum() == pytest.approx(-1.0, abs=1e-12)
    # interior coarse nodes carry equal shares of the traction
    np.testing.assert_allclose(cf[1:-1, 1], -1.0 / (NX // c), atol=1e-12)


def test_restriction_fixation_rule():
    c = 2
    NX, NY = 4, 4
    fine_node = 1 * (NX + 1) + 1  # fine (1, 1) lies between coarse nodes
    fine = ProblemSpec((NX, NY), np.ones((NY, NX), bool), [Fixation([fine_node], True, False)],
                       [LoadCase([NX], [[0, 1.0]])], coarsening=c)
    coarse = fea.restrict_problem(fine)
    fx = coarse.fixations[0]
    np.testing.assert_array_equal(fx.nodes, [0, 1, 3, 4])
    assert fx.fix_x and not fx.fix_y


def test_restriction_activates_partially_covered_cells():
    fine = fine_problem(2)
    fine.active[:, :] = False
    fine.active[0, 0] = True
    coarse_mask = fine.active.reshape(fine.ny // 2, 2, fine.nx // 2, 2).any(axis=(1, 3))
    assert coarse_mask.sum() == 1


# --------------------------------------------------------------------------
# principal stresses


def test_uniaxial_tension_direction(bar):
    s = fea.principal_stress_init(bar)
    np.testing.assert_allclose(line_distance(s.dominant_direction, 0.0), 0.0, atol=1e-9)
    np.testing.assert_allclose(line_distance(s.theta3_init, math.pi / 2), 0.0, atol=1e-9)
    np.testing.assert_allclose(s.values[0, :, 0], 1 / 4, rtol=1e-10)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_principal_directions_orthogonal(sx, sy, txy):
    v, a = fea.principal_stresses(np.array([sx, sy, txy]))
    d = np.mod(a[1] - a[0], math.pi)
    assert d == pytest.approx(math.pi / 2)
    assert v[0] >= v[1]
    # eigenvector check of the larger principal value
    n = np.array([math.cos(a[0]), math.sin(a[0])])
    T = np.array([[sx, txy], [txy, sy]])
    np.testing.assert_allclose(T @ n, v[0] * n, atol=1e-9)


@pytest.mark.parametrize("tau, expected", [(1.0, math.pi / 4), (-1.0, 3 * math.pi / 4)])
def test_pure_shear_tie_break(tau, expected):
    v, a = fea.principal_stresses(np.array([[0.0, 0.0, tau]]))
    d = fea.dominant_directions(v[None], a[None])
    assert d[0] == pytest.approx(expected)


def test_dominant_direction_over_cases():
    values = np.array([[[1.0, -0.5]], [[0.2, -3.0]]])
    angles = np.array([[[0.1, 0.1 + math.pi / 2]], [[0.7, 0.7 + math.pi / 2]]])
    assert fea.dominant_directions(values, angles)[0] == pytest.approx(0.7 + math.pi / 2)


def test_dominant_tie_prefers_smaller_angle():
    values = np.array([[[2.0, 0.0]], [[2.0, 0.0]]])
    angles = np.array([[[1.0, 2.0]], [[0.5, 1.5]]])
    assert fea.dominant_directions(values, angles)[0] == pytest.approx(0.5)


@settings(max_examples=10, deadline=None)
@given(st.floats(0.0, math.pi))
def test_stress_init_follows_rotated_load(phi):
    """Uniform traction in direction phi on a unit cell patch gives theta_p = phi."""
    n = 4
    p = ProblemSpec((n, n), np.ones((n, n), bool), [Fixation([0]), Fixation([n], False, True)], [LoadCase([1], [[1.0, 0]])])
    grid = p.grid()
    xy = grid.node_xy(np.arange(grid.n_nodes))
    d = np.array([math.cos(phi), math.sin(phi)])
    sigma = np.outer(d, d)
    u = np.zeros(grid.ndof)
    strain = np.linalg.solve(rank3.isotropic_voigt(1.0, 0.3), [sigma[0, 0], sigma[1, 1], sigma[0, 1]])
    u[0::2] = strain[0] * xy[:, 0] + 0.5 * strain[2] * xy[:, 1]
    u[1::2] = strain[1] * xy[:, 1] + 0.5 * strain[2] * xy[:, 0]
    st_ = fea.cell_stresses(grid, solid(p), u)
    v, a = fea.principal_stresses(st_)
    dom = fea.dominant_directions(v[None], a[None])
    assert line_distance(dom, phi).max() < 1e-7
