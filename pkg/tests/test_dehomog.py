import math

import numpy as np
import pytest
import shapely
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from shapely.geometry import Polygon

import oracles
from conftest import make_design
from trilattice import dehomog as dh
from trilattice import meshing, rank3

EQUILATERAL = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])

coords = st.floats(-3, 3)
unit_widths = st.tuples(st.floats(0.05, 1), st.floats(0.05, 1), st.floats(0.05, 1))


def ccw_triangle(pts):
    tri = np.asarray(pts, dtype=float).reshape(3, 2)
    return tri if oracles.polygon_area(tri) > 0 else tri[[0, 2, 1]]


@pytest.fixture(scope="module")
def uniform_lattice():
    d = make_design(np.ones((30, 40), bool), (0.2, 0.25, 0.3), 0.2)
    mesh = meshing.triangulate(d, edge_length=4.0)
    return d, dh.dehomogenize(d, mesh)


@pytest.fixture(scope="module")
def graded_lattice():
    yy, xx = np.mgrid[:30, :40]
    act = np.ones((30, 40), bool)
    a = np.stack([0.1 + 0.3 * xx / 40, 0.1 + 0.2 * yy / 30, np.full(xx.shape, 0.2)], axis=-1).reshape(-1, 3)
    th = (0.4 * np.sin(xx / 40 * np.pi)).ravel()
    d = make_design(act, a, th)
    mesh = meshing.triangulate(d, edge_length=4.0)
    return d, dh.dehomogenize(d, mesh)


# --------------------------------------------------------------------------
# polygons


def test_clip_halfplane_square():
    sq = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], float)
    half = dh.clip_halfplane(sq, np.array([1.0, 0.0]), np.array([1.0, 0.0]))
    assert dh.polygon_area(half) == pytest.approx(2.0)
    assert len(dh.clip_halfplane(sq, np.array([5.0, 0.0]), np.array([1.0, 0.0]))) == 0


def test_inward_normals_point_inside():
    n = dh.inward_normals(EQUILATERAL)
    mids = 0.5 * (EQUILATERAL + np.roll(EQUILATERAL, -1, axis=0))
    centroid = EQUILATERAL.mean(axis=0)
    assert np.all(np.einsum("kd,kd->k", centroid - mids, n) > 0)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0)


@settings(max_examples=50)
@given(st.lists(coords, min_size=6, max_size=6), unit_widths, st.floats(0.0, 0.3))
def test_void_corners_match_void_polygon(pts, w, t):
    tri = ccw_triangle(pts)
    assume(oracles.polygon_area(tri) > 0.2)
    d = t * np.array(w)
    poly = dh.void_polygon(tri, d)
    corners = dh.void_corners(tri, d)
    if corners is None:
        assert dh.polygon_area(poly) < 1e-9
        return
    assert dh.polygon_area(corners) == pytest.approx(dh.polygon_area(poly), abs=1e-9)
    assert Polygon(corners).symmetric_difference(Polygon(poly)).area < 1e-9


# --------------------------------------------------------------------------
# thickness


def test_thickness_closed_form_1000_random_cases():
    """Bisection against the closed form for equal widths on equilateral triangles."""
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        rho = rng.uniform(0.0, 0.999)
        side = rng.uniform(0.2, 5.0)
        tri = EQUILATERAL * side
        w = np.full(3, rng.uniform(0.05, 1.0))
        t, insets, void = dh.solve_thickness(tri, w, rho)
        r = side / (2 * math.sqrt(3))
        s = math.sqrt(1 - rho)
        worst = max(worst, abs(insets.sum() - 3 * r * (1 - s)) / side)
        assert insets[0] == pytest.approx(oracles.equilateral_thickness(rho, side), abs=1e-9 * side)
    assert worst <= 1e-9


@settings(max_examples=100)
@given(st.lists(coords, min_size=6, max_size=6), unit_widths, st.floats(0.01, 0.99))
def test_thickness_hits_ratio_and_similarity_formula(pts, w, rho):
    tri = ccw_triangle(pts)
    assume(oracles.polygon_area(tri) > 0.2)
    assume(min(dh.side_lengths(tri)) > 0.2)
    t, insets, void = dh.solve_thickness(tri, w, rho)
    area = oracles.polygon_area(tri)
    assert 1 - dh.polygon_area(void) / area == pytest.approx(rho, abs=1e-9)
    # any inset along all sides leaves a similar triangle
    assert t == pytest.approx(dh.closed_form_thickness(tri, w, rho), rel=1e-8)


@pytest.mark.parametrize("rho, solid", [(0.0, False), (1.0, True)])
def test_thickness_limits(rho, solid):
    t, insets, void = dh.solve_thickness(EQUILATERAL, np.ones(3), rho)
    if solid:
        assert len(void) == 0
        assert t == pytest.approx(2 * dh.polygon_area(EQUILATERAL) / 3)
    else:
        assert t == 0.0
        np.testing.assert_allclose(void, EQUILATERAL)


def test_thickness_rejects_bad_input():
    with pytest.raises(dh.DehomogenizationError):
        dh.solve_thickness(EQUILATERAL[[0, 2, 1]], np.ones(3), 0.5)
    with pytest.raises(dh.DehomogenizationError):
        dh.solve_thickness(EQUILATERAL, np.zeros(3), 0.5)


# --------------------------------------------------------------------------
# representatives


def test_representative_widths_normalized():
    a = np.array([[0.1, 0.2, 0.3], [0.2, 0.2, 0.2]])
    w = dh.representative_widths(a)
    assert w.max() == 1.0
    dens = rank3.layer_densities(a).sum(axis=0)
    np.testing.assert_allclose(w, dens / dens.max())


@given(st.floats(0, math.pi), st.integers(-3, 3))
def test_line_direction_is_pi_periodic(a, k):
    ang = np.array([a, a + k * math.pi])
    got = dh.weighted_line_direction(ang, [1.0, 2.0])
    assert float(dh.line_deviation(got, a)) == pytest.approx(0.0, abs=1e-9)


def test_line_direction_cancels_to_nan():
    assert math.isnan(dh.weighted_line_direction([0.0, math.pi / 2], [1.0, 1.0]))
    assert math.isnan(dh.weighted_line_direction([0.3], [0.0]))


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.tuples(st.floats(0.05, 0.5), st.floats(0.05, 0.5), st.floats(0.05, 0.5)), min_size=1, max_size=6),
    st.floats(-1, 1),
    st.lists(st.integers(-2, 2), min_size=6, max_size=6),
)
def test_align_layers_preserves_each_laminate(alphas, theta, shifts):
    a = np.array(alphas)
    th = theta + np.array(shifts[: len(a)]) * math.pi / 3
    a2, th2 = dh.align_layers(a, th)
    np.testing.assert_allclose(rank3.elasticity_matrix(a2, th2), rank3.elasticity_matrix(a, th), atol=1e-9)
    # all samples now share the reference labelling
    tang = th2[:, None] + rank3.LAYER_OFFSETS
    ref = tang[int(np.argmax(rank3.volume_fraction(a)))]
    assert np.all(dh.line_deviation(tang, ref) <= math.pi / 6 + 1e-9)


@pytest.mark.parametrize("perm", [(0, 1, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)])
def test_match_edges_recovers_permutation(perm):
    sides = dh.side_angles(EQUILATERAL)
    orient = np.empty(3)
    orient[list(perm)] = sides + 0.01
    assert dh.match_edges(sides, orient) == perm


def test_match_edges_ties_resolve_to_first():
    assert dh.match_edges([0.0, 1.0, 2.0], [np.nan] * 3) == (0, 1, 2)


# --------------------------------------------------------------------------
# full lattice


def test_uniform_lattice_volume(uniform_lattice):
    d, lat = uniform_lattice
    rho = float(d.density[0])
    np.testing.assert_allclose(lat.target_ratio, rho, rtol=1e-12)
    assert lat.volume_fraction == pytest.approx(rho, abs=0.01)
    assert lat.kept.all()


def test_solved_ratios_are_met(graded_lattice):
    _, lat = graded_lattice
    areas = lat.mesh.areas()
    void = np.array([dh.polygon_area(lat.void(k)) for k in range(lat.mesh.n_triangles)])
    np.testing.assert_allclose(1 - void / areas, lat.ratio, atol=1e-9)


def test_local_compensation_conserves_each_triangle(graded_lattice):
    _, lat = graded_lattice
    areas = lat.mesh.areas()
    void = np.array([dh.polygon_area(lat.void(k)) for k in range(lat.mesh.n_triangles)])
    patch = np.bincount(lat.patch_owner, [dh.polygon_area(p) for p in lat.patches], minlength=len(areas))
    achieved = (areas - void + patch) / areas
    assert np.max(np.abs(achieved - lat.target_ratio)) <= 0.02


def test_patches_lie_in_their_voids(graded_lattice):
    _, lat = graded_lattice
    for p, t in zip(lat.patches, lat.patch_owner):
        void = Polygon(lat.void(int(t)))
        assert Polygon(p).difference(void.buffer(1e-9)).area < 1e-9


def test_solid_primitives_do_not_overlap(graded_lattice):
    _, lat = graded_lattice
    pieces = [Polygon(p) for p in lat.patches]
    tree = shapely.STRtree(pieces)
    for i, j in zip(*tree.query(pieces, predicate="intersects")):
        if i < j:
            assert pieces[i].intersection(pieces[j]).area < 1e-9


def test_edge_table_consistency(graded_lattice):
    _, lat = graded_lattice
    rows = lat.edge_table()
    assert len(rows) == len(lat.mesh.edges)
    assert set(np.unique(rows[:, 4]).astype(int)) <= {0, 1, 2}
    # interior edges get an inset from both triangles
    et = lat.mesh.edge_triangles()
    interior = et[:, 1] >= 0
    assert np.all(rows[interior, 2] > 0) and np.all(rows[interior, 3] > 0)


def test_sides_follow_layer_orientations(uniform_lattice):
    _, lat = uniform_lattice
    mesh = lat.mesh
    dev = []
    for k in range(mesh.n_triangles):
        sa = dh.side_angles(lat.triangle_points(k))
        dev.append(dh.line_deviation(sa, lat.orientations[k][lat.side_layer[k]]))
    # interior triangles of a constant field sit exactly on the lattice
    assert np.median(np.concatenate(dev)) < 1e-6


def test_drop_ratio_removes_empty_triangles():
    act = np.ones((20, 20), bool)
    a = np.where((np.arange(400) % 20 < 10)[:, None], 0.3, 0.0) * np.ones(3)
    d = make_design(act, a, 0.0)
    lat = dh.dehomogenize(d, meshing.triangulate(d, edge_length=4.0))
    assert not lat.kept.all()
    assert np.all(lat.thickness[~lat.kept] == 0)


@pytest.mark.parametrize("weight", [1.0, 2.0, 3.0])
def test_boundary_weight_scales_outline_bars(uniform_lattice, weight):
    d, lat = uniform_lattice
    out = dh.dehomogenize(d, lat.mesh, boundary_weight=weight)
    b = dh._triangle_neighbours(lat.mesh) < 0
    ratio = out.insets[b] / out.thickness[np.nonzero(b)[0]]
    w = np.take_along_axis(out.widths, out.side_layer, axis=1)[b]
    np.testing.assert_allclose(ratio, weight * w)
    # volume is still set by the per-triangle ratios
    assert out.volume_fraction == pytest.approx(lat.volume_fraction, abs=0.01)


def test_default_boundary_weight_matches_interior_bars(uniform_lattice):
    _, lat = uniform_lattice
    assert dh.BOUNDARY_WEIGHT == 2.0
    b = dh._triangle_neighbours(lat.mesh) < 0
    ratio = lat.insets / lat.thickness[:, None]
    w = np.take_along_axis(lat.widths, lat.side_layer, axis=1)
    np.testing.assert_allclose(ratio[b], 2 * w[b])
    np.testing.assert_allclose(ratio[~b], w[~b])


def test_unknown_compensation(uniform_lattice):
    d, lat = uniform_lattice
    graded = make_design(d.active, np.linspace(0.05, 0.5, d.n_cells)[:, None] * np.ones(3), 0.0)
    with pytest.raises(ValueError, match="compensation"):
        dh.dehomogenize(graded, lat.mesh, compensation="spread")
