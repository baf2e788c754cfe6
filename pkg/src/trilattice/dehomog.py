"""Per-triangle de-homogenization of an optimized laminate field.

Every mesh triangle collects the cells whose centres it covers, turns their
layer depositions into three normalized edge widths, and insets its edges
by ``t * w`` so that its solid fraction equals the mean cell density.
Small solid patches close the gaps that appear at vertices where neighbouring
triangles have very different thicknesses.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from matplotlib.tri import Triangulation

from . import rank3
from .meshing import FieldAlignedMesh

log = logging.getLogger(__name__)

MIN_SAMPLES = 10
DROP_RATIO = 0.02
SOLID_RATIO = 1.0 - 1e-9


class DehomogenizationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# polygon helpers


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_halfplane(poly: np.ndarray, p: np.ndarray, n: np.ndarray, offset: float = 0.0) -> np.ndarray:
    """Keep the part of ``poly`` where ``(x - p) . n >= offset``."""
    if len(poly) == 0:
        return poly
    s = (poly - p) @ n - offset
    out = []
    m = len(poly)
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        sa, sb = s[i], s[(i + 1) % m]
        if sa >= 0:
            out.append(a)
        if (sa >= 0) != (sb >= 0):
            out.append(a + (b - a) * (sa / (sa - sb)))
    return np.array(out).reshape(-1, 2)


def inward_normals(tri: np.ndarray) -> np.ndarray:
    """Unit inward normal of side ``k`` (corner ``k`` to ``k+1``) of a CCW triangle."""
    d = np.roll(tri, -1, axis=0) - tri
    n = np.stack([-d[:, 1], d[:, 0]], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def void_polygon(tri: np.ndarray, insets) -> np.ndarray:
    """Region of a CCW triangle left after insetting side ``k`` by ``insets[k]``."""
    n = inward_normals(tri)
    poly = np.asarray(tri, dtype=float)
    for k in range(3):
        poly = clip_halfplane(poly, tri[k], n[k], insets[k])
        if len(poly) < 3:
            return np.zeros((0, 2))
    return poly


def void_corners(tri: np.ndarray, insets) -> np.ndarray | None:
    """Corners of the void triangle matched to the triangle corners, or None if empty.

    Corner ``k`` is the intersection of the inset lines of the two sides that
    meet at corner ``k`` (sides ``k-1`` and ``k``).
    """
    n = inward_normals(tri)
    c = np.asarray(insets, dtype=float) + np.einsum("kd,kd->k", n, tri)
    out = np.empty((3, 2))
    for k in range(3):
        a, b = (k - 1) % 3, k
        m = np.array([n[a], n[b]])
        out[k] = np.linalg.solve(m, [c[a], c[b]])
    if polygon_area(out) <= 0.0:
        return None
    # insets beyond the inradius leave a point-reflected triangle outside the third line
    opp = [1, 2, 0]
    if np.any(np.einsum("kd,kd->k", n[opp], out) < c[opp]):
        return None
    return out


def side_lengths(tri: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.roll(tri, -1, axis=0) - tri, axis=1)


# --------------------------------------------------------------------------
# thickness


def closed_form_thickness(tri: np.ndarray, widths, ratio: float) -> float:
    """Closed-form thickness: the void is the triangle scaled by ``sqrt(1 - ratio)``."""
    area = polygon_area(tri)
    lw = float(np.dot(side_lengths(tri), widths))
    return 2.0 * area * (1.0 - np.sqrt(max(0.0, 1.0 - ratio))) / lw


def solve_thickness(tri: np.ndarray, widths, ratio: float, rtol: float = 1e-15, max_iter: int = 200):
    """Bisection for ``t`` so that ``(A - A_void(t)) / A = ratio``.

    Returns ``(t, insets, void_polygon)``.
    """
    tri = np.asarray(tri, dtype=float)
    widths = np.asarray(widths, dtype=float)
    area = polygon_area(tri)
    if area <= 0:
        raise DehomogenizationError("degenerate or clockwise triangle")
    ratio = float(np.clip(ratio, 0.0, 1.0))
    lw = float(np.dot(side_lengths(tri), widths))
    if lw <= 0:
        raise DehomogenizationError("all edge widths are zero")
    t_solid = 2.0 * area / lw
    if ratio >= SOLID_RATIO:
        return t_solid, t_solid * widths, np.zeros((0, 2))
    if ratio <= 0.0:
        return 0.0, np.zeros(3), tri.copy()
    lo, hi = 0.0, t_solid
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        solid = 1.0 - polygon_area(void_polygon(tri, mid * widths)) / area
        if solid < ratio:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rtol * t_solid:
            break
    t = 0.5 * (lo + hi)
    return t, t * widths, void_polygon(tri, t * widths)


# --------------------------------------------------------------------------
# binning


def _bilinear_sample(design, factor: int):
    """Values of the design fields at a ``factor``-times finer grid of sub-cells.

    Interpolates between active cell centres with weights renormalized over
    active neighbours; ``factor=1`` returns the cell values themselves.
    """
    nx, ny = design.shape
    cs = design.cell_size
    active = design.active
    alpha_img = design.image(design.alpha, fill=0.0)
    theta_img = design.image(np.asarray(design.theta3, dtype=float), fill=0.0)
    fine_act = np.kron(active, np.ones((factor, factor), dtype=bool))
    gy, gx = np.nonzero(fine_act)
    px = (gx + 0.5) / factor - 0.5
    py = (gy + 0.5) / factor - 0.5
    if factor == 1:
        return (
            np.stack([(gx + 0.5) * cs, (gy + 0.5) * cs], axis=1),
            alpha_img[gy, gx],
            theta_img[gy, gx],
        )
    i0 = np.floor(px).astype(int)
    j0 = np.floor(py).astype(int)
    fx, fy = px - i0, py - j0
    acc_a = np.zeros((len(px), 3))
    acc_t = np.zeros(len(px))
    acc_w = np.zeros(len(px))
    for di, dj, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
        ok[ok] &= active[jj[ok], ii[ok]]
        w = np.where(ok, w, 0.0)
        iic, jjc = np.clip(ii, 0, nx - 1), np.clip(jj, 0, ny - 1)
        acc_a += w[:, None] * alpha_img[jjc, iic]
        acc_t += w * theta_img[jjc, iic]
        acc_w += w
    # a sub-cell always has its own cell among the four candidates
    acc_w = np.where(acc_w > 0, acc_w, 1.0)
    xy = np.stack([(gx + 0.5) / factor * cs, (gy + 0.5) / factor * cs], axis=1)
    return xy, acc_a / acc_w[:, None], acc_t / acc_w


@dataclass
class Binning:
    factor: int
    points: np.ndarray
    alpha: np.ndarray
    theta3: np.ndarray
    triangle: np.ndarray  # -1 outside the mesh
    counts: np.ndarray
    density_sum: np.ndarray

    @property
    def target_ratio(self) -> np.ndarray:
        return np.where(self.counts > 0, self.density_sum / np.maximum(self.counts, 1), 0.0)

    @property
    def sample_area(self) -> float:
        return 1.0 / self.factor**2


def bin_cells(design, mesh: FieldAlignedMesh, min_samples: int = MIN_SAMPLES, max_factor: int = 8) -> Binning:
    """Assign (re-sampled) cells to the triangles containing their centres."""
    tri = Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles)
    finder = tri.get_trifinder()
    factor = 1
    while True:
        pts, alpha, theta = _bilinear_sample(design, factor)
        which = np.asarray(finder(pts[:, 0], pts[:, 1]), dtype=np.int64)
        inside = which >= 0
        counts = np.bincount(which[inside], minlength=mesh.n_triangles)
        rho = rank3.volume_fraction(alpha)
        dens = np.bincount(which[inside], rho[inside], minlength=mesh.n_triangles)
        if counts.min(initial=min_samples) >= min_samples or factor >= max_factor:
            break
        factor += 1
    if np.any(counts == 0):
        raise DehomogenizationError(f"{int((counts == 0).sum())} triangles cover no cell centre")
    if counts.min() < min_samples:
        log.warning("%d triangles keep fewer than %d samples at factor %d", int((counts < min_samples).sum()), min_samples, factor)
    return Binning(factor, pts, alpha, theta, which, counts, dens)


# --------------------------------------------------------------------------
# per-triangle representatives


def representative_widths(alpha_samples: np.ndarray) -> np.ndarray:
    """Summed layer depositions of a triangle's samples, normalized by their max."""
    a = rank3.layer_densities(np.asarray(alpha_samples, dtype=float).reshape(-1, 3)).sum(axis=0)
    top = a.max()
    if top <= 0:
        raise DehomogenizationError("all representative widths are zero")
    return a / top


def weighted_line_direction(angles, weights) -> float:
    """Weighted mean of pi-periodic directions via doubled angles, in ``[0, pi)``.

    Returns NaN when the weights vanish or the directions cancel.
    """
    angles = np.asarray(angles, dtype=float)
    weights = np.asarray(weights, dtype=float)
    z = np.sum(weights * np.exp(2j * angles))
    if np.sum(weights) <= 0 or abs(z) <= 1e-12 * max(np.sum(weights), 1e-300):
        return float("nan")
    return float(np.mod(np.angle(z) / 2.0, np.pi))


def representative_orientations(alpha_samples, theta3_samples) -> np.ndarray:
    """Deposition-weighted layer tangent directions, each in ``[0, pi)``."""
    dens = rank3.layer_densities(np.asarray(alpha_samples, dtype=float).reshape(-1, 3))
    tang = np.asarray(theta3_samples, dtype=float).reshape(-1)[:, None] + rank3.LAYER_OFFSETS + np.pi / 2
    return np.array([weighted_line_direction(tang[:, i], dens[:, i]) for i in range(3)])


def align_layers(alpha_samples, theta3_samples):
    """Relabel each sample's layers cyclically to match the densest sample.

    Neighbouring cells whose ``theta3`` differ by a multiple of ``pi/3``
    describe the same three directions with permuted labels; aligning the
    labels first keeps the per-layer sums meaningful.
    """
    alpha = np.asarray(alpha_samples, dtype=float).reshape(-1, 3)
    theta = np.asarray(theta3_samples, dtype=float).reshape(-1)
    if len(theta) == 0:
        return alpha, theta
    dens = rank3.layer_densities(alpha)
    ref = int(np.argmax(dens.sum(axis=1)))
    tang = theta[:, None] + rank3.LAYER_OFFSETS
    ref_t = tang[ref]
    best = np.full(len(theta), np.inf)
    shift = np.zeros(len(theta), dtype=int)
    for c in range(3):
        dev = np.abs(np.mod(np.roll(tang, -c, axis=1) - ref_t + np.pi / 2, np.pi) - np.pi / 2).sum(axis=1)
        better = dev < best - 1e-12
        best = np.where(better, dev, best)
        shift = np.where(better, c, shift)
    rows = np.arange(len(theta))[:, None]
    cols = (np.arange(3)[None, :] + shift[:, None]) % 3
    dens_aligned = dens[rows, cols]
    # equivalent theta3: the relabelled layer 3 direction
    theta_aligned = tang[rows[:, 0], cols[:, 2]] - rank3.LAYER_OFFSETS[2]
    # back to widths with the same layer densities
    a3 = dens_aligned[:, 2]
    a2 = np.where(1 - a3 > 0, dens_aligned[:, 1] / np.maximum(1 - a3, 1e-300), 0.0)
    a1 = np.where((1 - a3) * (1 - a2) > 0, dens_aligned[:, 0] / np.maximum((1 - a3) * (1 - a2), 1e-300), 0.0)
    return np.stack([a1, a2, a3], axis=1), theta_aligned


def line_deviation(a, b) -> np.ndarray:
    """Angle between two undirected lines, in ``[0, pi/2]``."""
    d = np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float) + np.pi / 2, np.pi) - np.pi / 2
    return np.abs(d)


def side_angles(tri: np.ndarray) -> np.ndarray:
    d = np.roll(tri, -1, axis=0) - tri
    return np.mod(np.arctan2(d[:, 1], d[:, 0]), np.pi)


def match_edges(edge_angles, orientations, tie_tol: float = 1e-12) -> tuple[int, int, int]:
    """Layer assigned to each side, minimizing the summed angular deviation.

    Permutations are scanned in lexicographic order and replaced only by a
    strictly better one, so ties resolve to the lexicographically first.
    Layers without an orientation (NaN) fit every side equally.
    """
    edge_angles = np.asarray(edge_angles, dtype=float)
    orientations = np.asarray(orientations, dtype=float)
    best, best_perm = np.inf, (0, 1, 2)
    for perm in itertools.permutations(range(3)):
        dev = line_deviation(edge_angles, orientations[list(perm)])
        cost = float(np.nansum(dev))
        if cost < best - tie_tol:
            best, best_perm = cost, perm
    return best_perm


# --------------------------------------------------------------------------
# lattice


@dataclass
class LatticeDesign:
    mesh: FieldAlignedMesh
    target_ratio: np.ndarray  # (T,) deposition ratio before compensation
    ratio: np.ndarray  # (T,) ratio the thickness was solved for
    widths: np.ndarray  # (T, 3) normalized widths per layer
    orientations: np.ndarray  # (T, 3) layer tangents
    side_layer: np.ndarray  # (T, 3) layer of each side
    thickness: np.ndarray  # (T,)
    insets: np.ndarray  # (T, 3) per-side inset distances
    kept: np.ndarray  # (T,) False for dropped (empty) triangles
    patches: list = field(default_factory=list)  # polygons (k, 2)
    patch_owner: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    volume_fraction: float = float("nan")
    domain_area: float = float("nan")
    meta: dict = field(default_factory=dict)

    def triangle_points(self, k: int) -> np.ndarray:
        return self.mesh.vertices[self.mesh.triangles[k]]

    def void(self, k: int) -> np.ndarray:
        if not self.kept[k]:
            return self.triangle_points(k)
        return void_polygon(self.triangle_points(k), self.insets[k])

    def solid_area(self) -> float:
        areas = self.mesh.areas()
        void = np.array([polygon_area(self.void(k)) for k in range(self.mesh.n_triangles)])
        return float((areas - void).sum() + sum(polygon_area(p) for p in self.patches))

    def edge_table(self) -> np.ndarray:
        """Rows ``(v0, v1, inset_left, inset_right, layer)`` per mesh edge.

        ``left`` is the triangle that runs ``v0 -> v1`` counter-clockwise;
        the layer is that of the left triangle, else of the right one.
        """
        mesh = self.mesh
        edges = mesh.edges
        te = mesh.triangle_edges()
        rows = np.zeros((len(edges), 5))
        rows[:, :2] = edges
        rows[:, 4] = -1
        tris = mesh.triangles
        for t in range(mesh.n_triangles):
            for k in range(3):
                e = te[t, k]
                forward = tris[t, k] == edges[e, 0]
                col = 2 if forward else 3
                rows[e, col] = self.insets[t, k] if self.kept[t] else 0.0
                if forward or rows[e, 4] < 0:
                    rows[e, 4] = self.side_layer[t, k]
        return rows


def _triangle_neighbours(mesh: FieldAlignedMesh) -> np.ndarray:
    """``nb[t, k]``: triangle across side ``k`` of ``t`` (-1 on the boundary)."""
    et = mesh.edge_triangles()
    te = mesh.triangle_edges()
    nb = -np.ones((mesh.n_triangles, 3), dtype=np.int64)
    for t in range(mesh.n_triangles):
        for k in range(3):
            a, b = et[te[t, k]]
            nb[t, k] = b if a == t else a
    return nb


def _corner_index(mesh: FieldAlignedMesh, t: int, v: int) -> int:
    return int(np.flatnonzero(mesh.triangles[t] == v)[0])


def _point_in_triangle(p, a, b, c, eps: float = 0.0) -> bool:
    def orient(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])

    d1, d2, d3 = orient(a, b, p), orient(b, c, p), orient(c, a, p)
    s = orient(a, b, c)
    if s == 0:
        return False
    if s < 0:
        d1, d2, d3 = -d1, -d2, -d3
    return d1 > eps and d2 > eps and d3 > eps


def gap_patches(lattice: LatticeDesign) -> tuple[list, np.ndarray]:
    """Solid patches closing vertex gaps; each lies inside its triangle's void."""
    mesh = lattice.mesh
    nb = _triangle_neighbours(mesh)
    corners = {}
    for t in range(mesh.n_triangles):
        if lattice.kept[t]:
            corners[t] = void_corners(lattice.triangle_points(t), lattice.insets[t])
        else:
            corners[t] = lattice.triangle_points(t).copy()
    patches, owner = [], []
    scale = mesh.h
    for t in range(mesh.n_triangles):
        own = corners[t]
        if own is None or not lattice.kept[t]:
            continue
        pts = lattice.triangle_points(t)
        void = void_polygon(pts, lattice.insets[t])
        for k in range(3):
            v = mesh.triangles[t, k]
            # the two sides meeting at corner k are side k-1 and side k
            n_a, n_b = nb[t, (k - 1) % 3], nb[t, k]
            if n_a < 0 or n_b < 0 or corners[n_a] is None or corners[n_b] is None:
                continue
            p2 = corners[n_a][_corner_index(mesh, n_a, v)]
            p3 = corners[n_b][_corner_index(mesh, n_b, v)]
            p1 = pts[k]
            if not _point_in_triangle(own[k], p1, p2, p3, eps=1e-12 * scale * scale):
                continue
            d = p3 - p2
            normal = np.array([-d[1], d[0]])
            if normal @ (own[k] - p2) < 0:
                normal = -normal
            patch = clip_halfplane(void, p2, normal)
            if len(patch) >= 3 and polygon_area(patch) > 1e-12 * scale * scale:
                patches.append(patch)
                owner.append(t)
    return patches, np.asarray(owner, dtype=np.int64)


def _solve_all(mesh, ratio, w_side, kept):
    T = mesh.n_triangles
    thickness = np.zeros(T)
    insets = np.zeros((T, 3))
    for k in range(T):
        if not kept[k]:
            continue
        t, d, _ = solve_thickness(mesh.vertices[mesh.triangles[k]], w_side[k], ratio[k])
        thickness[k], insets[k] = t, d
    return thickness, insets


# interior bars are built from two triangles' insets, outline bars from one
BOUNDARY_WEIGHT = 2.0


def dehomogenize(
    design,
    mesh: FieldAlignedMesh,
    drop_ratio: float = DROP_RATIO,
    fill: bool = True,
    align: bool = True,
    min_samples: int = MIN_SAMPLES,
    compensation: str = "local",
    compensation_iters: int = 5,
    boundary_weight: float = BOUNDARY_WEIGHT,
) -> LatticeDesign:
    """Bin cells, derive per-triangle widths and orientations, solve insets, fill gaps.

    ``compensation`` decides how patch material is paid for: ``"local"``
    lowers each triangle's ratio by the patches inside it (iterated, since
    patches follow the voids), ``"global"`` rescales all ratios once.
    ``boundary_weight`` scales the width of sides on the mesh boundary, whose
    bars get material from one triangle only; the default 2 makes them as
    wide as interior bars of the same layer.
    """
    t_start = time.perf_counter()
    binning = bin_cells(design, mesh, min_samples=min_samples)
    T = mesh.n_triangles
    target = binning.target_ratio
    widths = np.zeros((T, 3))
    orient = np.full((T, 3), np.nan)
    side_layer = np.tile(np.arange(3), (T, 1))
    kept = target >= drop_ratio
    order = np.argsort(binning.triangle, kind="stable")
    tri_sorted = binning.triangle[order]
    starts = np.searchsorted(tri_sorted, np.arange(T))
    ends = np.searchsorted(tri_sorted, np.arange(T), side="right")
    for k in range(T):
        idx = order[starts[k]:ends[k]]
        a, th = binning.alpha[idx], binning.theta3[idx]
        if align:
            a, th = align_layers(a, th)
        if not kept[k]:
            continue
        try:
            widths[k] = representative_widths(a)
        except DehomogenizationError:
            kept[k] = False
            continue
        orient[k] = representative_orientations(a, th)
        orient[k, widths[k] <= 0] = np.nan
        pts = mesh.vertices[mesh.triangles[k]]
        side_layer[k] = match_edges(side_angles(pts), orient[k])
    w_side = np.take_along_axis(widths, side_layer, axis=1)
    if boundary_weight != 1.0:
        w_side = np.where(_triangle_neighbours(mesh) < 0, boundary_weight * w_side, w_side)
    ratio = np.where(kept, target, 0.0)
    thickness, insets = _solve_all(mesh, ratio, w_side, kept)
    lattice = LatticeDesign(mesh, target, ratio.copy(), widths, orient, side_layer, thickness, insets, kept)
    if fill:
        patches, owner = gap_patches(lattice)
        areas = mesh.areas()
        added = float(sum(polygon_area(p) for p in patches))
        lattice.meta["patch_area_before"] = added
        if added > 0 and compensation == "global":
            base = float((areas * ratio).sum())
            lattice.ratio = ratio * (base / (base + added))
            lattice.thickness, lattice.insets = _solve_all(mesh, lattice.ratio, w_side, kept)
            patches, owner = gap_patches(lattice)
        elif added > 0 and compensation == "local":
            # each triangle gives up the area of the patches inside its own void
            for _ in range(compensation_iters):
                own = np.bincount(owner, [polygon_area(p) for p in patches], minlength=T) if len(patches) else np.zeros(T)
                new_ratio = np.where(kept, np.clip(ratio - own / areas, 0.0, 1.0), 0.0)
                if np.max(np.abs(new_ratio - lattice.ratio)) <= 1e-6:
                    break
                lattice.ratio = new_ratio
                lattice.thickness, lattice.insets = _solve_all(mesh, lattice.ratio, w_side, kept)
                patches, owner = gap_patches(lattice)
        elif compensation not in ("global", "local", "none"):
            raise ValueError(f"unknown compensation {compensation!r}")
        lattice.patches, lattice.patch_owner = patches, owner
    lattice.domain_area = float(design.active.sum() * design.cell_size**2)
    lattice.volume_fraction = lattice.solid_area() / float(mesh.areas().sum())
    lattice.meta.update(
        elapsed=time.perf_counter() - t_start,
        sample_factor=binning.factor,
        min_samples=int(binning.counts.min()),
        dropped=int((~kept).sum()),
        sampled_mass=float(binning.density_sum.sum() * binning.sample_area),
        design_mass=float(design.density.sum()),
    )
    log.info(
        "lattice: %d triangles (%d dropped), %d patches, V_mesh = %.4f",
        T, int((~kept).sum()), len(lattice.patches), lattice.volume_fraction,
    )
    return lattice
