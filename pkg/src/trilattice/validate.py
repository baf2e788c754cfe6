"""Evaluation of designs on the fine validation grid.

The lattice is rasterized by cell-centre sampling; the homogenized design is
projected onto the same grid by bilinear interpolation.  Both are solved with
identical supports and loads, which yields the design deviation
``xi = (C V - C0 V0) / (C0 V0)``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rank3
from .dehomog import LatticeDesign
from .fea import ProblemSpec, assemble_and_solve

log = logging.getLogger(__name__)


@dataclass
class EvaluationReport:
    C: float
    V: float
    C0: float
    V0: float
    xi: float
    compliance_cases: list = field(default_factory=list)
    compliance0_cases: list = field(default_factory=list)
    C_star: float | None = None
    t0: float | None = None
    t: float | None = None
    n_triangles: int | None = None
    problem: str = ""
    extra: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        """Human-readable single-row table."""
        cols = ["problem", "C*", "C0", "V0", "t0", "C", "V", "t", "xi"]

        def fmt(v, spec):
            return "-" if v is None else format(v, spec)

        vals = [
            self.problem or "-",
            fmt(self.C_star, ".4g"),
            fmt(self.C0, ".4g"),
            fmt(self.V0, ".3f"),
            fmt(self.t0, ".0f"),
            fmt(self.C, ".4g"),
            fmt(self.V, ".3f"),
            fmt(self.t, ".0f"),
            f"{100 * self.xi:.2f}%",
        ]
        w = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        line = lambda xs: "  ".join(x.rjust(n) for x, n in zip(xs, w))  # noqa: E731
        return line(cols) + "\n" + line(vals) + "\n"


def design_deviation(c: float, v: float, c0: float, v0: float) -> float:
    return (c * v - c0 * v0) / (c0 * v0)


def _cells_in_convex(poly: np.ndarray, x0: int, y0: int, x1: int, y1: int, tol: float = 1e-9):
    """Cell indices ``(i, j)`` in the box whose centres lie in a CCW convex polygon."""
    ii, jj = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
    px, py = ii.ravel() + 0.5, jj.ravel() + 0.5
    inside = np.ones(px.shape, dtype=bool)
    m = len(poly)
    for k in range(m):
        a, b = poly[k], poly[(k + 1) % m]
        cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        inside &= cross >= -tol * np.hypot(b[0] - a[0], b[1] - a[1])
    return ii.ravel()[inside], jj.ravel()[inside]


def _inside_convex(poly: np.ndarray, px, py, strict: bool = True) -> np.ndarray:
    inside = np.ones(np.shape(px), dtype=bool)
    m = len(poly)
    for k in range(m):
        a, b = poly[k], poly[(k + 1) % m]
        cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        inside &= cross > 0 if strict else cross >= 0
    return inside


def rasterize(lattice: LatticeDesign, shape: tuple[int, int], domain: np.ndarray | None = None, absorb_uncovered: bool = True):
    """Binary image ``(ny, nx)`` of the lattice, sampled at cell centres (unit cells).

    A cell is solid when its centre lies in a triangle but not strictly inside
    its void, or inside a gap patch.  Domain cells covered by no triangle
    (slivers between curved outline and straight boundary edges) count as
    solid when ``absorb_uncovered`` is set.
    """
    nx, ny = shape
    solid = np.zeros((ny, nx), dtype=bool)
    covered = np.zeros((ny, nx), dtype=bool)
    mesh = lattice.mesh
    for k in range(mesh.n_triangles):
        tri = lattice.triangle_points(k)
        x0, y0 = np.floor(tri.min(axis=0)).astype(int)
        x1, y1 = np.ceil(tri.max(axis=0)).astype(int) + 1
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(x1, nx), min(y1, ny)
        if x0 >= x1 or y0 >= y1:
            continue
        ii, jj = _cells_in_convex(tri, x0, y0, x1, y1)
        if len(ii) == 0:
            continue
        covered[jj, ii] = True
        if not lattice.kept[k]:
            continue
        void = lattice.void(k)
        if len(void) >= 3:
            in_void = _inside_convex(void, ii + 0.5, jj + 0.5, strict=True)
        else:
            in_void = np.zeros(len(ii), dtype=bool)
        solid[jj[~in_void], ii[~in_void]] = True
    for patch in lattice.patches:
        x0, y0 = np.floor(patch.min(axis=0)).astype(int)
        x1, y1 = np.ceil(patch.max(axis=0)).astype(int) + 1
        x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, nx), min(y1, ny)
        if x0 >= x1 or y0 >= y1:
            continue
        ii, jj = _cells_in_convex(patch, x0, y0, x1, y1)
        solid[jj, ii] = True
    if domain is not None:
        if absorb_uncovered:
            solid |= domain & ~covered
        solid &= domain
    return solid


def triangle_raster_fractions(lattice: LatticeDesign, samples: int = 8192) -> np.ndarray:
    """Solid fraction of each triangle, sampled on a grid with about ``samples`` points inside it."""
    mesh = lattice.mesh
    areas = mesh.areas()
    out = np.zeros(mesh.n_triangles)
    patches_by = {}
    for p, t in zip(lattice.patches, lattice.patch_owner):
        patches_by.setdefault(int(t), []).append(p)
    for k in range(mesh.n_triangles):
        tri = lattice.triangle_points(k)
        step = np.sqrt(areas[k] / samples)
        lo, hi = tri.min(axis=0), tri.max(axis=0)
        gx = np.arange(lo[0] + 0.5 * step, hi[0], step)
        gy = np.arange(lo[1] + 0.5 * step, hi[1], step)
        px, py = (a.ravel() for a in np.meshgrid(gx, gy))
        inside = _inside_convex(tri, px, py, strict=False)
        px, py = px[inside], py[inside]
        if not lattice.kept[k]:
            solid = np.zeros(len(px), dtype=bool)
        else:
            void = lattice.void(k)
            solid = ~_inside_convex(void, px, py) if len(void) >= 3 else np.ones(len(px), dtype=bool)
        for p in patches_by.get(k, []):
            solid |= _inside_convex(p, px, py, strict=False)
        out[k] = solid.mean() if len(px) else np.nan
    return out


def interpolate_design(design, points: np.ndarray):
    """Bilinear interpolation of ``alpha`` and raw ``theta`` at arbitrary points.

    Only active cell centres contribute; weights are renormalized.
    """
    nx, ny = design.shape
    cs = design.cell_size
    alpha_img = design.image(design.alpha, fill=0.0)
    theta_vals = np.asarray(design.theta, dtype=float)
    theta_img = design.image(theta_vals, fill=0.0)
    act = design.active
    px = points[:, 0] / cs - 0.5
    py = points[:, 1] / cs - 0.5
    i0, j0 = np.floor(px).astype(int), np.floor(py).astype(int)
    fx, fy = px - i0, py - j0
    tshape = theta_vals.shape[1:]
    acc_a = np.zeros((len(px), 3))
    acc_t = np.zeros((len(px),) + tshape)
    acc_w = np.zeros(len(px))
    for di, dj, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        ii, jj = i0 + di, j0 + dj
        ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
        iic, jjc = np.clip(ii, 0, nx - 1), np.clip(jj, 0, ny - 1)
        ok &= act[jjc, iic]
        w = np.where(ok, w, 0.0)
        acc_a += w[:, None] * alpha_img[jjc, iic]
        acc_t += w.reshape((-1,) + (1,) * len(tshape)) * theta_img[jjc, iic]
        acc_w += w
    # points whose four neighbours are all inactive take the nearest active cell
    lost = acc_w <= 0
    if np.any(lost):
        from scipy.spatial import cKDTree

        centers = design.cell_centers()
        _, idx = cKDTree(centers).query(points[lost])
        acc_a[lost] = design.alpha[idx]
        acc_t[lost] = theta_vals[idx]
        acc_w[lost] = 1.0
    return acc_a / acc_w[:, None], acc_t / acc_w.reshape((-1,) + (1,) * len(tshape))


def project_specs(design, fine: ProblemSpec, chunk: int = 200_000) -> np.ndarray:
    """Per-fine-cell elasticity matrices of the interpolated design."""
    grid = fine.grid()
    centers = grid.cell_centers(fine.cell_size)
    out = np.empty((len(centers), 3, 3))
    for s in range(0, len(centers), chunk):
        a, th = interpolate_design(design, centers[s:s + chunk])
        out[s:s + chunk] = rank3.elasticity_matrix(a, th, fine.material, free=design.free)
    return out


def projected_density(design, fine: ProblemSpec) -> np.ndarray:
    centers = fine.grid().cell_centers(fine.cell_size)
    a, _ = interpolate_design(design, centers)
    return rank3.volume_fraction(a)


def lattice_stiffness(solid_cells: np.ndarray, fine: ProblemSpec) -> np.ndarray:
    mat = fine.material
    s_plus = rank3.isotropic_voigt(mat.e_plus, mat.v0)
    s_minus = rank3.isotropic_voigt(mat.e_minus, mat.v0)
    return np.where(solid_cells[:, None, None], s_plus, s_minus)


def evaluate(
    lattice: LatticeDesign,
    design,
    fine: ProblemSpec,
    solver: str = "auto",
    absorb_uncovered: bool = True,
) -> EvaluationReport:
    """Fine-grid compliance and volume of the lattice and of the projected design."""
    t_start = time.perf_counter()
    img = rasterize(lattice, fine.shape, fine.active, absorb_uncovered=absorb_uncovered)
    grid = fine.grid()
    solid = img.ravel()[grid.cells]
    V = float(solid.mean())
    res = assemble_and_solve(fine, lattice_stiffness(solid, fine), solver=solver)
    C = res.total_compliance
    log.info("lattice on fine grid: C = %.6g, V = %.4f", C, V)
    S0 = project_specs(design, fine)
    res0 = assemble_and_solve(fine, S0, solver=solver)
    C0 = res0.total_compliance
    V0 = float(projected_density(design, fine).mean())
    log.info("projected design: C0 = %.6g, V0 = %.4f", C0, V0)
    xi = design_deviation(C, V, C0, V0)
    return EvaluationReport(
        C=C,
        V=V,
        C0=C0,
        V0=V0,
        xi=xi,
        compliance_cases=res.compliance_per_case.tolist(),
        compliance0_cases=res0.compliance_per_case.tolist(),
        t0=getattr(design, "elapsed", None),
        t=lattice.meta.get("elapsed"),
        n_triangles=lattice.mesh.n_triangles,
        problem=fine.name,
        extra={"evaluation_seconds": time.perf_counter() - t_start},
    )
