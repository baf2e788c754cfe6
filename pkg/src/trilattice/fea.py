"""Plane-stress bilinear finite elements on Cartesian grids.

Nodes are numbered row by row, ``node = j * (nx + 1) + i`` for the node at
``x = i``, ``y = j`` (y up).  Cell ``(ex, ey)`` has index ``ey * nx + ex``;
cell-wise arrays are stored as ``(ny, nx)`` images.  Only active cells are
assembled; nodes that touch no active cell carry no unknowns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .rank3 import MaterialConstants, isotropic_voigt

log = logging.getLogger(__name__)

try:  # optional, much faster for the large validation grids
    from sksparse.cholmod import cholesky as _cholmod
except ImportError:  # pragma: no cover - depends on the environment
    _cholmod = None

# largest system sent to SuperLU by solver="auto"
AUTO_DIRECT_DOFS = 300_000

_GAUSS = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


class SolverError(RuntimeError):
    """Base class for linear-solve failures."""


class SingularSystemError(SolverError):
    pass


class NonConvergenceError(SolverError):
    pass


@dataclass
class Fixation:
    nodes: np.ndarray
    fix_x: bool = True
    fix_y: bool = True

    def __post_init__(self):
        self.nodes = np.unique(np.asarray(self.nodes, dtype=np.int64))

    def dofs(self) -> np.ndarray:
        parts = []
        if self.fix_x:
            parts.append(2 * self.nodes)
        if self.fix_y:
            parts.append(2 * self.nodes + 1)
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


@dataclass
class LoadCase:
    """Nodal forces of one loading condition.

    ``fixations`` overrides the problem-wide supports for this case only,
    which covers problems whose supports change with the load.
    """

    nodes: np.ndarray
    forces: np.ndarray
    weight: float | None = None
    fixations: list[Fixation] | None = None
    name: str = ""

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64).reshape(-1)
        self.forces = np.asarray(self.forces, dtype=float).reshape(-1, 2)
        if len(self.nodes) != len(self.forces):
            raise ValueError("one force vector per load node required")


@dataclass
class ProblemSpec:
    shape: tuple[int, int]
    active: np.ndarray
    fixations: list[Fixation]
    load_cases: list[LoadCase]
    coarsening: int = 1
    volume_budget: float = 0.5
    l_min: float = 0.1
    l_max: float = 0.5
    material: MaterialConstants = field(default_factory=MaterialConstants)
    cell_size: float = 1.0
    name: str = "problem"

    def __post_init__(self):
        nx, ny = self.shape
        self.shape = (int(nx), int(ny))
        self.active = np.asarray(self.active, dtype=bool)
        if self.active.shape != (ny, nx):
            raise ValueError(f"mask shape {self.active.shape} != (ny, nx) = {(ny, nx)}")
        if not self.load_cases:
            raise ValueError("at least one load case required")
        if not 0.0 < self.volume_budget < 1.0 + 1e-12:
            raise ValueError("volume budget must lie in (0, 1)")
        if not 0.0 < self.l_min < self.l_max <= 1.0:
            raise ValueError("need 0 < l_min < l_max <= 1")
        if self.coarsening < 1 or nx % self.coarsening or ny % self.coarsening:
            raise ValueError("coarsening factor must divide the resolution")
        w = self.weights
        if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
            raise ValueError("load-case weights must be non-negative and sum to one")

    @property
    def nx(self) -> int:
        return self.shape[0]

    @property
    def ny(self) -> int:
        return self.shape[1]

    @property
    def weights(self) -> np.ndarray:
        m = len(self.load_cases)
        given = [c.weight for c in self.load_cases]
        if all(g is None for g in given):
            return np.full(m, 1.0 / m)
        if any(g is None for g in given):
            raise ValueError("either all or no load cases carry weights")
        return np.asarray(given, dtype=float)

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def grid(self) -> "Grid":
        return Grid(self.nx, self.ny, self.active)

    def case_fixations(self, q: int) -> list[Fixation]:
        own = self.load_cases[q].fixations
        return self.fixations if own is None else own

    def validate_nodes(self):
        """Every load/support node must belong to an active cell."""
        used = self.grid().node_used
        for fx in self.fixations + [f for c in self.load_cases for f in (c.fixations or [])]:
            if not used[fx.nodes].all():
                raise ValueError("fixation node outside the active domain")
        for q, c in enumerate(self.load_cases):
            if not used[c.nodes].all():
                raise ValueError(f"load node of case {q} outside the active domain")


class Grid:
    """Indexing helper for the active part of a Cartesian grid."""

    def __init__(self, nx: int, ny: int, active: np.ndarray):
        self.nx, self.ny = nx, ny
        self.active = np.asarray(active, dtype=bool)
        cells = np.flatnonzero(self.active.ravel())
        self.cells = cells
        ex, ey = cells % nx, cells // nx
        n0 = ey * (nx + 1) + ex
        self.element_nodes = np.stack([n0, n0 + 1, n0 + nx + 2, n0 + nx + 1], axis=1)
        self.edofs = np.stack([2 * self.element_nodes, 2 * self.element_nodes + 1], axis=2).reshape(-1, 8)
        self.n_nodes = (nx + 1) * (ny + 1)
        self.ndof = 2 * self.n_nodes
        used = np.zeros(self.n_nodes, dtype=bool)
        used[self.element_nodes.ravel()] = True
        self.node_used = used

    def cell_centers(self, cell_size: float = 1.0) -> np.ndarray:
        ex, ey = self.cells % self.nx, self.cells // self.nx
        return np.stack([ex + 0.5, ey + 0.5], axis=1) * cell_size

    def node_xy(self, nodes) -> np.ndarray:
        nodes = np.asarray(nodes)
        return np.stack([nodes % (self.nx + 1), nodes // (self.nx + 1)], axis=-1).astype(float)

    def node_id(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    def free_dofs(self, fixations: list[Fixation]) -> np.ndarray:
        mask = np.repeat(self.node_used, 2)
        for f in fixations:
            mask[f.dofs()] = False
        return np.flatnonzero(mask)


# --------------------------------------------------------------------------
# element matrices


def _strain_matrix(xi: float, eta: float) -> np.ndarray:
    """Strain-displacement matrix of the unit square at local point (xi, eta)."""
    dN_dx = np.array([-(1 - eta), (1 - eta), eta, -eta])
    dN_dy = np.array([-(1 - xi), -xi, xi, (1 - xi)])
    B = np.zeros((3, 8))
    B[0, 0::2] = dN_dx
    B[1, 1::2] = dN_dy
    B[2, 0::2] = dN_dy
    B[2, 1::2] = dN_dx
    return B


GAUSS_B = np.array([_strain_matrix(x, y) for y in _GAUSS for x in _GAUSS])  # (4, 3, 8)
GAUSS_W = np.full(4, 0.25)
CENTER_B = _strain_matrix(0.5, 0.5)
# K_e = sum_ab S_ab * STIFFNESS_BASIS[a, b]
STIFFNESS_BASIS = np.einsum("g,gai,gbj->abij", GAUSS_W, GAUSS_B, GAUSS_B)


def element_stiffness(s) -> np.ndarray:
    """8x8 stiffness of a unit square for Voigt matrix ``s`` (batched over leading axes)."""
    return np.einsum("...ab,abij->...ij", np.asarray(s, dtype=float), STIFFNESS_BASIS)


def element_energy_moments(u_e: np.ndarray) -> np.ndarray:
    """``E[e, a, b] = u_e^T G_ab u_e``, so that ``u^T K_e(S) u = sum S_ab E_ab``."""
    eps = np.einsum("gai,ei->ega", GAUSS_B, u_e)
    return np.einsum("g,ega,egb->eab", GAUSS_W, eps, eps)


# --------------------------------------------------------------------------
# assembly and solution


@dataclass
class SolveResult:
    displacements: np.ndarray  # (M, ndof)
    compliance_per_case: np.ndarray
    weights: np.ndarray
    residuals: np.ndarray

    @property
    def total_compliance(self) -> float:
        return float(np.dot(self.weights, self.compliance_per_case))

    def energy_moments(self, grid: Grid) -> np.ndarray:
        """Weighted element energy moments summed over load cases."""
        out = np.zeros((len(grid.cells), 3, 3))
        for w, u in zip(self.weights, self.displacements):
            out += w * element_energy_moments(u[grid.edofs])
        return out


def assemble(grid: Grid, s_cells: np.ndarray) -> sp.csc_matrix:
    s_cells = np.asarray(s_cells, dtype=float)
    if s_cells.shape != (len(grid.cells), 3, 3):
        raise ValueError(f"expected {(len(grid.cells), 3, 3)} cell matrices, got {s_cells.shape}")
    iu, ju = np.triu_indices(8)
    basis = STIFFNESS_BASIS[:, :, iu, ju].reshape(9, -1)
    vals = (s_cells.reshape(-1, 9) @ basis).ravel()
    r = grid.edofs[:, iu].ravel()
    c = grid.edofs[:, ju].ravel()
    lo, hi = np.minimum(r, c), np.maximum(r, c)
    idx = np.int32 if grid.ndof < 2**31 else np.int64
    upper = sp.coo_matrix((vals, (lo.astype(idx), hi.astype(idx))), shape=(grid.ndof, grid.ndof)).tocsc()
    diag = sp.diags(upper.diagonal())
    return (upper + upper.T - diag).tocsc()


def _rhs(grid: Grid, case: LoadCase) -> np.ndarray:
    f = np.zeros(grid.ndof)
    np.add.at(f, 2 * case.nodes, case.forces[:, 0])
    np.add.at(f, 2 * case.nodes + 1, case.forces[:, 1])
    return f


def _factorize(K: sp.csc_matrix):
    if _cholmod is not None:
        try:
            fac = _cholmod(K)
        except Exception as exc:  # CholmodNotPositiveDefiniteError and friends
            raise SingularSystemError(f"stiffness matrix not positive definite: {exc}") from exc
        return fac
    try:
        lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        raise SingularSystemError(f"stiffness matrix singular: {exc}") from exc
    return lu.solve


def _cg(K: sp.csc_matrix, b: np.ndarray, precond: str, tol: float, maxiter: int, cache: dict):
    if precond == "jacobi":
        d = K.diagonal()
        M = spla.LinearOperator(K.shape, matvec=lambda x: x / d)
    elif precond == "amg":
        if "amg" not in cache:
            import pyamg

            cache["amg"] = pyamg.smoothed_aggregation_solver(K.tocsr(), symmetry="symmetric", max_coarse=500)
        M = cache["amg"].aspreconditioner(cycle="V")
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")
    it = [0]

    def count(_):
        it[0] += 1

    x, info = spla.cg(K, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M, callback=count)
    if info > 0:
        raise NonConvergenceError(f"CG did not reach rtol={tol} within {maxiter} iterations")
    log.debug("CG converged in %d iterations", it[0])
    return x


def assemble_and_solve(
    problem: ProblemSpec,
    s_cells: np.ndarray,
    solver: str = "direct",
    tol: float = 1e-8,
    maxiter: int = 20000,
    precond: str = "amg",
    check_residual: bool = True,
) -> SolveResult:
    """Solve ``K U_q = F_q`` for every load case.

    ``solver`` is ``"direct"`` (CHOLMOD if installed, SuperLU otherwise),
    ``"cg"`` (preconditioned conjugate gradients, ``precond`` in
    ``{"amg", "jacobi"}``) or ``"auto"``, which picks the direct path unless
    the system is large and CHOLMOD is missing.
    """
    grid = problem.grid()
    if solver == "auto":
        solver = "direct" if (_cholmod is not None or grid.ndof <= AUTO_DIRECT_DOFS) else "cg"
    K = assemble(grid, s_cells)
    m = len(problem.load_cases)
    U = np.zeros((m, grid.ndof))
    comp = np.zeros(m)
    res = np.zeros(m)
    groups: dict[tuple, list[int]] = {}
    for q in range(m):
        key = tuple(sorted(tuple(f.dofs()) for f in problem.case_fixations(q)))
        groups.setdefault(key, []).append(q)
    for cases in groups.values():
        free = grid.free_dofs(problem.case_fixations(cases[0]))
        Kf = K[free][:, free].tocsc()
        solve = _factorize(Kf) if solver == "direct" else None
        cache: dict = {}
        for q in cases:
            f = _rhs(grid, problem.load_cases[q])
            ff = f[free]
            if solver == "direct":
                uf = solve(ff)
            elif solver == "cg":
                uf = _cg(Kf, ff, precond, tol, maxiter, cache)
            else:
                raise ValueError(f"unknown solver {solver!r}")
            uf = np.asarray(uf).reshape(-1)
            if not np.all(np.isfinite(uf)):
                raise SingularSystemError("non-finite displacements; supports leave rigid modes?")
            nf = np.linalg.norm(ff)
            res[q] = np.linalg.norm(Kf @ uf - ff) / nf if nf > 0 else 0.0
            if check_residual and res[q] > max(tol, 1e-8) and solver == "direct":
                raise SingularSystemError(f"relative residual {res[q]:.2e}; system near singular")
            U[q, free] = uf
            comp[q] = float(ff @ uf)
    return SolveResult(U, comp, problem.weights, res)


def compliance_gradient(grid: Grid, result: SolveResult, dS: np.ndarray) -> np.ndarray:
    """Adjoint derivative ``dC/dx = -sum_q w_q U_q^T dK/dx U_q`` for per-cell ``dS`` (..., 3, 3)."""
    E = result.energy_moments(grid)
    return -np.einsum("e...ab,eab->e...", dS, E)


# --------------------------------------------------------------------------
# grid hierarchy


def _axis_weights(n_fine: int, c: int):
    """Per fine node index along one axis: (coarse lo, coarse hi, weight lo, weight hi)."""
    i = np.arange(n_fine + 1)
    lo = i // c
    frac = (i % c) / c
    hi = np.minimum(lo + 1, n_fine // c)
    return lo, hi, 1.0 - frac, frac


def restriction_operator(nx: int, ny: int, c: int) -> sp.csr_matrix:
    """Bilinear interpolation coarse nodes -> fine nodes; its transpose restricts loads."""
    cx, cy = nx // c, ny // c
    xlo, xhi, wxl, wxh = _axis_weights(nx, c)
    ylo, yhi, wyl, wyh = _axis_weights(ny, c)
    jj, ii = np.meshgrid(np.arange(ny + 1), np.arange(nx + 1), indexing="ij")
    fine = (jj * (nx + 1) + ii).ravel()
    rows, cols, vals = [], [], []
    for xs, wx in ((xlo, wxl), (xhi, wxh)):
        for ys, wy in ((ylo, wyl), (yhi, wyh)):
            w = (wy[jj] * wx[ii]).ravel()
            keep = w > 0
            rows.append(fine[keep])
            cols.append((ys[jj] * (cx + 1) + xs[ii]).ravel()[keep])
            vals.append(w[keep])
    P = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=((nx + 1) * (ny + 1), (cx + 1) * (cy + 1)),
    )
    return P.tocsr()


def restrict_problem(fine: ProblemSpec) -> ProblemSpec:
    """Coarse simulation problem from the validation problem.

    Loads are restricted with the transpose of bilinear interpolation; a
    coarse node is supported when any fine node of its stencil is.  A coarse
    cell is active when any of its fine cells is.
    """
    c = fine.coarsening
    nx, ny = fine.shape
    cx, cy = nx // c, ny // c
    if c == 1:
        return replace(fine, coarsening=1)
    P = restriction_operator(nx, ny, c)
    Pt = P.T.tocsr()

    def restrict_fix(f: Fixation) -> Fixation:
        sel = np.zeros(P.shape[0])
        sel[f.nodes] = 1.0
        coarse = np.flatnonzero(Pt @ sel > 0)
        return Fixation(coarse, f.fix_x, f.fix_y)

    cases = []
    for case in fine.load_cases:
        fvec = np.zeros((P.shape[0], 2))
        np.add.at(fvec, case.nodes, case.forces)
        cf = Pt @ fvec
        nodes = np.flatnonzero(np.any(cf != 0, axis=1))
        fix = None if case.fixations is None else [restrict_fix(f) for f in case.fixations]
        cases.append(LoadCase(nodes, cf[nodes], case.weight, fix, case.name))
    active = fine.active.reshape(cy, c, cx, c).any(axis=(1, 3))
    return replace(
        fine,
        shape=(cx, cy),
        active=active,
        fixations=[restrict_fix(f) for f in fine.fixations],
        load_cases=cases,
        coarsening=1,
        cell_size=fine.cell_size * c,
    )


# --------------------------------------------------------------------------
# stresses


@dataclass
class StressSample:
    values: np.ndarray  # (M, n_cells, 2) principal stresses
    angles: np.ndarray  # (M, n_cells, 2) their directions in [0, pi)
    dominant_direction: np.ndarray  # (n_cells,)

    @property
    def theta3_init(self) -> np.ndarray:
        return self.dominant_direction + np.pi / 2


def principal_stresses(stress: np.ndarray):
    """Principal values and directions in [0, pi) of Voigt stresses (..., 3)."""
    sx, sy, txy = stress[..., 0], stress[..., 1], stress[..., 2]
    c = 0.5 * (sx + sy)
    r = np.hypot(0.5 * (sx - sy), txy)
    phi = 0.5 * np.arctan2(2.0 * txy, sx - sy)
    a1 = np.mod(phi, np.pi)
    a2 = np.mod(phi + np.pi / 2, np.pi)
    return np.stack([c + r, c - r], axis=-1), np.stack([a1, a2], axis=-1)


def dominant_directions(values: np.ndarray, angles: np.ndarray, tie_tol: float = 1e-9) -> np.ndarray:
    """Pick, per cell, the direction of the largest |sigma| over all candidates.

    Ties within ``tie_tol`` prefer the larger algebraic stress, then the
    smaller angle.
    """
    m, n, _ = values.shape
    v = values.transpose(1, 0, 2).reshape(n, 2 * m)
    a = angles.transpose(1, 0, 2).reshape(n, 2 * m)
    mag = np.abs(v)
    top = mag.max(axis=1, keepdims=True)
    tied = mag >= top - tie_tol * np.maximum(1.0, top)
    # lexicographic: larger algebraic value, then smaller angle
    score_v = np.where(tied, v, -np.inf)
    best_v = score_v.max(axis=1, keepdims=True)
    tied &= score_v >= best_v - tie_tol * np.maximum(1.0, np.abs(best_v))
    score_a = np.where(tied, a, np.inf)
    return score_a.min(axis=1)


def cell_stresses(grid: Grid, s_cells: np.ndarray, u: np.ndarray) -> np.ndarray:
    eps = np.einsum("ai,ei->ea", CENTER_B, u[grid.edofs])
    return np.einsum("eab,eb->ea", s_cells, eps)


def principal_stress_init(problem: ProblemSpec, **solve_kw) -> StressSample:
    """Principal stresses of the fully solid domain, one sample per cell centre."""
    grid = problem.grid()
    s_solid = np.broadcast_to(isotropic_voigt(problem.material.e_plus, problem.material.v0), (len(grid.cells), 3, 3))
    res = assemble_and_solve(problem, np.ascontiguousarray(s_solid), **solve_kw)
    vals, angs = [], []
    for u in res.displacements:
        v, a = principal_stresses(cell_stresses(grid, s_solid, u))
        vals.append(v)
        angs.append(a)
    vals, angs = np.array(vals), np.array(angs)
    return StressSample(vals, angs, dominant_directions(vals, angs))
