"""Homogenization-based optimization of equilateral rank-3 fields.

Widths are updated by optimality criteria, the layer-3 angle by a
constraint-free MMA step.  Both variable sets pass through the same cone
filter before every analysis.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import rank3
from .fea import ProblemSpec, assemble_and_solve, compliance_gradient, principal_stress_init

log = logging.getLogger(__name__)

H0 = 6.0
THETA_MIN, THETA_MAX = -rank3.THETA_BOUND, rank3.THETA_BOUND


class OptimizationError(RuntimeError):
    pass


@dataclass
class MMAState:
    xold1: np.ndarray | None = None
    xold2: np.ndarray | None = None
    low: np.ndarray | None = None
    upp: np.ndarray | None = None
    iteration: int = 0


@dataclass
class DesignField:
    """Per-active-cell design of the simulation grid.

    ``x_alpha``/``x_theta`` are the optimizer's variables; ``alpha``/``theta``
    the filtered (physical) fields used for analysis and de-homogenization.
    """

    shape: tuple[int, int]
    active: np.ndarray
    x_alpha: np.ndarray
    x_theta: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    cell_size: float = 1.0
    l_min: float = 0.1
    l_max: float = 0.5
    free: bool = False
    iteration: int = 0
    history: list = field(default_factory=list)
    mma: MMAState = field(default_factory=MMAState)
    c_star: float | None = None
    p_star: float | None = None
    elapsed: float = 0.0

    @property
    def n_cells(self) -> int:
        return len(self.alpha)

    @property
    def theta3(self) -> np.ndarray:
        return self.theta[:, 2] if self.free else self.theta

    @property
    def density(self) -> np.ndarray:
        return rank3.volume_fraction(self.alpha)

    def image(self, values: np.ndarray, fill=np.nan) -> np.ndarray:
        """Scatter per-active-cell values into an ``(ny, nx)`` image."""
        nx, ny = self.shape
        out = np.full((ny * nx,) + values.shape[1:], fill, dtype=float)
        out[np.flatnonzero(self.active.ravel())] = values
        return out.reshape((ny, nx) + values.shape[1:])

    def cell_centers(self) -> np.ndarray:
        nx, _ = self.shape
        cells = np.flatnonzero(self.active.ravel())
        return np.stack([cells % nx + 0.5, cells // nx + 0.5], axis=1) * self.cell_size


# --------------------------------------------------------------------------
# filter


def filter_matrix(active: np.ndarray, radius: float) -> sp.csr_matrix:
    """Row-normalized cone filter ``max(0, radius - dist)`` over active cells."""
    ny, nx = active.shape
    cells = np.flatnonzero(active.ravel())
    index = -np.ones(nx * ny, dtype=np.int64)
    index[cells] = np.arange(len(cells))
    ex, ey = cells % nx, cells // nx
    r = int(np.ceil(radius))
    rows, cols, vals = [], [], []
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            w = radius - np.hypot(dx, dy)
            if w <= 0:
                continue
            x2, y2 = ex + dx, ey + dy
            ok = (x2 >= 0) & (x2 < nx) & (y2 >= 0) & (y2 < ny)
            j = np.where(ok, index[np.clip(y2, 0, ny - 1) * nx + np.clip(x2, 0, nx - 1)], -1)
            ok &= j >= 0
            rows.append(np.flatnonzero(ok))
            cols.append(j[ok])
            vals.append(np.full(ok.sum(), w))
    H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(cells),) * 2)
    H = H.tocsr()
    return sp.diags(1.0 / np.asarray(H.sum(axis=1)).ravel()) @ H


def filter_fields(design: DesignField, radius: float) -> DesignField:
    """Return a copy of ``design`` whose physical fields are the filtered variables."""
    H = filter_matrix(design.active, radius)
    return replace(design, alpha=H @ design.x_alpha, theta=H @ design.x_theta)


# --------------------------------------------------------------------------
# orientation regularization


def grid_edges(active: np.ndarray) -> np.ndarray:
    """Unordered pairs of edge-sharing active cells, as indices into the active list."""
    ny, nx = active.shape
    index = -np.ones((ny, nx), dtype=np.int64)
    index[active] = np.arange(active.sum())
    h = np.stack([index[:, :-1].ravel(), index[:, 1:].ravel()], axis=1)
    v = np.stack([index[:-1, :].ravel(), index[1:, :].ravel()], axis=1)
    e = np.concatenate([h, v])
    return e[(e >= 0).all(axis=1)]


@dataclass
class RegularizationReport:
    total: float
    per_edge: np.ndarray
    edges: np.ndarray
    gradient: np.ndarray


def regularization(theta3: np.ndarray, edges: np.ndarray, h0: float = H0) -> RegularizationReport:
    """Per-edge penalty ``1/2 - 1/2 cos(h0 * dtheta)`` summed over ordered neighbour pairs."""
    theta3 = np.asarray(theta3, dtype=float)
    d = theta3[edges[:, 0]] - theta3[edges[:, 1]]
    per_edge = 0.5 - 0.5 * np.cos(h0 * d)
    # each unordered edge appears twice in the ordered-pair sum
    total = 2.0 * float(per_edge.sum())
    g = h0 * np.sin(h0 * d)
    grad = np.zeros_like(theta3)
    np.add.at(grad, edges[:, 0], g)
    np.add.at(grad, edges[:, 1], -g)
    return RegularizationReport(total, per_edge, edges, grad)


def objective(c: float, p: float, c_star: float, p_star: float, w: float) -> float:
    if not 0.0 < w <= 1.0:
        raise ValueError(f"weight W must lie in (0, 1], got {w}")
    if w == 1.0:
        return c / c_star
    if p_star <= 0.0:
        raise ValueError("initial regularization P* is zero; use W = 1 for this initialization")
    return w * c / c_star + (1.0 - w) * p / p_star


# --------------------------------------------------------------------------
# updates


def move_window(x: np.ndarray, move: float):
    """``x - move`` and ``x + move`` rounded inward so the realized step never exceeds ``move``."""
    lo, hi = x - move, x + move
    for _ in range(2):
        lo = np.where(x - lo > move, np.nextafter(lo, np.inf), lo)
        hi = np.where(hi - x > move, np.nextafter(hi, -np.inf), hi)
    return lo, hi


def oc_update_widths(
    x: np.ndarray,
    dc: np.ndarray,
    volume_budget: float,
    l_min: float,
    l_max: float,
    H: sp.spmatrix | None = None,
    move: float = 0.01,
    eta: float = 0.5,
    bracket: tuple[float, float] = (1e-9, 1e9),
) -> np.ndarray:
    """One optimality-criteria step for the width variables ``x`` (N, 3).

    ``dc`` is the compliance gradient w.r.t. ``x`` (already chained through
    the filter ``H``, which maps variables to physical widths).
    """
    n = len(x)
    if H is None:
        H = sp.identity(n, format="csr")
    dc = np.minimum(dc, -1e-12)
    dv = H.T @ rank3.volume_fraction_gradient(H @ x) / n
    dv = np.maximum(dv, 1e-30)
    lo, hi = move_window(x, move)
    lo, hi = np.maximum(lo, l_min), np.minimum(hi, l_max)

    def step(lam):
        return np.clip(x * (-dc / (lam * dv)) ** eta, lo, hi)

    def vol(xn):
        return float(rank3.volume_fraction(H @ xn).mean())

    l1, l2 = bracket
    if vol(step(l2)) > volume_budget + 1e-12:
        raise OptimizationError("OC bisection not bracketing: volume above budget at the largest multiplier")
    if vol(step(l1)) <= volume_budget:
        return step(l1)
    while l2 / l1 - 1.0 > 1e-12:
        lm = np.sqrt(l1 * l2)
        if vol(step(lm)) > volume_budget:
            l1 = lm
        else:
            l2 = lm
    return step(l2)


def mma_update_theta(
    x: np.ndarray,
    df: np.ndarray,
    state: MMAState,
    move: float = np.pi / 180,
    xmin: float = THETA_MIN,
    xmax: float = THETA_MAX,
    asyinit: float = 0.5,
    asyincr: float = 1.2,
    asydecr: float = 0.7,
    albefa: float = 0.1,
    raa0: float = 1e-5,
) -> np.ndarray:
    """One MMA iteration without constraints; updates ``state`` in place."""
    x = np.asarray(x, dtype=float)
    df = np.asarray(df, dtype=float)
    span = xmax - xmin
    state.iteration += 1
    if state.iteration <= 2 or state.low is None:
        low = x - asyinit * span
        upp = x + asyinit * span
    else:
        zzz = (x - state.xold1) * (state.xold1 - state.xold2)
        factor = np.ones_like(x)
        factor[zzz > 0] = asyincr
        factor[zzz < 0] = asydecr
        low = x - factor * (state.xold1 - state.low)
        upp = x + factor * (state.upp - state.xold1)
        low = np.clip(low, x - 10 * span, x - 0.01 * span)
        upp = np.clip(upp, x + 0.01 * span, x + 10 * span)
    x_lo, x_hi = move_window(x, move)
    alfa = np.maximum.reduce([low + albefa * (x - low), x_lo, np.full_like(x, xmin)])
    beta = np.minimum.reduce([upp - albefa * (upp - x), x_hi, np.full_like(x, xmax)])
    reg = raa0 / max(span, 1e-5)
    pos, neg = np.maximum(df, 0.0), np.maximum(-df, 0.0)
    p = (upp - x) ** 2 * (1.001 * pos + 0.001 * neg + reg)
    q = (x - low) ** 2 * (0.001 * pos + 1.001 * neg + reg)
    sp_, sq = np.sqrt(p), np.sqrt(q)
    xnew = (sp_ * low + sq * upp) / (sp_ + sq)
    xnew = np.clip(xnew, alfa, beta)
    state.xold2 = state.xold1 if state.xold1 is not None else x.copy()
    state.xold1 = x.copy()
    state.low, state.upp = low, upp
    return xnew


# --------------------------------------------------------------------------
# driver


@dataclass
class OptimizationSettings:
    init: str = "stress"
    weight: float = 0.5
    max_iter: int = 300
    filter_radius: float = 2.0
    width_move: float = 0.01
    theta_move: float = np.pi / 180
    free: bool = False
    solver: str = "direct"
    dump_dir: str | None = None


def initial_design(problem: ProblemSpec, settings: OptimizationSettings) -> DesignField:
    n = problem.n_active
    a0 = np.clip(problem.volume_budget / 3.0, problem.l_min, problem.l_max)
    x_alpha = np.full((n, 3), a0)
    if settings.init == "uniform":
        th = np.full(n, np.pi / 2)
    elif settings.init == "stress":
        th = principal_stress_init(problem, solver=settings.solver).theta3_init
    else:
        raise ValueError(f"unknown initialization {settings.init!r}")
    x_theta = (th[:, None] + rank3.LAYER_OFFSETS) if settings.free else th
    return DesignField(
        shape=problem.shape,
        active=problem.active.copy(),
        x_alpha=x_alpha,
        x_theta=np.array(x_theta, dtype=float),
        alpha=x_alpha.copy(),
        theta=np.array(x_theta, dtype=float),
        cell_size=problem.cell_size,
        l_min=problem.l_min,
        l_max=problem.l_max,
        free=settings.free,
    )


@dataclass
class Evaluation:
    compliance: float
    regularization: RegularizationReport
    dc_dalpha: np.ndarray
    dc_dtheta: np.ndarray
    result: object


def evaluate_design(problem: ProblemSpec, alpha, theta, free: bool, edges, solver="direct") -> Evaluation:
    grid = problem.grid()
    S, dSa, dSt = rank3.elasticity_sensitivities(alpha, theta, problem.material, free=free)
    res = assemble_and_solve(problem, S, solver=solver)
    dca = compliance_gradient(grid, res, dSa)
    dct = compliance_gradient(grid, res, dSt)
    th3 = theta[:, 2] if free else theta
    return Evaluation(res.total_compliance, regularization(th3, edges), dca, dct, res)


def _dump(design: DesignField, settings: OptimizationSettings, it: int) -> str:
    from .io import save_checkpoint
    import os

    path = os.path.join(settings.dump_dir or ".", f"nan_dump_iter{it:04d}.txt")
    save_checkpoint(path, design)
    return path


def run_optimization(
    problem: ProblemSpec,
    settings: OptimizationSettings | None = None,
    callback=None,
    design: DesignField | None = None,
) -> DesignField:
    """Optimize widths and orientations; returns the final design with its history.

    History rows are ``(C, P, O)``.  ``design.c0`` style re-evaluation is
    available through :func:`evaluate_design`.
    """
    s = settings or OptimizationSettings()
    if not 0.0 < s.weight <= 1.0:
        raise ValueError(f"weight W must lie in (0, 1], got {s.weight}")
    weight = 1.0 if s.free else s.weight
    t0 = time.perf_counter()
    if design is None:
        design = initial_design(problem, s)
    H = filter_matrix(problem.active, s.filter_radius)
    edges = grid_edges(problem.active)
    n = design.n_cells

    for it in range(design.iteration, s.max_iter):
        design.alpha = H @ design.x_alpha
        design.theta = H @ design.x_theta
        ev = evaluate_design(problem, design.alpha, design.theta, design.free, edges, s.solver)
        c, p = ev.compliance, ev.regularization.total
        if design.c_star is None:
            design.c_star, design.p_star = c, p
        o = objective(c, p, design.c_star, design.p_star, weight)
        if not np.isfinite(o):
            path = _dump(design, s, it)
            raise FloatingPointError(f"non-finite objective at iteration {it}; design dumped to {path}")
        design.history.append((c, p, o))
        vol = float(design.density.mean())
        log.info("it %4d  C %.6g  P %.6g  O %.6g  V %.4f", it, c, p, o, vol)
        if callback is not None:
            callback(it, design)

        dca = H.T @ ev.dc_dalpha
        do_dt = weight / design.c_star * ev.dc_dtheta
        if weight < 1.0:
            do_dt = do_dt + (1.0 - weight) / design.p_star * ev.regularization.gradient
        do_dt = H.T @ do_dt
        design.x_alpha = oc_update_widths(
            design.x_alpha, dca, problem.volume_budget, problem.l_min, problem.l_max, H, move=s.width_move
        )
        shape = design.x_theta.shape
        design.x_theta = mma_update_theta(
            design.x_theta.ravel(), do_dt.ravel(), design.mma, move=s.theta_move
        ).reshape(shape)
        design.iteration = it + 1

    design.alpha = H @ design.x_alpha
    design.theta = H @ design.x_theta
    design.elapsed = time.perf_counter() - t0
    log.info("optimization finished after %d iterations (%.1f s)", design.iteration, design.elapsed)
    return design


def final_compliance(problem: ProblemSpec, design: DesignField, solver: str = "direct") -> float:
    """Compliance of the physical fields on the simulation grid."""
    S = rank3.elasticity_matrix(design.alpha, design.theta, problem.material, free=design.free)
    return assemble_and_solve(problem, S, solver=solver).total_compliance
