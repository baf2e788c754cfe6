"""Bundled test problems.

Geometries, supports and loads are approximations built from simple
analytic shapes; all are defined on the validation (fine) grid and carry a
coarsening factor for the simulation grid.
"""

from __future__ import annotations

import numpy as np

from .fea import Fixation, LoadCase, ProblemSpec


def _cell_centers(nx: int, ny: int):
    y, x = np.mgrid[0:ny, 0:nx] + 0.5
    return x, y


def boundary_nodes(active: np.ndarray) -> np.ndarray:
    """Nodes shared by an active and an inactive (or outside) cell."""
    ny, nx = active.shape
    pad = np.pad(active, 1)
    # cells around node (i, j): (i-1..i, j-1..j) in cell coordinates
    a = pad[:-1, :-1], pad[:-1, 1:], pad[1:, :-1], pad[1:, 1:]
    n_act = sum(x.astype(int) for x in a)
    mask = (n_act > 0) & (n_act < 4)
    j, i = np.nonzero(mask)
    return j * (nx + 1) + i


def _node_xy(nodes, nx):
    return np.stack([nodes % (nx + 1), nodes // (nx + 1)], axis=1).astype(float)


def nodes_near(nodes: np.ndarray, nx: int, point, radius: float) -> np.ndarray:
    xy = _node_xy(nodes, nx)
    d = np.hypot(xy[:, 0] - point[0], xy[:, 1] - point[1])
    return nodes[d <= radius]


def nodes_near_segment(nodes: np.ndarray, nx: int, a, b, tol: float) -> np.ndarray:
    xy = _node_xy(nodes, nx)
    a, b = np.asarray(a, float), np.asarray(b, float)
    ab = b - a
    t = np.clip(((xy - a) @ ab) / (ab @ ab), 0.0, 1.0)
    d = np.linalg.norm(xy - (a + t[:, None] * ab), axis=1)
    return nodes[d <= tol]


def distributed_load(nodes: np.ndarray, force, name="", fixations=None) -> LoadCase:
    force = np.asarray(force, dtype=float)
    if len(nodes) == 0:
        raise ValueError("empty load patch")
    return LoadCase(nodes, np.tile(force / len(nodes), (len(nodes), 1)), fixations=fixations, name=name)


def femur(scale: int = 8, volume_budget: float = 0.5) -> ProblemSpec:
    """Proximal-femur-like domain, bottom fixed, two hip loads.

    With ``scale=8`` the validation grid is 928 x 1200 and the simulation grid
    116 x 150.
    """
    cx, cy = 116, 150
    nx, ny = cx * scale, cy * scale
    x, y = _cell_centers(nx, ny)
    u, v = x / nx, y / ny
    # shaft, slightly inclined
    shaft_c = 0.60 - 0.06 * v
    shaft = (np.abs(u - shaft_c) <= 0.24) & (v <= 0.80)
    # greater trochanter
    troch = ((u - 0.70) / 0.25) ** 2 + ((v - 0.74) / 0.16) ** 2 <= 1.0
    # neck: band toward the head centre
    hc = np.array([0.30, 0.83])
    p0 = np.array([0.62, 0.66])
    d = hc - p0
    t = np.clip(((u - p0[0]) * d[0] + (v - p0[1]) * d[1]) / (d @ d), 0, 1)
    dist = np.hypot(u - (p0[0] + t * d[0]), (v - (p0[1] + t * d[1])) * ny / nx)
    neck = dist <= 0.19
    head = np.hypot(u - hc[0], (v - hc[1]) * ny / nx) <= 0.27
    active = shaft | troch | neck | head
    active &= v <= 0.985
    bnd = boundary_nodes(active)
    bottom = bnd[(bnd // (nx + 1)) == 0]
    fix = [Fixation(bottom, True, True)]
    head_top = np.array([hc[0] * nx, (hc[1] * ny + 0.27 * nx)])
    head_top[1] = min(head_top[1], 0.985 * ny)
    f1 = nodes_near(bnd, nx, head_top, 2.0 * scale)
    troch_top = np.array([0.72 * nx, (0.74 + 0.16) * ny])
    f2 = nodes_near(bnd, nx, troch_top, 2.0 * scale)
    cases = [
        distributed_load(f1, [0.35, -1.0], "head"),
        distributed_load(f2, [-0.6, -0.8], "trochanter"),
    ]
    if len(f1) == 0 or len(f2) == 0:
        raise RuntimeError("femur load patches missed the boundary")
    return ProblemSpec((nx, ny), active, fix, cases, coarsening=scale, volume_budget=volume_budget, name="femur")


def triangle(scale: int = 8, volume_budget: float = 0.5) -> ProblemSpec:
    """Equilateral triangle; each of three cases loads one edge outward and
    supports the corner opposite to it."""
    cx, cy = 170, 148
    nx, ny = cx * scale, cy * scale
    L = float(nx)
    Hgt = L * np.sqrt(3.0) / 2.0
    verts = np.array([[0.0, 0.0], [L, 0.0], [L / 2, Hgt]])
    x, y = _cell_centers(nx, ny)
    inside = np.ones_like(x, dtype=bool)
    for k in range(3):
        a, b = verts[k], verts[(k + 1) % 3]
        inside &= (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]) >= 0
    active = inside
    bnd = boundary_nodes(active)
    tol = 1.5
    cases = []
    for k in range(3):
        a, b = verts[k], verts[(k + 1) % 3]
        opp = verts[(k + 2) % 3]
        mid = 0.5 * (a + b)
        edge = b - a
        normal = np.array([edge[1], -edge[0]]) / np.linalg.norm(edge)
        load_nodes = nodes_near_segment(bnd, nx, mid - 0.06 * edge, mid + 0.06 * edge, tol + 0.75)
        seg = 0.22
        s1 = nodes_near_segment(bnd, nx, opp, opp + seg * (a - opp), tol + 0.75)
        s2 = nodes_near_segment(bnd, nx, opp, opp + seg * (b - opp), tol + 0.75)
        fix = [Fixation(np.union1d(s1, s2), True, True)]
        cases.append(distributed_load(load_nodes, normal, f"edge{k}", fixations=fix))
    return ProblemSpec((nx, ny), active, [], cases, coarsening=scale, volume_budget=volume_budget, name="triangle")


def beam(scale: int = 16, volume_budget: float = 0.3, l_min: float = 1e-6, l_max: float = 1.0) -> ProblemSpec:
    """Simply supported 2:1 beam with five single top loads (one per case)."""
    cx, cy = 100, 50
    nx, ny = cx * scale, cy * scale
    active = np.ones((ny, nx), dtype=bool)
    pad = 2 * scale
    left = np.arange(0, pad + 1)
    right = np.arange(nx - pad, nx + 1)
    fix = [Fixation(left, True, True), Fixation(right, False, True)]
    cases = []
    top = ny * (nx + 1)
    for k in range(1, 6):
        xc = int(round(k * nx / 6))
        nodes = top + np.arange(xc - scale, xc + scale + 1)
        cases.append(distributed_load(nodes, [0.0, -1.0], f"load{k}"))
    return ProblemSpec(
        (nx, ny), active, fix, cases, coarsening=scale, volume_budget=volume_budget,
        l_min=l_min, l_max=l_max, name="beam",
    )


def mbb(nx: int = 60, ny: int = 30, volume_budget: float = 0.5, scale: int = 1) -> ProblemSpec:
    """Half MBB beam: symmetry on the left edge, roller at bottom right, load top left."""
    nx, ny = nx * scale, ny * scale
    active = np.ones((ny, nx), dtype=bool)
    left = np.arange(ny + 1) * (nx + 1)
    fix = [Fixation(left, True, False), Fixation([nx], False, True)]
    case = LoadCase([ny * (nx + 1)], [[0.0, -1.0]])
    return ProblemSpec((nx, ny), active, fix, [case], coarsening=scale, volume_budget=volume_budget, name="mbb")


def cantilever(nx: int = 60, ny: int = 30, volume_budget: float = 0.5, scale: int = 1) -> ProblemSpec:
    nx, ny = nx * scale, ny * scale
    active = np.ones((ny, nx), dtype=bool)
    left = np.arange(ny + 1) * (nx + 1)
    fix = [Fixation(left)]
    mid = (ny // 2) * (nx + 1) + nx
    case = LoadCase([mid], [[0.0, -1.0]])
    return ProblemSpec((nx, ny), active, fix, [case], coarsening=scale, volume_budget=volume_budget, name="cantilever")


BUILTIN = {
    "femur": femur,
    "triangle": triangle,
    "beam": beam,
    "mbb": mbb,
    "cantilever": cantilever,
}


def builtin(name: str, **kw) -> ProblemSpec:
    try:
        factory = BUILTIN[name]
    except KeyError:
        raise ValueError(f"unknown builtin problem {name!r}; choose from {sorted(BUILTIN)}") from None
    return factory(**kw)


# lattice counts used for the built-in examples; other problems default to
# one lattice per fifteen simulation cells
LATTICE_COUNTS = {"femur": 684, "triangle": 1065, "beam": 699}


def default_lattice_count(problem: ProblemSpec) -> int:
    if problem.name in LATTICE_COUNTS:
        return LATTICE_COUNTS[problem.name]
    return max(4, int(round(problem.n_active / problem.coarsening**2 / 15)))
