"""Field-aligned triangulation of an optimized orientation field.

The layer tangents of an equilateral rank-3 laminate form a 6-RoSy field,
stored per cell as a representative angle in ``[0, pi/3)``.  A position
field (one lattice-snapped point per sample) is relaxed by Gauss-Seidel
sweeps over a coarse-to-fine hierarchy; coinciding positions are collapsed
into vertices and triangulated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import shapely
import shapely.affinity
from scipy.spatial import Delaunay, cKDTree
from shapely.geometry import Polygon

from . import kernels
from .rank3 import LAYER_OFFSETS

log = logging.getLogger(__name__)

SIXTH = np.pi / 3
TRUST_REGION = np.pi / 12


class MeshingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# orientation field


def rosy_representative(theta3) -> np.ndarray:
    """Representative of the 6-RoSy tangent set, ``(theta3 + pi/2) mod pi/3``."""
    r = np.mod(np.asarray(theta3, dtype=float) + np.pi / 2, SIXTH)
    return np.where(r >= SIXTH, 0.0, r)


def rosy_deviation(a, b) -> np.ndarray:
    """Smallest angle between two 6-RoSy direction sets, in ``[0, pi/6]``."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return np.abs(d - SIXTH * np.floor(d / SIXTH + 0.5))


def grid_adjacency(index: np.ndarray):
    """CSR adjacency (4-neighbourhood) of the non-negative entries of an index image."""
    n = int(index.max()) + 1 if index.size and index.max() >= 0 else 0
    pairs = []
    for a, b in ((index[:, :-1], index[:, 1:]), (index[:-1, :], index[1:, :])):
        ok = (a >= 0) & (b >= 0)
        pairs.append(np.stack([a[ok], b[ok]], axis=1))
    e = np.concatenate(pairs) if pairs else np.zeros((0, 2), dtype=np.int64)
    both = np.concatenate([e, e[:, ::-1]])
    order = np.lexsort((both[:, 1], both[:, 0]))
    both = both[order]
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, both[:, 0] + 1, 1)
    return np.cumsum(ptr), np.ascontiguousarray(both[:, 1], dtype=np.int64), e


def _active_index(active: np.ndarray) -> np.ndarray:
    idx = -np.ones(active.shape, dtype=np.int64)
    idx[active] = np.arange(int(active.sum()))
    return idx


@dataclass
class RoSyField:
    shape: tuple[int, int]
    active: np.ndarray
    rep: np.ndarray
    theta3: np.ndarray
    cell_size: float = 1.0

    def tangents(self) -> np.ndarray:
        """The three layer tangent angles per cell, in ``[0, pi)``."""
        return np.mod(self.theta3[:, None] + LAYER_OFFSETS + np.pi / 2, np.pi)

    def edges(self) -> np.ndarray:
        return grid_adjacency(_active_index(self.active))[2]

    def total_deviation(self) -> float:
        e = self.edges()
        return float(rosy_deviation(self.rep[e[:, 0]], self.rep[e[:, 1]]).sum())


def build_rosy(design, smoothing_iters: int = 0, trust: float = TRUST_REGION) -> RoSyField:
    """6-RoSy field of a design, optionally smoothed within a trust region."""
    rep = rosy_representative(design.theta3)
    field_ = RoSyField(design.shape, design.active.copy(), rep.copy(), np.array(design.theta3, dtype=float), design.cell_size)
    if smoothing_iters > 0:
        ptr, idx, _ = grid_adjacency(_active_index(design.active))
        phi = np.array(rep, dtype=np.float64)  # a copy: rep stays the trust-region centre
        for sweep in range(smoothing_iters):
            before = field_.total_deviation()
            moved = kernels.rosy_sweeps(phi, rep, ptr, idx, trust, 1)
            field_.rep = phi.copy()
            after = field_.total_deviation()
            if after > before + 1e-9 * max(1.0, before):
                raise AssertionError(f"RoSy smoothing increased the deviation in sweep {sweep}")
            if moved == 0:
                break
    return field_


# --------------------------------------------------------------------------
# position field


def edge_length_for_count(area: float, count: int) -> float:
    """Edge length of ``count`` equilateral triangles tiling ``area``."""
    if count <= 0 or area <= 0:
        raise ValueError("need a positive area and lattice count")
    return math.sqrt(4.0 * area / (math.sqrt(3.0) * count))


def lattice_round(o, phi, h, p) -> np.ndarray:
    """Vectorized nearest lattice translate of ``o`` to ``p``."""
    o, p = np.atleast_2d(o), np.atleast_2d(p)
    phi = np.asarray(phi, dtype=float)
    e1 = h * np.stack([np.cos(phi), np.sin(phi)], axis=-1)
    e2 = h * np.stack([np.cos(phi + SIXTH), np.sin(phi + SIXTH)], axis=-1)
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    d = p - o
    a = np.floor((d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det)
    c = np.floor((e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det)
    base = o + a[:, None] * e1 + c[:, None] * e2
    cands = np.stack([base, base + e1, base + e2, base + e1 + e2], axis=1)
    k = np.argmin(((cands - p[:, None]) ** 2).sum(-1), axis=1)
    return cands[np.arange(len(o)), k]


@dataclass
class Level:
    x: np.ndarray
    phi: np.ndarray
    adj_ptr: np.ndarray
    adj_idx: np.ndarray
    grid_index: np.ndarray  # (gy, gx) image of sample ids
    parent: np.ndarray | None = None  # sample -> sample of the next coarser level


@dataclass
class PositionField:
    x: np.ndarray
    phi: np.ndarray
    o: np.ndarray
    h: float
    adj_ptr: np.ndarray
    adj_idx: np.ndarray
    edges: np.ndarray
    cell: np.ndarray
    seed: int = 0
    residual: float = 0.0


def _samples(rosy: RoSyField, h: float):
    nx, ny = rosy.shape
    cs = rosy.cell_size
    k = max(1, int(math.ceil(4.0 * cs / h)))
    cell_idx = _active_index(rosy.active)
    fine = np.kron(cell_idx, np.ones((k, k), dtype=np.int64))
    # keep the parent cell for each sub-sample
    index = -np.ones(fine.shape, dtype=np.int64)
    mask = fine >= 0
    index[mask] = np.arange(int(mask.sum()))
    gy, gx = np.nonzero(mask)
    x = np.stack([(gx + 0.5) * cs / k, (gy + 0.5) * cs / k], axis=1)
    cell = fine[mask]
    return x, rosy.rep[cell], cell, index


def _coarsen(level: Level) -> Level:
    gy, gx = np.nonzero(level.grid_index >= 0)
    ids = level.grid_index[gy, gx]
    shape = ((level.grid_index.shape[0] + 1) // 2, (level.grid_index.shape[1] + 1) // 2)
    key = (gy // 2) * shape[1] + gx // 2
    uniq, parent_of = np.unique(key, return_inverse=True)
    parent = np.empty(len(level.x), dtype=np.int64)
    parent[ids] = parent_of
    m = len(uniq)
    cnt = np.bincount(parent, minlength=m).astype(float)
    x = np.stack([np.bincount(parent, level.x[:, k], m) for k in range(2)], axis=1) / cnt[:, None]
    z = np.bincount(parent, np.cos(6 * level.phi), m) + 1j * np.bincount(parent, np.sin(6 * level.phi), m)
    phi = np.where(np.abs(z) > 1e-12, np.angle(z) / 6.0, 0.0)
    phi = rosy_representative(phi - np.pi / 2)
    index = -np.ones(shape, dtype=np.int64)
    index.ravel()[uniq] = np.arange(m)
    ptr, idx, _ = grid_adjacency(index)
    level.parent = parent
    return Level(x, phi, ptr, idx, index)


def optimize_positions(
    rosy: RoSyField,
    h: float,
    iters: int = 30,
    seed: int = 0,
    min_samples: int = 4,
) -> PositionField:
    """Relax a lattice-snapped position field over a sample hierarchy.

    ``iters`` Gauss-Seidel sweeps run on every level; the coarsest level is
    initialized randomly from ``seed``.
    """
    if not np.any(rosy.active):
        raise MeshingError("empty domain")
    x, phi, cell, index = _samples(rosy, h)
    ptr, idx, edges = grid_adjacency(index)
    levels = [Level(x, np.ascontiguousarray(phi), ptr, idx, index)]
    while len(levels[-1].x) > min_samples and len(levels) < 24:
        levels.append(_coarsen(levels[-1]))
    rng = np.random.default_rng(seed)
    top = levels[-1]
    uv = rng.random((len(top.x), 2))
    e1 = np.stack([np.cos(top.phi), np.sin(top.phi)], axis=1)
    e2 = np.stack([np.cos(top.phi + SIXTH), np.sin(top.phi + SIXTH)], axis=1)
    o = top.x + h * (uv[:, :1] * e1 + uv[:, 1:] * e2)
    o = lattice_round(o, top.phi, h, top.x)
    residual = 0.0
    for li in range(len(levels) - 1, -1, -1):
        lv = levels[li]
        if li < len(levels) - 1:
            o = lattice_round(o[lv.parent], lv.phi, h, lv.x)
        o = np.ascontiguousarray(o, dtype=np.float64)
        residual = kernels.position_sweeps(
            np.ascontiguousarray(lv.x), np.ascontiguousarray(lv.phi), o, lv.adj_ptr, lv.adj_idx, float(h), int(iters)
        )
        log.debug("level %d: %d samples, last sweep change %.3g", li, len(lv.x), residual)
    return PositionField(x, phi, o, h, ptr, idx, edges, cell, seed, residual)


# --------------------------------------------------------------------------
# domain geometry


def domain_polygon(mask: np.ndarray, cell_size: float = 1.0, simplify: float | None = 1.5):
    """Polygonal outline (with holes) of a cell mask, in length units.

    The outline follows the cell edges exactly; ``simplify`` (in cells)
    then removes the pixel staircase of slanted edges.
    """
    mask = np.asarray(mask, dtype=bool)
    boxes = []
    for j, row in enumerate(mask):
        d = np.diff(np.r_[0, row.astype(np.int8), 0])
        boxes.extend(shapely.box(a, j, b, j + 1) for a, b in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))
    if not boxes:
        raise MeshingError("empty domain")
    geom = shapely.union_all(boxes)
    geom = shapely.affinity.scale(geom, cell_size, cell_size, origin=(0.0, 0.0))
    # drops the collinear vertices left by the row boxes
    return geom.simplify(simplify * cell_size if simplify else 0.0, preserve_topology=True)


def _boundary_rings(geom):
    polys = getattr(geom, "geoms", [geom])
    rings = []
    for p in polys:
        rings.append(p.exterior)
        rings.extend(p.interiors)
    return rings


def _ring_corners(ring, min_turn: float = np.deg2rad(30.0)) -> np.ndarray:
    pts = np.asarray(ring.coords)[:-1]
    if len(pts) < 3:
        return pts
    a = pts - np.roll(pts, 1, axis=0)
    b = np.roll(pts, -1, axis=0) - pts
    turn = np.abs(np.arctan2(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], (a * b).sum(1)))
    return pts[turn >= min_turn]


def _conform_to_boundary(verts: np.ndarray, geom, h: float, snap: float = 0.5, gap: float = 1.5):
    """Project near-boundary vertices onto the outline and fill boundary gaps.

    Returns the new vertex array and a flag per vertex marking boundary ones.
    """
    dist = shapely.distance(geom.boundary, shapely.points(verts))
    inside = shapely.contains_xy(geom, verts[:, 0], verts[:, 1])
    keep = inside | (dist <= snap * h)
    near = keep & (dist <= snap * h)
    interior = verts[keep & ~near]
    bnd_pts = []
    for ring in _boundary_rings(geom):
        length = ring.length
        if length <= 0:
            continue
        cand = verts[near]
        d_ring = shapely.distance(ring, shapely.points(cand)) if len(cand) else np.zeros(0)
        own = cand[d_ring <= snap * h + 1e-12] if len(cand) else cand
        s = [ring.project(shapely.Point(p)) for p in own]
        s += [ring.project(shapely.Point(p)) for p in _ring_corners(ring)]
        corner_s = set(np.round(s[len(own):], 12).tolist())
        s = np.sort(np.asarray(s, dtype=float)) if s else np.zeros(0)
        # merge points closer than snap*h, preferring corners
        merged = []
        for v in s:
            if merged and v - merged[-1] < snap * h:
                if round(v, 12) in corner_s and round(merged[-1], 12) not in corner_s:
                    merged[-1] = v
                continue
            merged.append(v)
        if len(merged) > 1 and merged[0] + length - merged[-1] < snap * h:
            merged.pop()
        if not merged:
            merged = [0.0]
        # fill long gaps with evenly spaced points
        filled = []
        for k, v in enumerate(merged):
            filled.append(v)
            nxt = merged[k + 1] if k + 1 < len(merged) else merged[0] + length
            span = nxt - v
            if span > gap * h:
                m = int(math.ceil(span / h))
                filled.extend(v + span * np.arange(1, m) / m)
        pts = np.array([ring.interpolate(v % length).coords[0] for v in filled])
        bnd_pts.append(pts)
    bnd = np.concatenate(bnd_pts) if bnd_pts else np.zeros((0, 2))
    if len(interior) and len(bnd):
        d, _ = cKDTree(bnd).query(interior)
        interior = interior[d >= snap * h]
    out = np.concatenate([interior, bnd])
    flags = np.concatenate([np.zeros(len(interior), bool), np.ones(len(bnd), bool)])
    return out, flags


# --------------------------------------------------------------------------
# mesh


@dataclass
class FieldAlignedMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    h: float
    boundary: np.ndarray
    edge_class: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 2)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.boundary = np.asarray(self.boundary, dtype=bool)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(v0 < v1)``, sorted."""
        return unique_edges(self.triangles)

    def triangle_edges(self) -> np.ndarray:
        """Edge index of each triangle side; side ``k`` joins corners ``k`` and ``k+1``."""
        e = self.edges
        t = self.triangles
        sides = np.stack([t, np.roll(t, -1, axis=1)], axis=2)
        lo, hi = sides.min(axis=2), sides.max(axis=2)
        key = e[:, 0] * len(self.vertices) + e[:, 1]
        return np.searchsorted(key, lo * len(self.vertices) + hi)

    def edge_triangles(self) -> np.ndarray:
        """``(E, 2)`` triangles on both sides of each edge, -1 on the boundary."""
        te = self.triangle_edges()
        out = -np.ones((len(self.edges), 2), dtype=np.int64)
        for k in range(3):
            for t, e in enumerate(te[:, k]):
                out[e, 0 if out[e, 0] < 0 else 1] = t
        return out

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))

    def angles(self) -> np.ndarray:
        """Interior angles (T, 3) in degrees; angle ``k`` sits at corner ``k``."""
        p = self.vertices[self.triangles]
        out = np.empty(self.triangles.shape)
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
            out[:, k] = np.degrees(np.arctan2(np.abs(cross), (a * b).sum(1)))
        return out

    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return len(used) - len(self.edges) + len(self.triangles)

    def quality(self, min_angle: float = 40.0) -> float:
        return float(np.mean(self.angles().min(axis=1) >= min_angle)) if self.n_triangles else 0.0


def unique_edges(triangles: np.ndarray) -> np.ndarray:
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def nonmanifold_vertices(triangles: np.ndarray) -> list[int]:
    """Vertices whose incident triangles do not form one edge-connected fan."""
    t = np.asarray(triangles)
    bad = []
    if len(t) == 0:
        return bad
    order = np.argsort(t.ravel(), kind="stable")
    verts = t.ravel()[order]
    starts = np.flatnonzero(np.r_[True, verts[1:] != verts[:-1]])
    ends = np.r_[starts[1:], len(verts)]
    for a, b in zip(starts, ends):
        if b - a < 2:
            continue
        v = verts[a]
        tris = order[a:b] // 3
        others = [set(t[i].tolist()) - {v} for i in tris]
        seen, stack = {0}, [0]
        while stack:
            i = stack.pop()
            for j in range(len(tris)):
                if j not in seen and others[i] & others[j]:
                    seen.add(j)
                    stack.append(j)
        if len(seen) != len(tris):
            bad.append(int(v))
    return bad


def check_manifold(triangles: np.ndarray, n_vertices: int) -> list[str]:
    """Problems that make a triangle set non-manifold (empty if fine)."""
    problems = []
    t = np.asarray(triangles)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e.sort(axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    if np.any(counts > 2):
        problems.append(f"{int((counts > 2).sum())} edges shared by more than two triangles")
    problems.extend(f"vertex {v} joins disconnected fans" for v in nonmanifold_vertices(t))
    return problems


def _star(tri: np.ndarray, pts: np.ndarray, v: int):
    """Triangles around ``v`` in counter-clockwise order, their angles at ``v``
    and whether the star is closed (``v`` is not on the hull)."""
    inc = np.flatnonzero((tri == v).any(axis=1))
    nxt = {}
    angle = {}
    for i in inc:
        k = int(np.flatnonzero(tri[i] == v)[0])
        a, b = tri[i, (k + 1) % 3], tri[i, (k + 2) % 3]
        nxt[int(a)] = (int(i), int(b))
        da, db = pts[a] - pts[v], pts[b] - pts[v]
        angle[int(i)] = math.atan2(da[0] * db[1] - da[1] * db[0], float(da @ db))
    ends = {b for _, b in nxt.values()}
    heads = [a for a in nxt if a not in ends]
    start = heads[0] if heads else next(iter(nxt))
    seq, cur = [], start
    while cur in nxt and len(seq) < len(nxt):
        i, cur = nxt[cur]
        seq.append(i)
    return seq, [angle[i] for i in seq], not heads


def _close_fans(tri: np.ndarray, keep: np.ndarray, pts: np.ndarray, rounds: int = 10) -> np.ndarray:
    """Re-admit dropped triangles so that every vertex star is a single fan.

    Around a vertex with several fans, the dropped run spanning the widest
    angle (the exterior) stays open and the other gaps are filled.
    """
    keep = keep.copy()
    for _ in range(rounds):
        bad = nonmanifold_vertices(tri[keep])
        if not bad:
            break
        for v in bad:
            seq, ang, closed = _star(tri, pts, v)
            # runs of dropped triangles, with the hull gap as an extra run
            runs, cur = [], []
            for i, a in zip(seq, ang):
                if keep[i]:
                    if cur:
                        runs.append(cur)
                    cur = []
                else:
                    cur.append((i, a))
            if cur:
                runs.append(cur)
            spans = [sum(a for _, a in r) for r in runs]
            if not closed:
                gap = 2 * math.pi - sum(ang)
                head = runs and not keep[seq[0]]
                tail = runs and not keep[seq[-1]]
                if head and tail and len(runs) > 1:
                    spans[0] += spans[-1] + gap
                    runs[0] = runs[0] + runs.pop()
                    spans.pop()
                elif head:
                    spans[0] += gap
                elif tail:
                    spans[-1] += gap
                else:
                    runs.append([])
                    spans.append(gap)
            if len(runs) < 2:
                continue
            widest = int(np.argmax(spans))
            for r, run in enumerate(runs):
                if r != widest:
                    keep[[i for i, _ in run]] = True
    return keep


def _union_find(n: int, pairs: np.ndarray) -> np.ndarray:
    import scipy.sparse as sp
    from scipy.sparse.csgraph import connected_components

    g = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else sp.coo_matrix((n, n))
    return connected_components(g, directed=False)[1]


def _pair_compat(pos: PositionField, e: np.ndarray):
    """Vectorized compatible lattice translates for sample pairs."""
    h = pos.h
    x, o, phi = pos.x, pos.o, pos.phi
    mid = 0.5 * (x[e[:, 0]] + x[e[:, 1]])

    def corners(i):
        ph = phi[i]
        e1 = h * np.stack([np.cos(ph), np.sin(ph)], axis=-1)
        e2 = h * np.stack([np.cos(ph + SIXTH), np.sin(ph + SIXTH)], axis=-1)
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        d = mid - o[i]
        a = np.floor((d[:, 0] * e2[:, 1] - d[:, 1] * e2[:, 0]) / det)
        c = np.floor((e1[:, 0] * d[:, 1] - e1[:, 1] * d[:, 0]) / det)
        base = o[i] + a[:, None] * e1 + c[:, None] * e2
        return np.stack([base, base + e1, base + e2, base + e1 + e2], axis=1)

    ci, cj = corners(e[:, 0]), corners(e[:, 1])
    d = ((ci[:, :, None, :] - cj[:, None, :, :]) ** 2).sum(-1).reshape(len(e), 16)
    k = np.argmin(d, axis=1)
    return np.sqrt(d[np.arange(len(e)), k])


def edge_classes(vertices, edges, rosy: RoSyField) -> np.ndarray:
    """Tangent family (0, 1, 2 for layers 1..3) closest to each edge direction."""
    if len(edges) == 0:
        return np.zeros(0, dtype=np.int64)
    nx, _ = rosy.shape
    cells = np.flatnonzero(rosy.active.ravel())
    centers = np.stack([cells % nx + 0.5, cells // nx + 0.5], axis=1) * rosy.cell_size
    mid = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
    _, k = cKDTree(centers).query(mid)
    d = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    ang = np.arctan2(d[:, 1], d[:, 0])
    tang = rosy.tangents()[k]
    dev = np.abs(np.mod(ang[:, None] - tang + np.pi / 2, np.pi) - np.pi / 2)
    return np.argmin(dev, axis=1)


def extract_mesh(
    pos: PositionField,
    rosy: RoSyField,
    domain=None,
    tol: float = 0.3,
    boundary: str = "project",
    snap: float = 0.5,
    dump_path: str | None = None,
) -> FieldAlignedMesh:
    """Collapse the position field into vertices and triangulate them.

    Samples whose positions agree within ``tol*h`` become one vertex.  With
    ``boundary="project"`` vertices near the outline of ``domain`` are moved
    onto it and boundary gaps are filled; ``"none"`` keeps only triangles
    whose corners all come from the position field and lie in the domain.
    """
    h = pos.h
    if domain is None:
        domain = domain_polygon(rosy.active, rosy.cell_size)
    e = pos.edges
    dist = np.linalg.norm(pos.o[e[:, 1]] - pos.o[e[:, 0]], axis=1)
    mismatch = _pair_compat(pos, e) if len(e) else np.zeros(0)
    consistent = mismatch <= tol * h
    same = e[consistent & (dist <= tol * h)]
    label = _union_find(len(pos.o), same)
    n_lab = label.max() + 1
    cnt = np.bincount(label, minlength=n_lab).astype(float)
    verts = np.stack([np.bincount(label, pos.o[:, k], n_lab) for k in range(2)], axis=1) / cnt[:, None]
    # merge clusters whose centres still coincide
    pairs = np.array(sorted(cKDTree(verts).query_pairs(tol * h)), dtype=np.int64).reshape(-1, 2)
    lab2 = _union_find(len(verts), pairs)
    m = lab2.max() + 1
    w = np.bincount(lab2, cnt, m)
    verts = np.stack([np.bincount(lab2, verts[:, k] * cnt, m) for k in range(2)], axis=1) / w[:, None]
    label = lab2[label]
    # lattice graph: consistent neighbouring samples one step apart
    step = e[consistent & (np.abs(dist - h) <= tol * h)]
    g = np.sort(label[step], axis=1)
    g = np.unique(g[g[:, 0] != g[:, 1]], axis=0)

    if boundary == "project":
        pts, is_bnd = _conform_to_boundary(verts, domain, h, snap=snap)
    elif boundary == "none":
        inside = shapely.contains_xy(domain, verts[:, 0], verts[:, 1])
        pts, is_bnd = verts[inside], np.zeros(int(inside.sum()), dtype=bool)
    else:
        raise ValueError(f"unknown boundary mode {boundary!r}")
    if len(pts) < 3:
        raise MeshingError("too few vertices for a triangulation; decrease the edge length")
    tri = Delaunay(pts).simplices
    p = pts[tri]
    area = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    tri = np.where(area[:, None] < 0, tri[:, [0, 2, 1]], tri)
    cen = p.mean(axis=1)
    keep = shapely.contains_xy(domain, cen[:, 0], cen[:, 1]) & (np.abs(area) > 1e-9 * h * h)
    if boundary == "none":
        # only triangles of lattice-sized edges
        el = np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)
        keep &= np.all(np.abs(el - h) <= tol * h, axis=1)
    else:
        keep = _close_fans(tri, keep, pts) & (np.abs(area) > 1e-9 * h * h)
    tri = tri[keep]
    used = np.unique(tri)
    remap = -np.ones(len(pts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    mesh = FieldAlignedMesh(pts[used], remap[tri], h, is_bnd[used])
    problems = check_manifold(mesh.triangles, len(mesh.vertices))
    if problems:
        if dump_path:
            from .io import save_mesh

            save_mesh(dump_path, mesh)
        raise MeshingError("non-manifold mesh: " + "; ".join(problems[:5]) + (f" (dumped to {dump_path})" if dump_path else ""))
    mesh.edge_class = edge_classes(mesh.vertices, mesh.edges, rosy)
    # share of mesh edges that are lattice-graph edges
    vmap = -np.ones(len(pts), dtype=np.int64)
    vmap[used] = np.arange(len(used))
    if boundary == "project":
        # graph vertices are the position clusters; match by coordinates
        tree = cKDTree(mesh.vertices)
        d, nearest = tree.query(verts)
        gv = np.where(d <= 1e-9 * h, nearest, -1)
    else:
        inside = shapely.contains_xy(domain, verts[:, 0], verts[:, 1])
        gv = -np.ones(len(verts), dtype=np.int64)
        gv[inside] = vmap[np.arange(int(inside.sum()))]
    ge = gv[g] if len(g) else np.zeros((0, 2), dtype=np.int64)
    ge = np.sort(ge[(ge >= 0).all(axis=1)], axis=1)
    me = mesh.edges
    key = set(map(tuple, ge.tolist()))
    frac = float(np.mean([tuple(x) in key for x in me.tolist()])) if len(me) else 0.0
    mesh.stats = {
        "n_samples": int(len(pos.o)),
        "n_clusters": int(len(verts)),
        "lattice_edge_fraction": frac,
        "min_angle_40_fraction": mesh.quality(),
        "n_triangles": mesh.n_triangles,
    }
    return mesh


def triangulate(
    design,
    domain=None,
    target_lattices: int | None = None,
    edge_length: float | None = None,
    smooth_iters: int = 0,
    iters: int = 30,
    seed: int = 0,
    tol: float = 0.3,
    boundary: str = "project",
) -> FieldAlignedMesh:
    """Field-aligned mesh of ``design`` with a target count or edge length."""
    rosy = build_rosy(design, smooth_iters)
    if domain is None:
        domain = domain_polygon(design.active, design.cell_size)
    if edge_length is None:
        if target_lattices is None:
            raise ValueError("give either target_lattices or edge_length")
        edge_length = edge_length_for_count(domain.area, target_lattices)
    pos = optimize_positions(rosy, edge_length, iters=iters, seed=seed)
    mesh = extract_mesh(pos, rosy, domain, tol=tol, boundary=boundary)
    mesh.stats.update(target=target_lattices, seed=seed)
    log.info("mesh: %d triangles (target %s), h = %.4g", mesh.n_triangles, target_lattices, edge_length)
    return mesh
