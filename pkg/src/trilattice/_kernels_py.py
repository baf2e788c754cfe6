"""Pure-Python Gauss-Seidel sweeps for the field-aligned meshing.

This module mirrors ``_kernels.pyx`` operation by operation so that both
produce the same floating-point results.  The triangular lattice at a sample
with representative angle ``phi`` is spanned by ``h * (cos phi, sin phi)`` and
``h * (cos(phi + pi/3), sin(phi + pi/3))``; it is invariant under rotations by
``pi/3``, so positions need no orientation matching.
"""

from __future__ import annotations

import math

import numpy as np

SIXTH = math.pi / 3.0
_CORNERS = ((0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0))


def rosy_wrap(d: float) -> float:
    """Reduce an angle difference to ``[-pi/6, pi/6)``."""
    return d - SIXTH * math.floor(d / SIXTH + 0.5)


def _basis(phi, h):
    return (h * math.cos(phi), h * math.sin(phi), h * math.cos(phi + SIXTH), h * math.sin(phi + SIXTH))


def _floor(ox, oy, b, px, py):
    e1x, e1y, e2x, e2y = b
    det = e1x * e2y - e1y * e2x
    dx, dy = px - ox, py - oy
    a = math.floor((dx * e2y - dy * e2x) / det)
    c = math.floor((e1x * dy - e1y * dx) / det)
    return ox + a * e1x + c * e2x, oy + a * e1y + c * e2y


def position_round(ox, oy, phi, h, px, py):
    """Lattice translate of ``(ox, oy)`` nearest to ``(px, py)``."""
    b = _basis(phi, h)
    fx, fy = _floor(ox, oy, b, px, py)
    best = -1.0
    rx = ry = 0.0
    for u, v in _CORNERS:
        cx = fx + u * b[0] + v * b[2]
        cy = fy + u * b[1] + v * b[3]
        d = (cx - px) * (cx - px) + (cy - py) * (cy - py)
        if best < 0.0 or d < best:
            best, rx, ry = d, cx, cy
    return rx, ry


def compat_position(xi, yi, oix, oiy, phii, xj, yj, ojx, ojy, phij, h):
    """Closest pair of lattice translates of two positions near their midpoint."""
    mx, my = 0.5 * (xi + xj), 0.5 * (yi + yj)
    bi = _basis(phii, h)
    bj = _basis(phij, h)
    fix, fiy = _floor(oix, oiy, bi, mx, my)
    fjx, fjy = _floor(ojx, ojy, bj, mx, my)
    best = -1.0
    out = (0.0, 0.0, 0.0, 0.0)
    for u, v in _CORNERS:
        ax = fix + u * bi[0] + v * bi[2]
        ay = fiy + u * bi[1] + v * bi[3]
        for s, t in _CORNERS:
            cx = fjx + s * bj[0] + t * bj[2]
            cy = fjy + s * bj[1] + t * bj[3]
            d = (ax - cx) * (ax - cx) + (ay - cy) * (ay - cy)
            if best < 0.0 or d < best:
                best = d
                out = (ax, ay, cx, cy)
    return out


def position_sweeps(x, phi, o, adj_ptr, adj_idx, h: float, iters: int) -> float:
    """Run ``iters`` Gauss-Seidel sweeps in index order; ``o`` is updated in place.

    Returns the largest position change of the last sweep.
    """
    n = len(phi)
    xs, ph_, os_ = x.tolist(), phi.tolist(), o.tolist()
    ptr, idx = adj_ptr.tolist(), adj_idx.tolist()
    change = 0.0
    for _ in range(iters):
        change = 0.0
        for i in range(n):
            lo, hi = ptr[i], ptr[i + 1]
            if lo == hi:
                continue
            xi, yi = xs[i]
            ph = ph_[i]
            sx, sy = os_[i]
            wsum = 0.0
            for k in range(lo, hi):
                j = idx[k]
                ax, ay, bx, by = compat_position(xi, yi, sx, sy, ph, xs[j][0], xs[j][1], os_[j][0], os_[j][1], ph_[j], h)
                sx = (ax * wsum + bx) / (wsum + 1.0)
                sy = (ay * wsum + by) / (wsum + 1.0)
                wsum += 1.0
            nx_, ny_ = position_round(sx, sy, ph, h, xi, yi)
            dx, dy = nx_ - os_[i][0], ny_ - os_[i][1]
            d = math.sqrt(dx * dx + dy * dy)
            if d > change:
                change = d
            os_[i] = [nx_, ny_]
    o[:] = os_
    return change


def _local_deviation(i, value, phi, adj_ptr, adj_idx):
    e = 0.0
    for k in range(adj_ptr[i], adj_ptr[i + 1]):
        e += abs(rosy_wrap(value - phi[adj_idx[k]]))
    return e


def rosy_sweeps(phi, phi0, adj_ptr, adj_idx, trust: float, iters: int) -> int:
    """Gauss-Seidel smoothing of a 6-RoSy angle field, ``phi`` updated in place.

    Each cell moves to the matched average of its neighbours, clipped to
    ``trust`` around ``phi0``; the move is kept only if the local deviation
    sum does not grow, so the total pairwise deviation never increases.
    Returns the number of accepted moves in the last sweep.
    """
    n = len(phi)
    out = phi
    phi, phi0 = phi.tolist(), phi0.tolist()
    adj_ptr, adj_idx = adj_ptr.tolist(), adj_idx.tolist()
    accepted = 0
    for _ in range(iters):
        accepted = 0
        for i in range(n):
            lo, hi = adj_ptr[i], adj_ptr[i + 1]
            if lo == hi:
                continue
            s = phi[i]
            wsum = 1.0
            for k in range(lo, hi):
                pj = phi[adj_idx[k]]
                pj = s + rosy_wrap(pj - s)
                s = (s * wsum + pj) / (wsum + 1.0)
                wsum += 1.0
            d = rosy_wrap(s - phi0[i])
            if d > trust:
                d = trust
            elif d < -trust:
                d = -trust
            cand = phi0[i] + d
            cand = cand - SIXTH * math.floor(cand / SIXTH)
            if cand >= SIXTH:
                cand = 0.0
            before = _local_deviation(i, phi[i], phi, adj_ptr, adj_idx)
            after = _local_deviation(i, cand, phi, adj_ptr, adj_idx)
            if after <= before and cand != phi[i]:
                phi[i] = cand
                accepted += 1
    out[:] = phi
    return accepted


def as_arrays(x, phi, o, adj_ptr, adj_idx):
    return (
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(phi, dtype=np.float64),
        np.ascontiguousarray(o, dtype=np.float64),
        np.ascontiguousarray(adj_ptr, dtype=np.int64),
        np.ascontiguousarray(adj_idx, dtype=np.int64),
    )
