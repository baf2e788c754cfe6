# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled Gauss-Seidel sweeps for the field-aligned meshing.

Operation-for-operation twin of ``_kernels_py``.
"""

from libc.math cimport cos, sin, floor, sqrt, fabs, M_PI

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double SIXTH = M_PI / 3.0
cdef double[4] CU = [0.0, 1.0, 0.0, 1.0]
cdef double[4] CV = [0.0, 0.0, 1.0, 1.0]


cdef inline double rosy_wrap(double d) nogil:
    return d - SIXTH * floor(d / SIXTH + 0.5)


cdef inline void _basis(double phi, double h, double* b) nogil:
    b[0] = h * cos(phi)
    b[1] = h * sin(phi)
    b[2] = h * cos(phi + SIXTH)
    b[3] = h * sin(phi + SIXTH)


cdef inline void _floor(double ox, double oy, double* b, double px, double py, double* out) nogil:
    cdef double det = b[0] * b[3] - b[1] * b[2]
    cdef double dx = px - ox
    cdef double dy = py - oy
    cdef double a = floor((dx * b[3] - dy * b[2]) / det)
    cdef double c = floor((b[0] * dy - b[1] * dx) / det)
    out[0] = ox + a * b[0] + c * b[2]
    out[1] = oy + a * b[1] + c * b[3]


cdef inline void _round(double ox, double oy, double phi, double h, double px, double py, double* out) nogil:
    cdef double b[4]
    cdef double f[2]
    cdef double best = -1.0, cx, cy, d
    cdef int k
    _basis(phi, h, b)
    _floor(ox, oy, b, px, py, f)
    for k in range(4):
        cx = f[0] + CU[k] * b[0] + CV[k] * b[2]
        cy = f[1] + CU[k] * b[1] + CV[k] * b[3]
        d = (cx - px) * (cx - px) + (cy - py) * (cy - py)
        if best < 0.0 or d < best:
            best = d
            out[0] = cx
            out[1] = cy


cdef inline void _compat(double xi, double yi, double oix, double oiy, double phii,
                         double xj, double yj, double ojx, double ojy, double phij,
                         double h, double* out) nogil:
    cdef double mx = 0.5 * (xi + xj)
    cdef double my = 0.5 * (yi + yj)
    cdef double bi[4]
    cdef double bj[4]
    cdef double fi[2]
    cdef double fj[2]
    cdef double best = -1.0, ax, ay, cx, cy, d
    cdef int k, l
    _basis(phii, h, bi)
    _basis(phij, h, bj)
    _floor(oix, oiy, bi, mx, my, fi)
    _floor(ojx, ojy, bj, mx, my, fj)
    for k in range(4):
        ax = fi[0] + CU[k] * bi[0] + CV[k] * bi[2]
        ay = fi[1] + CU[k] * bi[1] + CV[k] * bi[3]
        for l in range(4):
            cx = fj[0] + CU[l] * bj[0] + CV[l] * bj[2]
            cy = fj[1] + CU[l] * bj[1] + CV[l] * bj[3]
            d = (ax - cx) * (ax - cx) + (ay - cy) * (ay - cy)
            if best < 0.0 or d < best:
                best = d
                out[0] = ax
                out[1] = ay
                out[2] = cx
                out[3] = cy


def position_round(double ox, double oy, double phi, double h, double px, double py):
    cdef double out[2]
    _round(ox, oy, phi, h, px, py, out)
    return out[0], out[1]


def compat_position(double xi, double yi, double oix, double oiy, double phii,
                    double xj, double yj, double ojx, double ojy, double phij, double h):
    cdef double out[4]
    _compat(xi, yi, oix, oiy, phii, xj, yj, ojx, ojy, phij, h, out)
    return out[0], out[1], out[2], out[3]


def position_sweeps(const double[:, ::1] x, const double[::1] phi, double[:, ::1] o,
                    const cnp.int64_t[::1] adj_ptr, const cnp.int64_t[::1] adj_idx,
                    double h, int iters):
    cdef Py_ssize_t n = phi.shape[0], i, k, j
    cdef int it
    cdef double change = 0.0, sx, sy, wsum, d, dx, dy
    cdef double c[4]
    cdef double r[2]
    with nogil:
        for it in range(iters):
            change = 0.0
            for i in range(n):
                if adj_ptr[i] == adj_ptr[i + 1]:
                    continue
                sx = o[i, 0]
                sy = o[i, 1]
                wsum = 0.0
                for k in range(adj_ptr[i], adj_ptr[i + 1]):
                    j = adj_idx[k]
                    _compat(x[i, 0], x[i, 1], sx, sy, phi[i], x[j, 0], x[j, 1], o[j, 0], o[j, 1], phi[j], h, c)
                    sx = (c[0] * wsum + c[2]) / (wsum + 1.0)
                    sy = (c[1] * wsum + c[3]) / (wsum + 1.0)
                    wsum += 1.0
                _round(sx, sy, phi[i], h, x[i, 0], x[i, 1], r)
                dx = r[0] - o[i, 0]
                dy = r[1] - o[i, 1]
                d = sqrt(dx * dx + dy * dy)
                if d > change:
                    change = d
                o[i, 0] = r[0]
                o[i, 1] = r[1]
    return change


cdef inline double _local_deviation(Py_ssize_t i, double value, double[::1] phi,
                                    const cnp.int64_t[::1] adj_ptr, const cnp.int64_t[::1] adj_idx) nogil:
    cdef double e = 0.0
    cdef Py_ssize_t k
    for k in range(adj_ptr[i], adj_ptr[i + 1]):
        e += fabs(rosy_wrap(value - phi[adj_idx[k]]))
    return e


def rosy_sweeps(double[::1] phi, const double[::1] phi0,
                const cnp.int64_t[::1] adj_ptr, const cnp.int64_t[::1] adj_idx,
                double trust, int iters):
    cdef Py_ssize_t n = phi.shape[0], i, k
    cdef int it, accepted = 0
    cdef double s, wsum, pj, d, cand, before, after
    with nogil:
        for it in range(iters):
            accepted = 0
            for i in range(n):
                if adj_ptr[i] == adj_ptr[i + 1]:
                    continue
                s = phi[i]
                wsum = 1.0
                for k in range(adj_ptr[i], adj_ptr[i + 1]):
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
                cand = cand - SIXTH * floor(cand / SIXTH)
                if cand >= SIXTH:
                    cand = 0.0
                before = _local_deviation(i, phi[i], phi, adj_ptr, adj_idx)
                after = _local_deviation(i, cand, phi, adj_ptr, adj_idx)
                if after <= before and cand != phi[i]:
                    phi[i] = cand
                    accepted += 1
    return accepted
