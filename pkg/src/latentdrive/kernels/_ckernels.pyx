# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels used by the simulator renderers.

Box rows are ``(cx, cy, cos, sin, half_length, half_width)``; segment rows are
``(x0, y0, x1, y1)``. Every routine mirrors ``_pykernels`` operation for
operation so both backends produce identical results.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY

cnp.import_array()


def points_in_boxes(const double[:, ::1] points, const double[:, ::1] boxes):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t m = boxes.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] out = np.full(n, -1, dtype=np.int64)
    cdef Py_ssize_t i, j
    cdef double dx, dy, lx, ly
    for i in range(n):
        for j in range(m - 1, -1, -1):
            dx = points[i, 0] - boxes[j, 0]
            dy = points[i, 1] - boxes[j, 1]
            lx = dx * boxes[j, 2] + dy * boxes[j, 3]
            ly = -dx * boxes[j, 3] + dy * boxes[j, 2]
            if fabs(lx) <= boxes[j, 4] and fabs(ly) <= boxes[j, 5]:
                out[i] = j
                break
    return out


def points_near_segments(const double[:, ::1] points, const double[:, ::1] segs, double half_width):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t m = segs.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1, cast=True] out = np.zeros(n, dtype=np.bool_)
    cdef Py_ssize_t i, j
    cdef double ex, ey, len2, t, qx, qy, px, py, d2
    cdef double hw2 = half_width * half_width
    for i in range(n):
        px = points[i, 0]
        py = points[i, 1]
        for j in range(m):
            ex = segs[j, 2] - segs[j, 0]
            ey = segs[j, 3] - segs[j, 1]
            len2 = ex * ex + ey * ey
            if len2 > 0.0:
                t = ((px - segs[j, 0]) * ex + (py - segs[j, 1]) * ey) / len2
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            else:
                t = 0.0
            qx = segs[j, 0] + t * ex - px
            qy = segs[j, 1] + t * ey - py
            d2 = qx * qx + qy * qy
            if d2 <= hw2:
                out[i] = True
                break
    return out


cdef inline double _slab(double o, double d, double h, double* lo, double* hi) nogil:
    cdef double t0, t1, tmp
    if d == 0.0:
        if fabs(o) > h:
            lo[0] = INFINITY
            hi[0] = -INFINITY
        return 0.0
    t0 = (-h - o) / d
    t1 = (h - o) / d
    if t0 > t1:
        tmp = t0
        t0 = t1
        t1 = tmp
    if t0 > lo[0]:
        lo[0] = t0
    if t1 < hi[0]:
        hi[0] = t1
    return 0.0


def raycast_boxes(double ox, double oy, const double[:, ::1] dirs, const double[:, ::1] boxes, double max_range):
    cdef Py_ssize_t r = dirs.shape[0]
    cdef Py_ssize_t m = boxes.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.full(r, np.inf)
    cdef Py_ssize_t i, j
    cdef double dxw, dyw, rx, ry, lox, loy, ldx, ldy, lo, hi, t, best
    for i in range(r):
        dxw = dirs[i, 0]
        dyw = dirs[i, 1]
        best = INFINITY
        for j in range(m):
            rx = ox - boxes[j, 0]
            ry = oy - boxes[j, 1]
            lox = rx * boxes[j, 2] + ry * boxes[j, 3]
            loy = -rx * boxes[j, 3] + ry * boxes[j, 2]
            ldx = dxw * boxes[j, 2] + dyw * boxes[j, 3]
            ldy = -dxw * boxes[j, 3] + dyw * boxes[j, 2]
            lo = -INFINITY
            hi = INFINITY
            _slab(lox, ldx, boxes[j, 4], &lo, &hi)
            _slab(loy, ldy, boxes[j, 5], &lo, &hi)
            if lo > hi or hi < 0.0:
                continue
            t = lo if lo > 0.0 else 0.0
            if t < best:
                best = t
        if best <= max_range:
            out[i] = best
    return out


cdef inline void _corners(double cx, double cy, double c, double s, double hl, double hw, double* out) nogil:
    out[0] = cx + c * hl - s * hw
    out[1] = cy + s * hl + c * hw
    out[2] = cx + c * hl + s * hw
    out[3] = cy + s * hl - c * hw
    out[4] = cx - c * hl + s * hw
    out[5] = cy - s * hl - c * hw
    out[6] = cx - c * hl - s * hw
    out[7] = cy - s * hl + c * hw


cdef inline bint _separated(double* ca, double* cb, double ax, double ay) nogil:
    cdef double amin = INFINITY, amax = -INFINITY, bmin = INFINITY, bmax = -INFINITY, p
    cdef int k
    for k in range(4):
        p = ca[2 * k] * ax + ca[2 * k + 1] * ay
        if p < amin:
            amin = p
        if p > amax:
            amax = p
        p = cb[2 * k] * ax + cb[2 * k + 1] * ay
        if p < bmin:
            bmin = p
        if p > bmax:
            bmax = p
    return amax < bmin or bmax < amin


def boxes_overlap(const double[::1] a, const double[:, ::1] boxes):
    """Separating-axis overlap test of box ``a`` against every row of ``boxes``."""
    cdef Py_ssize_t m = boxes.shape[0]
    cdef cnp.ndarray[cnp.uint8_t, ndim=1, cast=True] out = np.zeros(m, dtype=np.bool_)
    cdef double ca[8]
    cdef double cb[8]
    cdef Py_ssize_t j
    _corners(a[0], a[1], a[2], a[3], a[4], a[5], ca)
    for j in range(m):
        _corners(boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3], boxes[j, 4], boxes[j, 5], cb)
        if _separated(ca, cb, a[2], a[3]):
            continue
        if _separated(ca, cb, -a[3], a[2]):
            continue
        if _separated(ca, cb, boxes[j, 2], boxes[j, 3]):
            continue
        if _separated(ca, cb, -boxes[j, 3], boxes[j, 2]):
            continue
        out[j] = True
    return out
