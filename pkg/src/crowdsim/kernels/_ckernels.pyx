# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, ceil, floor, hypot, fabs

cnp.import_array()

cdef double ON_EDGE_EPS = 1e-9


def points_in_polygon(px, py, vx, vy):
    cdef double[::1] X = np.ascontiguousarray(px, dtype=np.float64)
    cdef double[::1] Y = np.ascontiguousarray(py, dtype=np.float64)
    cdef double[::1] VX = np.ascontiguousarray(vx, dtype=np.float64)
    cdef double[::1] VY = np.ascontiguousarray(vy, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], m = VX.shape[0], k, i, j
    out = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] res = out
    # per-edge constants: tolerance scale and padded bounding box
    edges = np.empty((m, 6), dtype=np.float64)
    cdef double[:, ::1] E = edges
    cdef double x, y, x1, y1, x2, y2, cross, xc
    cdef bint inside, edge
    for i in range(m):
        j = i + 1
        if j == m:
            j = 0
        x1 = VX[i]; y1 = VY[i]; x2 = VX[j]; y2 = VY[j]
        E[i, 0] = ON_EDGE_EPS * max(hypot(x2 - x1, y2 - y1), 1.0)
        E[i, 1] = min(x1, x2) - ON_EDGE_EPS
        E[i, 2] = max(x1, x2) + ON_EDGE_EPS
        E[i, 3] = min(y1, y2) - ON_EDGE_EPS
        E[i, 4] = max(y1, y2) + ON_EDGE_EPS
    for k in range(n):
        x = X[k]
        y = Y[k]
        inside = False
        edge = False
        for i in range(m):
            j = i + 1
            if j == m:
                j = 0
            x1 = VX[i]; y1 = VY[i]; x2 = VX[j]; y2 = VY[j]
            if E[i, 1] <= x <= E[i, 2] and E[i, 3] <= y <= E[i, 4]:
                cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
                if fabs(cross) <= E[i, 0]:
                    edge = True
                    break
            if y1 == y2:
                continue
            if (y1 > y) != (y2 > y):
                xc = (x2 - x1) * (y - y1) / (y2 - y1) + x1
                if x < xc:
                    inside = not inside
        res[k] = 1 if (inside or edge) else 0
    return out


def splat_gaussians(xs, ys, sigmas, int height, int width, double radius_factor=4.0):
    cdef double[::1] X = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] Y = np.ascontiguousarray(ys, dtype=np.float64)
    cdef double[::1] S = np.ascontiguousarray(sigmas, dtype=np.float64)
    out = np.zeros((height, width), dtype=np.float64)
    cdef double[:, ::1] grid = out
    cdef Py_ssize_t n = X.shape[0], k, i, j
    cdef int i0, i1, j0, j1
    cdef double x, y, s, r, dy, dx, d2, total, inv2s2
    cdef double[:, ::1] win
    for k in range(n):
        x = X[k]; y = Y[k]; s = S[k]
        r = radius_factor * s
        i0 = <int>ceil(y - 0.5 - r)
        if i0 < 0:
            i0 = 0
        i1 = <int>floor(y - 0.5 + r)
        if i1 > height - 1:
            i1 = height - 1
        j0 = <int>ceil(x - 0.5 - r)
        if j0 < 0:
            j0 = 0
        j1 = <int>floor(x - 0.5 + r)
        if j1 > width - 1:
            j1 = width - 1
        if i1 < i0 or j1 < j0:
            continue
        win = np.zeros((i1 - i0 + 1, j1 - j0 + 1), dtype=np.float64)
        total = 0.0
        inv2s2 = 2.0 * s * s
        for i in range(i0, i1 + 1):
            dy = i + 0.5 - y
            for j in range(j0, j1 + 1):
                dx = j + 0.5 - x
                d2 = dy * dy + dx * dx
                if d2 <= r * r:
                    win[i - i0, j - j0] = exp(-d2 / inv2s2)
        for i in range(i1 - i0 + 1):
            for j in range(j1 - j0 + 1):
                total += win[i, j]
        if total > 0.0:
            for i in range(i0, i1 + 1):
                for j in range(j0, j1 + 1):
                    grid[i, j] += win[i - i0, j - j0] / total
    return out


def render_glyphs(glyphs, colors, int height, int width):
    cdef double[:, ::1] G = np.ascontiguousarray(np.asarray(glyphs, dtype=np.float64).reshape(-1, 7))
    cdef double[:, ::1] C = np.ascontiguousarray(np.asarray(colors, dtype=np.float64).reshape(-1, 6))
    layer = np.zeros((height, width, 4), dtype=np.float64)
    cdef double[:, :, ::1] L = layer
    cdef Py_ssize_t n = G.shape[0], k, i, j, ch
    cdef int i0, i1, j0, j1
    cdef double hx, hy, hr, bx, by, ax, ay, cx, cy, sdh, sdb, ex, ey, ch_, cb, ba, alpha, keep, mab
    for k in range(n):
        hx = G[k, 0]; hy = G[k, 1]; hr = G[k, 2]
        bx = G[k, 3]; by = G[k, 4]; ax = G[k, 5]; ay = G[k, 6]
        mab = ax if ax < ay else ay
        i0 = <int>floor(min(hy - hr, by - ay) - 1.0)
        if i0 < 0:
            i0 = 0
        i1 = <int>ceil(max(hy + hr, by + ay) + 1.0)
        if i1 > height - 1:
            i1 = height - 1
        j0 = <int>floor(min(hx - hr, bx - ax) - 1.0)
        if j0 < 0:
            j0 = 0
        j1 = <int>ceil(max(hx + hr, bx + ax) + 1.0)
        if j1 > width - 1:
            j1 = width - 1
        for i in range(i0, i1 + 1):
            cy = i + 0.5
            for j in range(j0, j1 + 1):
                cx = j + 0.5
                sdh = sqrt((cx - hx) * (cx - hx) + (cy - hy) * (cy - hy)) - hr
                ex = (cx - bx) / ax
                ey = (cy - by) / ay
                sdb = (sqrt(ex * ex + ey * ey) - 1.0) * mab
                ch_ = 0.5 - sdh
                if ch_ < 0.0:
                    ch_ = 0.0
                elif ch_ > 1.0:
                    ch_ = 1.0
                cb = 0.5 - sdb
                if cb < 0.0:
                    cb = 0.0
                elif cb > 1.0:
                    cb = 1.0
                ba = cb * (1.0 - ch_)
                alpha = ch_ + ba
                keep = 1.0 - alpha
                for ch in range(3):
                    L[i, j, ch] = C[k, 3 + ch] * ch_ + C[k, ch] * ba + L[i, j, ch] * keep
                L[i, j, 3] = alpha + L[i, j, 3] * keep
    return layer
