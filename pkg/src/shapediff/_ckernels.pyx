# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometric kernels. Signatures match ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, INFINITY, M_PI, pow

cnp.import_array()


def knn_indices(X, Py_ssize_t k):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1]
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of points ({n})")
    out = np.empty((n, k), dtype=np.int64)
    cdef long long[:, ::1] idx = out
    cdef double[::1] best = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t i, j, c, pos, filled
    cdef double d2, diff
    for i in range(n):
        filled = 0
        for j in range(n):
            if j == i:
                continue
            d2 = 0.0
            for c in range(dim):
                diff = x[i, c] - x[j, c]
                d2 += diff * diff
            # j increases monotonically, so a strict comparison keeps lower indices first on ties
            if filled == k and d2 >= best[k - 1]:
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and best[pos - 1] > d2:
                best[pos] = best[pos - 1]
                idx[i, pos] = idx[i, pos - 1]
                pos -= 1
            best[pos] = d2
            idx[i, pos] = j
            if filled < k:
                filled += 1
    return out


def sphere_sdf(Q, centers, radii):
    cdef double[:, ::1] q = np.ascontiguousarray(Q, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(centers, dtype=np.float64)
    cdef double[::1] r = np.ascontiguousarray(radii, dtype=np.float64)
    cdef Py_ssize_t m = q.shape[0], a = c.shape[0], i, j
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef double best, d, dx, dy, dz
    for i in range(m):
        best = INFINITY
        for j in range(a):
            dx = q[i, 0] - c[j, 0]
            dy = q[i, 1] - c[j, 1]
            dz = q[i, 2] - c[j, 2]
            d = sqrt(dx * dx + dy * dy + dz * dz) - r[j]
            if d < best:
                best = d
        o[i] = -best
    return out


def buried_mask(P, owner, centers, radii):
    cdef double[:, ::1] p = np.ascontiguousarray(P, dtype=np.float64)
    cdef long long[::1] own = np.ascontiguousarray(owner, dtype=np.int64)
    cdef double[:, ::1] c = np.ascontiguousarray(centers, dtype=np.float64)
    cdef double[::1] r = np.ascontiguousarray(radii, dtype=np.float64)
    cdef Py_ssize_t m = p.shape[0], a = c.shape[0], i, j
    out = np.zeros(m, dtype=bool)
    cdef cnp.npy_bool[::1] o = out
    cdef double dx, dy, dz
    for i in range(m):
        for j in range(a):
            if j == own[i]:
                continue
            dx = p[i, 0] - c[j, 0]
            dy = p[i, 1] - c[j, 1]
            dz = p[i, 2] - c[j, 2]
            if sqrt(dx * dx + dy * dy + dz * dz) < r[j]:
                o[i] = True
                break
    return out


def gaussian_overlap(XA, alphaA, XB, alphaB, double p):
    cdef double[:, ::1] xa = np.ascontiguousarray(XA, dtype=np.float64)
    cdef double[:, ::1] xb = np.ascontiguousarray(XB, dtype=np.float64)
    cdef double[::1] aa = np.ascontiguousarray(alphaA, dtype=np.float64)
    cdef double[::1] ab = np.ascontiguousarray(alphaB, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double total = 0.0, s, d2, dx, dy, dz
    for i in range(xa.shape[0]):
        for j in range(xb.shape[0]):
            dx = xa[i, 0] - xb[j, 0]
            dy = xa[i, 1] - xb[j, 1]
            dz = xa[i, 2] - xb[j, 2]
            d2 = dx * dx + dy * dy + dz * dz
            s = aa[i] + ab[j]
            total += pow(M_PI / s, 1.5) * p * p * exp(-aa[i] * ab[j] * d2 / s)
    return total


def nn_mean(X, Q, Py_ssize_t n):
    cdef double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] q = np.ascontiguousarray(Q, dtype=np.float64)
    cdef Py_ssize_t a = x.shape[0], m = q.shape[0], i, j, pos, filled
    if n > m:
        raise ValueError(f"n={n} exceeds the number of guidance points ({m})")
    mean_dist = np.empty(a, dtype=np.float64)
    mean_point = np.empty((a, 3), dtype=np.float64)
    cdef double[::1] md = mean_dist
    cdef double[:, ::1] mp = mean_point
    cdef double[::1] best = np.empty(n, dtype=np.float64)
    cdef long long[::1] bidx = np.empty(n, dtype=np.int64)
    cdef double d, dx, dy, dz, sx, sy, sz, sd
    for i in range(a):
        filled = 0
        for j in range(m):
            dx = x[i, 0] - q[j, 0]
            dy = x[i, 1] - q[j, 1]
            dz = x[i, 2] - q[j, 2]
            d = sqrt(dx * dx + dy * dy + dz * dz)
            if filled == n and d >= best[n - 1]:
                continue
            pos = filled if filled < n else n - 1
            while pos > 0 and best[pos - 1] > d:
                best[pos] = best[pos - 1]
                bidx[pos] = bidx[pos - 1]
                pos -= 1
            best[pos] = d
            bidx[pos] = j
            if filled < n:
                filled += 1
        sd = 0.0
        sx = 0.0
        sy = 0.0
        sz = 0.0
        for pos in range(n):
            sd += best[pos]
            sx += q[bidx[pos], 0]
            sy += q[bidx[pos], 1]
            sz += q[bidx[pos], 2]
        md[i] = sd / n
        mp[i, 0] = sx / n
        mp[i, 1] = sy / n
        mp[i, 2] = sz / n
    return mean_dist, mean_point
