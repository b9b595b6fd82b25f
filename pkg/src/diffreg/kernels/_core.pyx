# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: pairwise distances, KNN selection, Sinkhorn sweeps.

Mirrors diffreg.kernels.fallback; keep both in sync when touching either.
"""

import numpy as np

from libc.math cimport sqrt


def pairwise_sqdist(x, y):
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], m = yv.shape[0], d = xv.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, t
    cdef double acc, diff
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(d):
                diff = xv[i, t] - yv[j, t]
                acc += diff * diff
            out[i, j] = acc
    return out_arr


def knn(query, ref, Py_ssize_t k):
    """k smallest distances per query row; ties go to the smaller ref index."""
    cdef const double[:, ::1] qv = np.ascontiguousarray(query, dtype=np.float64)
    cdef const double[:, ::1] rv = np.ascontiguousarray(ref, dtype=np.float64)
    cdef Py_ssize_t n = qv.shape[0], m = rv.shape[0], d = qv.shape[1]
    idx_arr = np.empty((n, k), dtype=np.int64)
    dist_arr = np.empty((n, k), dtype=np.float64)
    cdef long long[:, ::1] idx = idx_arr
    cdef double[:, ::1] dist = dist_arr
    best_d_arr = np.empty(k, dtype=np.float64)
    best_i_arr = np.empty(k, dtype=np.int64)
    cdef double[::1] best_d = best_d_arr
    cdef long long[::1] best_i = best_i_arr
    cdef Py_ssize_t i, j, t, pos, shift
    cdef double acc, diff
    for i in range(n):
        for pos in range(k):
            best_d[pos] = np.inf
            best_i[pos] = -1
        for j in range(m):
            acc = 0.0
            for t in range(d):
                diff = qv[i, t] - rv[j, t]
                acc += diff * diff
            # strict comparisons keep the earlier (smaller) index on ties
            if acc < best_d[k - 1]:
                pos = k - 1
                while pos > 0 and best_d[pos - 1] > acc:
                    pos -= 1
                for shift in range(k - 1, pos, -1):
                    best_d[shift] = best_d[shift - 1]
                    best_i[shift] = best_i[shift - 1]
                best_d[pos] = acc
                best_i[pos] = j
        for pos in range(k):
            idx[i, pos] = best_i[pos]
            dist[i, pos] = sqrt(best_d[pos])
    return idx_arr, dist_arr


def sinkhorn_sweeps(double[:, ::1] a, double row_target, double col_target,
                    Py_ssize_t iterations):
    """Alternating marginal normalization, in place, ending on a row pass."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    sums_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] sums = sums_arr
    cdef Py_ssize_t it, i, j
    cdef double s
    for it in range(iterations):
        for j in range(m):
            sums[j] = 0.0
        for i in range(n):
            for j in range(m):
                sums[j] += a[i, j]
        for j in range(m):
            if sums[j] > 0.0:
                sums[j] = col_target / sums[j]
            else:
                sums[j] = 1.0
        for i in range(n):
            for j in range(m):
                a[i, j] *= sums[j]
        for i in range(n):
            s = 0.0
            for j in range(m):
                s += a[i, j]
            if s > 0.0:
                s = row_target / s
                for j in range(m):
                    a[i, j] *= s
    return np.asarray(a)
