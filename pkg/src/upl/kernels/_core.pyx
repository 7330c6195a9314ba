# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled geometry kernels: greedy max-min selection and brute-force kNN.

Must stay bit-identical to upl.kernels.reference: squared distances are
accumulated as dx*dx + dy*dy + dz*dz in float64 and ties always resolve to
the lowest index.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def greedy_maxmin(double[:, ::1] coords, Py_ssize_t k, Py_ssize_t seed):
    cdef Py_ssize_t n = coords.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=1] selected = np.empty(k, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] best = np.empty(n, dtype=np.float64)
    cdef double[::1] best_v = best
    cdef Py_ssize_t i, j, nxt
    cdef double dx, dy, dz, d, hi

    selected[0] = seed
    for i in range(n):
        dx = coords[i, 0] - coords[seed, 0]
        dy = coords[i, 1] - coords[seed, 1]
        dz = coords[i, 2] - coords[seed, 2]
        best_v[i] = dx * dx + dy * dy + dz * dz

    for j in range(1, k):
        nxt = 0
        hi = best_v[0]
        for i in range(1, n):
            if best_v[i] > hi:
                hi = best_v[i]
                nxt = i
        selected[j] = nxt
        for i in range(n):
            dx = coords[i, 0] - coords[nxt, 0]
            dy = coords[i, 1] - coords[nxt, 1]
            dz = coords[i, 2] - coords[nxt, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < best_v[i]:
                best_v[i] = d
    return selected


def knn_indices(double[:, ::1] coords, Py_ssize_t k):
    cdef Py_ssize_t n = coords.shape[0]
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.empty((n, k), dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d2 = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] used = np.zeros(n, dtype=np.uint8)
    cdef double[::1] d2_v = d2
    cdef cnp.uint8_t[::1] used_v = used
    cdef Py_ssize_t i, j, m, arg
    cdef double dx, dy, dz, lo

    for i in range(n):
        for j in range(n):
            dx = coords[j, 0] - coords[i, 0]
            dy = coords[j, 1] - coords[i, 1]
            dz = coords[j, 2] - coords[i, 2]
            d2_v[j] = dx * dx + dy * dy + dz * dz
            used_v[j] = 0
        # selection of the k smallest, ties to the lowest index
        for m in range(k):
            arg = -1
            lo = 0.0
            for j in range(n):
                if used_v[j]:
                    continue
                if arg < 0 or d2_v[j] < lo:
                    lo = d2_v[j]
                    arg = j
            used_v[arg] = 1
            out[i, m] = arg
    return out
