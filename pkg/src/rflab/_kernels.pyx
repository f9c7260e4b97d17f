# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled periodic 4th-order stencil kernels.

Arrays are viewed as (outer, n, inner) with the differentiated axis in the
middle. The arithmetic order matches ``_kernels_py`` exactly so the two
backends produce bit-identical results.
"""
import numpy as np

cdef double C1 = 2.0 / 3.0
cdef double C2 = -1.0 / 12.0
cdef double C3 = 4.0 / 3.0
cdef double C4 = -1.0 / 12.0


def d1(const double[:, :, ::1] f, double inv_h):
    cdef Py_ssize_t n0 = f.shape[0], n = f.shape[1], n2 = f.shape[2]
    out = np.empty((n0, n, n2), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t i, j, k, jm1, jm2, jp1, jp2
    for i in range(n0):
        for j in range(n):
            jm1 = j - 1 if j >= 1 else j - 1 + n
            jm2 = j - 2 if j >= 2 else j - 2 + n
            jp1 = j + 1 if j + 1 < n else j + 1 - n
            jp2 = j + 2 if j + 2 < n else j + 2 - n
            for k in range(n2):
                o[i, j, k] = (C1 * (f[i, jp1, k] - f[i, jm1, k])
                              + C2 * (f[i, jp2, k] - f[i, jm2, k])) * inv_h
    return out


def d2(const double[:, :, ::1] f, double inv_h2):
    cdef Py_ssize_t n0 = f.shape[0], n = f.shape[1], n2 = f.shape[2]
    cdef double c
    out = np.empty((n0, n, n2), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t i, j, k, jm1, jm2, jp1, jp2
    for i in range(n0):
        for j in range(n):
            jm1 = j - 1 if j >= 1 else j - 1 + n
            jm2 = j - 2 if j >= 2 else j - 2 + n
            jp1 = j + 1 if j + 1 < n else j + 1 - n
            jp2 = j + 2 if j + 2 < n else j + 2 - n
            for k in range(n2):
                c = f[i, j, k]
                o[i, j, k] = (C3 * ((f[i, jp1, k] - c) + (f[i, jm1, k] - c))
                              + C4 * ((f[i, jp2, k] - c) + (f[i, jm2, k] - c))) * inv_h2
    return out
