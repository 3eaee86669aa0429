# cython: language_level=3
"""Compiled propagation kernels; same contracts as ``fairrec._pykernels``.

Every loop is parallel over output rows only, so results do not depend on the
thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange

cnp.import_array()

ctypedef cnp.int64_t idx_t


def gather_interests(const idx_t[::1] indptr, const idx_t[::1] indices,
                     const double[:, ::1] att, const double[:, ::1] x,
                     int num_threads=1):
    cdef Py_ssize_t n = att.shape[0], k = att.shape[1], d = x.shape[1]
    out_arr = np.zeros((n, k, d), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t v, e, nb, kk, j
    cdef double a
    for v in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        for e in range(indptr[v], indptr[v + 1]):
            nb = indices[e]
            for kk in range(k):
                a = att[nb, kk]
                for j in range(d):
                    out[v, kk, j] += a * x[nb, j]
    return out_arr


def neighbor_sum(const idx_t[::1] indptr, const idx_t[::1] indices,
                 const double[:, :, ::1] t, int num_threads=1):
    cdef Py_ssize_t n = t.shape[0], k = t.shape[1], d = t.shape[2]
    out_arr = np.zeros((n, k, d), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t v, e, nb, kk, j
    for v in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        for e in range(indptr[v], indptr[v + 1]):
            nb = indices[e]
            for kk in range(k):
                for j in range(d):
                    out[v, kk, j] += t[nb, kk, j]
    return out_arr


def select_aggregate(const idx_t[::1] indptr, const idx_t[::1] indices,
                     const double[::1] weights, const double[:, :, ::1] ev,
                     const double[:, ::1] x, int num_threads=1):
    cdef Py_ssize_t n = ev.shape[0], k = ev.shape[1], d = ev.shape[2]
    cdef Py_ssize_t nnz = indices.shape[0]
    out_arr = np.zeros((n, d), dtype=np.float64)
    mid_arr = np.zeros(nnz, dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef idx_t[::1] mid = mid_arr
    cdef Py_ssize_t v, e, nb, kk, j, best
    cdef double dot, best_dot, w
    for v in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        for e in range(indptr[v], indptr[v + 1]):
            nb = indices[e]
            best = 0
            best_dot = 0.0
            for j in range(d):
                best_dot = best_dot + ev[nb, 0, j] * x[v, j]
            for kk in range(1, k):
                dot = 0.0
                for j in range(d):
                    dot = dot + ev[nb, kk, j] * x[v, j]
                if dot > best_dot:
                    best_dot = dot
                    best = kk
            mid[e] = best
            w = weights[e]
            for j in range(d):
                out[v, j] += w * ev[nb, best, j]
    return out_arr, mid_arr


def scatter_selected(const idx_t[::1] indptr, const idx_t[::1] indices,
                     const idx_t[::1] rev, const double[::1] weights,
                     const idx_t[::1] mid, const double[:, ::1] dy, int k,
                     int num_threads=1):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1]
    out_arr = np.zeros((n, k, d), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t v, e, r, src, kk, j
    cdef double w
    # row v receives from every edge src <- v, found through the reverse index
    for v in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        for e in range(indptr[v], indptr[v + 1]):
            src = indices[e]
            r = rev[e]
            kk = mid[r]
            w = weights[r]
            for j in range(d):
                out[v, kk, j] += w * dy[src, j]
    return out_arr
