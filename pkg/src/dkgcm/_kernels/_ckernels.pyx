# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled DTW and linear-scan kernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef fused real:
    float
    double


cdef double _dtw(const double* a, Py_ssize_t t, Py_ssize_t sa,
                 const double* b, Py_ssize_t u, Py_ssize_t sb,
                 Py_ssize_t window, double* prev, double* cur) noexcept nogil:
    cdef Py_ssize_t i, j, jlo, jhi
    cdef double best, v
    cdef double* tmp
    for j in range(u + 1):
        prev[j] = INFINITY
    prev[0] = 0.0
    for i in range(1, t + 1):
        for j in range(u + 1):
            cur[j] = INFINITY
        jlo = 1
        jhi = u
        if window >= 0:
            if i - window > jlo:
                jlo = i - window
            if i + window < jhi:
                jhi = i + window
        for j in range(jlo, jhi + 1):
            best = prev[j]
            if prev[j - 1] < best:
                best = prev[j - 1]
            if cur[j - 1] < best:
                best = cur[j - 1]
            v = a[(i - 1) * sa] - b[(j - 1) * sb]
            cur[j] = fabs(v) + best
        tmp = prev
        prev = cur
        cur = tmp
    return prev[u]


def dtw_pair(a, b, Py_ssize_t window=-1):
    cdef const double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t t = av.shape[0], u = bv.shape[0]
    cdef double* buf = <double*> malloc(2 * (u + 1) * sizeof(double))
    cdef double out
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            out = _dtw(&av[0], t, 1, &bv[0], u, 1, window, buf, buf + u + 1)
    finally:
        free(buf)
    return out


def dtw_index_pairs(x, ii, jj, Py_ssize_t window=-1):
    """DTW between columns ``ii[p]`` and ``jj[p]`` of the T x N array ``x``."""
    cdef const double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const Py_ssize_t[::1] iv = np.ascontiguousarray(ii, dtype=np.intp)
    cdef const Py_ssize_t[::1] jv = np.ascontiguousarray(jj, dtype=np.intp)
    cdef Py_ssize_t T = xv.shape[0], N = xv.shape[1], P = iv.shape[0], p
    out = np.empty(P, dtype=np.float64)
    cdef double[::1] ov = out
    if P == 0:
        return out
    cdef double* buf = <double*> malloc(2 * (T + 1) * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for p in range(P):
                ov[p] = _dtw(&xv[0, iv[p]], T, N, &xv[0, jv[p]], T, N,
                             window, buf, buf + T + 1)
    finally:
        free(buf)
    return out


def _scan2d(const real[:, ::1] a, const real[:, ::1] b, real[:, ::1] h, bint reverse):
    cdef Py_ssize_t S = a.shape[0], M = a.shape[1], s, m, k
    with nogil:
        for k in range(S):
            s = S - 1 - k if reverse else k
            if k == 0:
                for m in range(M):
                    h[s, m] = b[s, m]
            elif reverse:
                for m in range(M):
                    h[s, m] = a[s, m] * h[s + 1, m] + b[s, m]
            else:
                for m in range(M):
                    h[s, m] = a[s, m] * h[s - 1, m] + b[s, m]


def linear_scan(a, b, bint reverse=False):
    a = np.asarray(a)
    b = np.asarray(b)
    shape = np.broadcast_shapes(a.shape, b.shape)
    dtype = np.result_type(a, b)
    if dtype != np.float32:
        dtype = np.float64
    S = shape[0]
    a2 = np.ascontiguousarray(np.broadcast_to(a, shape), dtype=dtype).reshape(S, -1)
    b2 = np.ascontiguousarray(np.broadcast_to(b, shape), dtype=dtype).reshape(S, -1)
    h = np.empty_like(a2)
    if S:
        _scan2d(a2, b2, h, reverse)
    return h.reshape(shape)
