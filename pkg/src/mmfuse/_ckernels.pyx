# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels; mirrors ``_pykernels`` one-for-one."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, floor

cnp.import_array()


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(n):
            y[i, j] = y[i, j] / s
    return out


def softmax_rows_backward(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += gy[i, j] * y[i, j]
        for j in range(n):
            gx[i, j] = y[i, j] * (gy[i, j] - dot)
    return out


def layer_norm_rows(double[:, ::1] x, double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    rstd_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] xh = out
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, c, r
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu = mu / n
        var = 0.0
        for j in range(n):
            c = x[i, j] - mu
            var += c * c
        var = var / n
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(n):
            xh[i, j] = (x[i, j] - mu) * r
    return out, rstd_arr


def layer_norm_rows_backward(double[:, ::1] xhat, double[::1] rstd, double[:, ::1] g):
    cdef Py_ssize_t m = xhat.shape[0], n = xhat.shape[1], i, j
    out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double m1, m2
    for i in range(m):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            m1 += g[i, j]
            m2 += g[i, j] * xhat[i, j]
        m1 = m1 / n
        m2 = m2 / n
        for j in range(n):
            gx[i, j] = (g[i, j] - m1 - xhat[i, j] * m2) * rstd[i]
    return out


def lcs_length(const long long[::1] a, const long long[::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    if n == 0 or m == 0:
        return 0
    prev_arr = np.zeros(m + 1, dtype=np.int64)
    cur_arr = np.zeros(m + 1, dtype=np.int64)
    cdef long long[::1] prev = prev_arr
    cdef long long[::1] cur = cur_arr
    cdef long long[::1] tmp
    for i in range(n):
        cur[0] = 0
        for j in range(m):
            if a[i] == b[j]:
                cur[j + 1] = prev[j] + 1
            elif cur[j] > prev[j + 1]:
                cur[j + 1] = cur[j]
            else:
                cur[j + 1] = prev[j + 1]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])


def interp_matrix(Py_ssize_t src_len, Py_ssize_t dst_len):
    out = np.zeros((dst_len, src_len), dtype=np.float64)
    cdef double[:, ::1] w = out
    cdef Py_ssize_t i, j, lo
    cdef double p, frac
    if src_len == 1 or dst_len == 1:
        for i in range(dst_len):
            for j in range(src_len):
                w[i, j] = 1.0 / src_len
        return out
    for i in range(dst_len):
        p = i * (src_len - 1) / <double>(dst_len - 1)
        lo = <Py_ssize_t>floor(p)
        if lo >= src_len - 1:
            w[i, src_len - 1] = 1.0
            continue
        frac = p - lo
        w[i, lo] = 1.0 - frac
        w[i, lo + 1] += frac
    return out
