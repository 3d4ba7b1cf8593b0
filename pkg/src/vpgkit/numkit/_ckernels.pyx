# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels. Mirrors ``_pykernels`` one-for-one."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def softmax_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(m):
            y[i, j] /= s
    return out


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] dy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += dy[i, j] * y[i, j]
        for j in range(m):
            dx[i, j] = y[i, j] * (dy[i, j] - dot)
    return out


def layernorm_fwd(const double[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] xhat = out
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(m):
            xhat[i, j] = (x[i, j] - mu) * r
    return out, rstd_arr


def layernorm_bwd(const double[:, ::1] xhat, const double[::1] rstd,
                  const double[:, ::1] dxhat):
    cdef Py_ssize_t n = xhat.shape[0], m = xhat.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double m1, m2
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(m):
            m1 += dxhat[i, j]
            m2 += dxhat[i, j] * xhat[i, j]
        m1 /= m
        m2 /= m
        for j in range(m):
            dx[i, j] = (dxhat[i, j] - m1 - xhat[i, j] * m2) * rstd[i]
    return out


def gelu_fwd(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double v
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            y[i, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_A * v * v * v)))
    return out


def gelu_bwd(const double[:, ::1] x, const double[:, ::1] dy):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef double v, v2, t
    for i in range(n):
        for j in range(m):
            v = x[i, j]
            v2 = v * v
            t = tanh(GELU_C * (v + GELU_A * v2 * v))
            dx[i, j] = dy[i, j] * (0.5 * (1.0 + t)
                                   + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v2))
    return out


def xent_fwd_bwd(const double[:, ::1] logits, const cnp.int64_t[::1] targets,
                 const double[::1] weights):
    cdef Py_ssize_t n = logits.shape[0], m = logits.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] g = out
    cdef double mx, s, w, total = 0.0
    for i in range(n):
        w = weights[i]
        mx = logits[i, 0]
        for j in range(1, m):
            if logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(m):
            g[i, j] = exp(logits[i, j] - mx)
            s += g[i, j]
        total += w * (log(s) - (logits[i, targets[i]] - mx))
        for j in range(m):
            g[i, j] = g[i, j] / s * w
        g[i, targets[i]] -= w
    return total, out


def lcs_length(a, b):
    cdef cnp.int64_t[::1] xa = np.ascontiguousarray(a, dtype=np.int64)
    cdef cnp.int64_t[::1] xb = np.ascontiguousarray(b, dtype=np.int64)
    cdef Py_ssize_t na = xa.shape[0], nb = xb.shape[0], i, j
    if na == 0 or nb == 0:
        return 0
    prev_arr = np.zeros(nb + 1, dtype=np.int64)
    cur_arr = np.zeros(nb + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] prev = prev_arr
    cdef cnp.int64_t[::1] cur = cur_arr
    cdef cnp.int64_t[::1] tmp
    for i in range(na):
        cur[0] = 0
        for j in range(nb):
            if xa[i] == xb[j]:
                cur[j + 1] = prev[j] + 1
            elif cur[j] > prev[j + 1]:
                cur[j + 1] = cur[j]
            else:
                cur[j + 1] = prev[j + 1]
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[nb])
