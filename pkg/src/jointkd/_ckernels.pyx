# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels; same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2/pi)


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gamma,
                   const double[::1] beta, double eps):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1], i, j
    y_arr = np.empty((R, D))
    xhat_arr = np.empty((R, D))
    rstd_arr = np.empty(R)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, d, r
    for i in range(R):
        mu = 0.0
        for j in range(D):
            mu += x[i, j]
        mu /= D
        var = 0.0
        for j in range(D):
            d = x[i, j] - mu
            var += d * d
        var /= D
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(D):
            d = (x[i, j] - mu) * r
            xhat[i, j] = d
            y[i, j] = d * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] dy, const double[:, ::1] xhat,
                   const double[::1] rstd, const double[::1] gamma):
    cdef Py_ssize_t R = dy.shape[0], D = dy.shape[1], i, j
    dx_arr = np.empty((R, D))
    dgamma_arr = np.zeros(D)
    dbeta_arr = np.zeros(D)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef double m1, m2, g
    for i in range(R):
        m1 = 0.0
        m2 = 0.0
        for j in range(D):
            g = dy[i, j] * gamma[j]
            m1 += g
            m2 += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        m1 /= D
        m2 /= D
        for j in range(D):
            dx[i, j] = (dy[i, j] * gamma[j] - m1 - xhat[i, j] * m2) * rstd[i]
    return dx_arr, dgamma_arr, dbeta_arr


def gelu_fwd(const double[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1], i, j
    out_arr = np.empty((R, D))
    cdef double[:, ::1] out = out_arr
    cdef double v
    for i in range(R):
        for j in range(D):
            v = x[i, j]
            out[i, j] = 0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v)))
    return out_arr


def gelu_bwd(const double[:, ::1] x, const double[:, ::1] dy):
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1], i, j
    out_arr = np.empty((R, D))
    cdef double[:, ::1] out = out_arr
    cdef double v, th
    for i in range(R):
        for j in range(D):
            v = x[i, j]
            th = tanh(GELU_C * (v + 0.044715 * v * v * v))
            out[i, j] = dy[i, j] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th)
                                    * GELU_C * (1.0 + 3 * 0.044715 * v * v))
    return out_arr


def softmax_fwd(const double[:, ::1] x, mask=None):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], i, j
    out_arr = np.zeros((R, C))
    cdef double[:, ::1] out = out_arr
    cdef const cnp.uint8_t[:, ::1] m
    cdef bint masked = mask is not None
    cdef double mx, s
    cdef bint seen
    if masked:
        m = mask
    for i in range(R):
        seen = False
        mx = 0.0
        for j in range(C):
            if masked and not m[i, j]:
                continue
            if not seen or x[i, j] > mx:
                mx = x[i, j]
                seen = True
        if not seen:
            continue
        s = 0.0
        for j in range(C):
            if masked and not m[i, j]:
                continue
            out[i, j] = exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(C):
            out[i, j] /= s
    return out_arr


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] dy):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1], i, j
    out_arr = np.empty((R, C))
    cdef double[:, ::1] out = out_arr
    cdef double d
    for i in range(R):
        d = 0.0
        for j in range(C):
            d += dy[i, j] * y[i, j]
        for j in range(C):
            out[i, j] = y[i, j] * (dy[i, j] - d)
    return out_arr
