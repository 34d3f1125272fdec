# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels for the tensor engine.

Row reductions run in a fixed sequential order; matrix products go to BLAS,
whose thread count ``REEF_LORA_THREADS`` pins, so repeated runs are
bit-identical. Inputs must be C-contiguous float32 or
float64 arrays; the wrappers in ``reeflora.kernels`` guarantee that.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, tanh

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double GELU_C = 0.7978845608028654   # sqrt(2 / pi)
cdef double GELU_K = 0.044715


def matmul(real[:, ::1] a, real[:, ::1] b):
    # GEMM goes to BLAS: a hand loop here ran ~8x slower. Thread count is pinned
    # by REEF_LORA_THREADS, so results still repeat bit for bit.
    if b.shape[0] != a.shape[1]:
        raise ValueError(f"matmul inner dimensions differ: {(a.shape[0], a.shape[1])} x {(b.shape[0], b.shape[1])}")
    return np.matmul(a, b)


def bmm(real[:, :, ::1] a, real[:, :, ::1] b):
    if b.shape[0] != a.shape[0] or b.shape[1] != a.shape[2]:
        raise ValueError(f"bmm shapes differ: {(a.shape[0], a.shape[1], a.shape[2])} x "
                         f"{(b.shape[0], b.shape[1], b.shape[2])}")
    return np.matmul(a, b)


def layer_norm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1], i, j
    cdef double mean, var, diff, rs
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((rows, d), dtype=dtype)
    xhat_arr = np.empty((rows, d), dtype=dtype)
    rstd_arr = np.empty(rows, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    for i in range(rows):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            diff = x[i, j] - mean
            var += diff * diff
        var /= d
        rs = 1.0 / sqrt(var + eps)
        rstd[i] = <real>rs
        for j in range(d):
            xhat[i, j] = <real>((x[i, j] - mean) * rs)
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t rows = dy.shape[0], d = dy.shape[1], i, j
    cdef double m1, m2, g
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((rows, d), dtype=dtype)
    dgamma_arr = np.zeros(d, dtype=dtype)
    dbeta_arr = np.zeros(d, dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real[::1] dgamma = dgamma_arr
    cdef real[::1] dbeta = dbeta_arr
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = dy[i, j] * gamma[j]
            m1 += g
            m2 += g * xhat[i, j]
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            g = dy[i, j] * gamma[j]
            dx[i, j] = <real>(rstd[i] * (g - m1 - xhat[i, j] * m2))
    return dx_arr, dgamma_arr, dbeta_arr


def softmax_fwd(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1], i, j
    cdef real mx
    cdef double total
    dtype = np.float32 if real is float else np.float64
    shifted_arr = np.empty((rows, d), dtype=dtype)
    cdef real[:, ::1] shifted = shifted_arr
    for i in range(rows):
        mx = x[i, 0]
        for j in range(1, d):
            if x[i, j] > mx:
                mx = x[i, j]
        for j in range(d):
            shifted[i, j] = x[i, j] - mx
    # numpy's exp is vectorized; libm's runs one element at a time
    y_arr = np.exp(shifted_arr, out=shifted_arr)
    cdef real[:, ::1] y = y_arr
    for i in range(rows):
        total = 0.0
        for j in range(d):
            total += y[i, j]
        for j in range(d):
            y[i, j] = <real>(y[i, j] / total)
    return y_arr


def softmax_bwd(real[:, ::1] y, real[:, ::1] dy):
    cdef Py_ssize_t rows = y.shape[0], d = y.shape[1], i, j
    cdef double dot
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((rows, d), dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    for i in range(rows):
        dot = 0.0
        for j in range(d):
            dot += dy[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = <real>(y[i, j] * (dy[i, j] - dot))
    return dx_arr


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdef real[::1] y = y_arr
    for i in range(n):
        v = x[i]
        y[i] = <real>(0.5 * v * (1.0 + tanh(GELU_C * (v + GELU_K * v * v * v))))
    return y_arr


def gelu_bwd(real[::1] x, real[::1] dy):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double v, t, du
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty(n, dtype=dtype)
    cdef real[::1] dx = dx_arr
    for i in range(n):
        v = x[i]
        t = tanh(GELU_C * (v + GELU_K * v * v * v))
        du = GELU_C * (1.0 + 3.0 * GELU_K * v * v)
        dx[i] = <real>(dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
    return dx_arr

