# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the numpy kernel backend.

Single-threaded C loops over contiguous buffers.  These win on the small
operands that dominate the projector's attention blocks, where numpy's
per-call overhead and temporaries outweigh the actual arithmetic; the
dispatching layer keeps routing large matmuls to BLAS.
"""

import numpy as np

from libc.math cimport exp, sqrt, tanh

ctypedef fused real:
    float
    double

cdef double SQRT_2_OVER_PI = 0.7978845608028654
cdef double GELU_CUBIC = 0.044715


def matmul2d(real[:, ::1] a, real[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], r = b.shape[1]
    out_np = np.zeros((m, r), dtype=np.asarray(a).dtype)
    cdef real[:, ::1] out = out_np
    _matmul_core(a, b, out)
    return out_np


def matmul3d(real[:, :, ::1] a, real[:, :, ::1] b):
    cdef Py_ssize_t n = a.shape[0], i
    out_np = np.zeros((n, a.shape[1], b.shape[2]), dtype=np.asarray(a).dtype)
    cdef real[:, :, ::1] out = out_np
    for i in range(n):
        _matmul_core(a[i], b[i], out[i])
    return out_np


cdef void _matmul_core(real[:, ::1] a, real[:, ::1] b, real[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], r = b.shape[1]
    cdef Py_ssize_t i, j, l
    cdef real aik
    for i in range(m):
        for l in range(k):
            aik = a[i, l]
            for j in range(r):
                out[i, j] += aik * b[l, j]


def softmax_lastdim(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], width = x.shape[1]
    out_np = np.empty((rows, width), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double mx, total
    for i in range(rows):
        mx = x[i, 0]
        for j in range(1, width):
            if x[i, j] > mx:
                mx = x[i, j]
        total = 0.0
        for j in range(width):
            out[i, j] = <real>exp(x[i, j] - mx)
            total += out[i, j]
        for j in range(width):
            out[i, j] = <real>(out[i, j] / total)
    return out_np


def softmax_backward(real[:, ::1] y, real[:, ::1] grad_y):
    cdef Py_ssize_t rows = y.shape[0], width = y.shape[1]
    out_np = np.empty((rows, width), dtype=np.asarray(y).dtype)
    cdef real[:, ::1] out = out_np
    cdef Py_ssize_t i, j
    cdef double inner
    for i in range(rows):
        inner = 0.0
        for j in range(width):
            inner += grad_y[i, j] * y[i, j]
        for j in range(width):
            out[i, j] = <real>(y[i, j] * (grad_y[i, j] - inner))
    return out_np


def gelu(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_np = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] out = out_np
    cdef double v, u
    for i in range(n):
        v = x[i]
        u = SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)
        out[i] = <real>(0.5 * v * (1.0 + tanh(u)))
    return out_np


def gelu_backward(real[::1] x, real[::1] grad_y):
    cdef Py_ssize_t n = x.shape[0], i
    out_np = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] out = out_np
    cdef double v, u, t, du
    for i in range(n):
        v = x[i]
        u = SQRT_2_OVER_PI * (v + GELU_CUBIC * v * v * v)
        t = tanh(u)
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * v * v)
        out[i] = <real>(grad_y[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
    return out_np


def layer_norm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], width = x.shape[1]
    dtype = np.asarray(x).dtype
    y_np = np.empty((rows, width), dtype=dtype)
    xhat_np = np.empty((rows, width), dtype=dtype)
    istd_np = np.empty(rows, dtype=dtype)
    cdef real[:, ::1] y = y_np
    cdef real[:, ::1] xhat = xhat_np
    cdef real[::1] istd = istd_np
    cdef Py_ssize_t i, j
    cdef double mean, var, d, inv
    for i in range(rows):
        mean = 0.0
        for j in range(width):
            mean += x[i, j]
        mean /= width
        var = 0.0
        for j in range(width):
            d = x[i, j] - mean
            var += d * d
        var /= width
        inv = 1.0 / sqrt(var + eps)
        istd[i] = <real>inv
        for j in range(width):
            xhat[i, j] = <real>((x[i, j] - mean) * inv)
            y[i, j] = <real>(xhat[i, j] * gain[j] + bias[j])
    return y_np, xhat_np, istd_np


def layer_norm_backward(real[:, ::1] grad_y, real[:, ::1] xhat, real[::1] inv_std,
                        real[::1] gain):
    cdef Py_ssize_t rows = grad_y.shape[0], width = grad_y.shape[1]
    dtype = np.asarray(grad_y).dtype
    gx_np = np.empty((rows, width), dtype=dtype)
    ggain_np = np.zeros(width, dtype=dtype)
    gbias_np = np.zeros(width, dtype=dtype)
    cdef real[:, ::1] gx = gx_np
    cdef real[::1] ggain = ggain_np
    cdef real[::1] gbias = gbias_np
    cdef Py_ssize_t i, j
    cdef double m1, m2, gxh
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(width):
            gxh = grad_y[i, j] * gain[j]
            m1 += gxh
            m2 += gxh * xhat[i, j]
            ggain[j] += grad_y[i, j] * xhat[i, j]
            gbias[j] += grad_y[i, j]
        m1 /= width
        m2 /= width
        for j in range(width):
            gx[i, j] = <real>(inv_std[i] * (grad_y[i, j] * gain[j] - m1 - xhat[i, j] * m2))
    return gx_np, ggain_np, gbias_np
