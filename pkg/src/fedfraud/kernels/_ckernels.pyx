# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused LayerNorm+ReLU loops.

Semantics mirror ``_fallback``; these exist because the per-batch numpy
version spends most of its time in small temporaries.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def layernorm_relu_forward(const double[:, ::1] z, const double[::1] gain,
                           const double[::1] offset, double eps):
    cdef Py_ssize_t n = z.shape[0], h = z.shape[1], i, j
    out_arr = np.empty((n, h), dtype=np.float64)
    xhat_arr = np.empty((n, h), dtype=np.float64)
    inv_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv_std = inv_arr
    cdef double mu, var, d, s, y
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(h):
                mu += z[i, j]
            mu /= h
            var = 0.0
            for j in range(h):
                d = z[i, j] - mu
                var += d * d
            var /= h
            s = 1.0 / sqrt(var + eps)
            inv_std[i] = s
            for j in range(h):
                d = (z[i, j] - mu) * s
                xhat[i, j] = d
                y = d * gain[j] + offset[j]
                out[i, j] = y if y > 0.0 else 0.0
    return out_arr, xhat_arr, inv_arr


def layernorm_relu_backward(const double[:, ::1] dout, const double[:, ::1] out,
                            const double[:, ::1] xhat, const double[::1] inv_std,
                            const double[::1] gain):
    cdef Py_ssize_t n = dout.shape[0], h = dout.shape[1], i, j
    dz_arr = np.empty((n, h), dtype=np.float64)
    dgain_arr = np.empty((n, h), dtype=np.float64)
    dy_arr = np.empty((n, h), dtype=np.float64)
    cdef double[:, ::1] dz = dz_arr
    cdef double[:, ::1] dgain = dgain_arr
    cdef double[:, ::1] dy = dy_arr
    cdef double m1, m2, g, dx
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(h):
                g = dout[i, j] if out[i, j] > 0.0 else 0.0
                dy[i, j] = g
                dgain[i, j] = g * xhat[i, j]
                dx = g * gain[j]
                m1 += dx
                m2 += dx * xhat[i, j]
            m1 /= h
            m2 /= h
            for j in range(h):
                dx = dy[i, j] * gain[j]
                dz[i, j] = (dx - m1 - xhat[i, j] * m2) * inv_std[i]
    return dz_arr, dgain_arr, dy_arr
