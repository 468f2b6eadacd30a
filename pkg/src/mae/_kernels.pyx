# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels. Same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt, INFINITY

cnp.import_array()


def masked_softmax(double[:, ::1] x, mask=None):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    cdef double[:, ::1] out = np.empty((rows, cols), dtype=np.float64)
    cdef const unsigned char[:, ::1] m
    cdef bint has_mask = mask is not None
    cdef double big, total, v
    if has_mask:
        m = np.ascontiguousarray(mask, dtype=np.uint8)
    for i in range(rows):
        big = -INFINITY
        for j in range(cols):
            if (not has_mask or m[i, j]) and x[i, j] > big:
                big = x[i, j]
        total = 0.0
        for j in range(cols):
            if has_mask and not m[i, j]:
                out[i, j] = 0.0
            else:
                v = exp(x[i, j] - big)
                out[i, j] = v
                total += v
        if total == 0.0:
            total = 1.0
        for j in range(cols):
            out[i, j] /= total
    return np.asarray(out)


def softmax_backward(double[:, ::1] y, double[:, ::1] g):
    cdef Py_ssize_t rows = y.shape[0], cols = y.shape[1], i, j
    cdef double[:, ::1] out = np.empty((rows, cols), dtype=np.float64)
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += g[i, j] * y[i, j]
        for j in range(cols):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return np.asarray(out)


def layer_norm_forward(double[:, ::1] x, double eps):
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], i, j
    cdef double[:, ::1] out = np.empty((rows, cols), dtype=np.float64)
    cdef double[::1] inv = np.empty(rows, dtype=np.float64)
    cdef double mean, var, c, s
    for i in range(rows):
        mean = 0.0
        for j in range(cols):
            mean += x[i, j]
        mean /= cols
        var = 0.0
        for j in range(cols):
            c = x[i, j] - mean
            var += c * c
        var /= cols
        s = 1.0 / sqrt(var + eps)
        inv[i] = s
        for j in range(cols):
            out[i, j] = (x[i, j] - mean) * s
    return np.asarray(out), np.asarray(inv)


def layer_norm_backward(double[:, ::1] xhat, double[::1] inv_std, double[:, ::1] g):
    cdef Py_ssize_t rows = xhat.shape[0], cols = xhat.shape[1], i, j
    cdef double[:, ::1] out = np.empty((rows, cols), dtype=np.float64)
    cdef double mg, mgx
    for i in range(rows):
        mg = 0.0
        mgx = 0.0
        for j in range(cols):
            mg += g[i, j]
            mgx += g[i, j] * xhat[i, j]
        mg /= cols
        mgx /= cols
        for j in range(cols):
            out[i, j] = (g[i, j] - mg - xhat[i, j] * mgx) * inv_std[i]
    return np.asarray(out)


def sample_categorical(double[:, ::1] probs, double[::1] u):
    cdef Py_ssize_t rows = probs.shape[0], cols = probs.shape[1], i, j
    cdef cnp.int64_t[::1] out = np.empty(rows, dtype=np.int64)
    cdef double[::1] cdf = np.empty(cols, dtype=np.float64)
    cdef double run, total
    for i in range(rows):
        run = 0.0
        for j in range(cols):
            run += probs[i, j]
            cdf[j] = run
        total = cdf[cols - 1]
        out[i] = 0
        for j in range(cols):
            if cdf[j] / total > u[i]:
                out[i] = j
                break
    return np.asarray(out)
