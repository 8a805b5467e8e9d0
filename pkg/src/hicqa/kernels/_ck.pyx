# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled segment/scatter kernels; semantics match kernels._np exactly.

Index validity is enforced element-wise here (the branch is effectively
free next to the row copy), so callers need no separate range scan.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"

ctypedef fused floating:
    float
    double


def scatter_add(floating[:, ::1] out, long long[::1] idx, floating[:, ::1] src):
    cdef Py_ssize_t e, j, row
    cdef Py_ssize_t n_edges = idx.shape[0]
    cdef Py_ssize_t n = out.shape[0]
    cdef Py_ssize_t d = src.shape[1]
    for e in range(n_edges):
        row = idx[e]
        if row < 0 or row >= n:
            raise IndexError(f"scatter_add: index {row} out of range [0, {n})")
        for j in range(d):
            out[row, j] += src[e, j]
    return np.asarray(out)


def segment_sum(floating[:, ::1] src, long long[::1] idx, Py_ssize_t n):
    cdef Py_ssize_t d = src.shape[1]
    out_arr = np.zeros((n, d), dtype=np.asarray(src).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t e, j, row
    cdef Py_ssize_t n_edges = idx.shape[0]
    for e in range(n_edges):
        row = idx[e]
        if row < 0 or row >= n:
            raise IndexError(f"segment_sum: index {row} out of range [0, {n})")
        for j in range(d):
            out[row, j] += src[e, j]
    return out_arr


def segment_max(floating[:, ::1] src, long long[::1] idx, Py_ssize_t n):
    cdef Py_ssize_t d = src.shape[1]
    out_arr = np.full((n, d), -np.inf, dtype=np.asarray(src).dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t e, j, row
    cdef Py_ssize_t n_edges = idx.shape[0]
    for e in range(n_edges):
        row = idx[e]
        if row < 0 or row >= n:
            raise IndexError(f"segment_max: index {row} out of range [0, {n})")
        for j in range(d):
            if src[e, j] > out[row, j]:
                out[row, j] = src[e, j]
    return out_arr


def segment_counts(long long[::1] idx, Py_ssize_t n):
    out_arr = np.zeros(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t e, row
    for e in range(idx.shape[0]):
        row = idx[e]
        if row < 0 or row >= n:
            raise IndexError(f"segment_counts: index {row} out of range [0, {n})")
        out[row] += 1
    return out_arr
