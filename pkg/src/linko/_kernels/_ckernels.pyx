# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled graph kernels. Same contracts as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

BACKEND = "cython"


def cooccurrence(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices, Py_ssize_t n):
    out = np.zeros((n, n), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] c = out
    cdef Py_ssize_t v, a, b, i, j
    with nogil:
        for v in range(indptr.shape[0] - 1):
            for a in range(indptr[v], indptr[v + 1]):
                i = indices[a]
                for b in range(indptr[v], indptr[v + 1]):
                    j = indices[b]
                    c[i, j] += 1
    return out


def segment_softmax(const double[:, ::1] scores, const cnp.int64_t[::1] seg_ptr):
    cdef Py_ssize_t E = scores.shape[0], H = scores.shape[1]
    out = np.empty((E, H), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t s, e, h, lo, hi
    cdef double mx, tot
    with nogil:
        for s in range(seg_ptr.shape[0] - 1):
            lo = seg_ptr[s]
            hi = seg_ptr[s + 1]
            for h in range(H):
                mx = scores[lo, h]
                for e in range(lo + 1, hi):
                    if scores[e, h] > mx:
                        mx = scores[e, h]
                tot = 0.0
                for e in range(lo, hi):
                    o[e, h] = exp(scores[e, h] - mx)
                    tot += o[e, h]
                for e in range(lo, hi):
                    o[e, h] /= tot
    return out


def segment_softmax_backward(const double[:, ::1] alpha, const double[:, ::1] grad_alpha,
                             const cnp.int64_t[::1] seg_ptr):
    cdef Py_ssize_t E = alpha.shape[0], H = alpha.shape[1]
    out = np.empty((E, H), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t s, e, h, lo, hi
    cdef double dot
    with nogil:
        for s in range(seg_ptr.shape[0] - 1):
            lo = seg_ptr[s]
            hi = seg_ptr[s + 1]
            for h in range(H):
                dot = 0.0
                for e in range(lo, hi):
                    dot += alpha[e, h] * grad_alpha[e, h]
                for e in range(lo, hi):
                    o[e, h] = alpha[e, h] * (grad_alpha[e, h] - dot)
    return out


def spmm_heads(const double[:, ::1] alpha, const cnp.int64_t[::1] src,
               const cnp.int64_t[::1] seg_ptr, const double[:, :, ::1] values):
    cdef Py_ssize_t S = seg_ptr.shape[0] - 1, H = values.shape[1], F = values.shape[2]
    out = np.zeros((S, H, F), dtype=np.float64)
    cdef double[:, :, ::1] o = out
    cdef Py_ssize_t s, e, h, f, q
    cdef double a
    with nogil:
        for s in range(S):
            for e in range(seg_ptr[s], seg_ptr[s + 1]):
                q = src[e]
                for h in range(H):
                    a = alpha[e, h]
                    for f in range(F):
                        o[s, h, f] += a * values[q, h, f]
    return out


def spmm_heads_backward(const double[:, ::1] alpha, const cnp.int64_t[::1] src,
                        const cnp.int64_t[::1] seg_ptr, const double[:, :, ::1] values,
                        const double[:, :, ::1] grad_out):
    cdef Py_ssize_t E = alpha.shape[0], S = seg_ptr.shape[0] - 1
    cdef Py_ssize_t H = values.shape[1], F = values.shape[2]
    ga = np.zeros((E, H), dtype=np.float64)
    gv = np.zeros((values.shape[0], H, F), dtype=np.float64)
    cdef double[:, ::1] gav = ga
    cdef double[:, :, ::1] gvv = gv
    cdef Py_ssize_t s, e, h, f, q
    cdef double a, acc
    with nogil:
        for s in range(S):
            for e in range(seg_ptr[s], seg_ptr[s + 1]):
                q = src[e]
                for h in range(H):
                    a = alpha[e, h]
                    acc = 0.0
                    for f in range(F):
                        acc += grad_out[s, h, f] * values[q, h, f]
                        gvv[q, h, f] += a * grad_out[s, h, f]
                    gav[e, h] = acc
    return ga, gv
