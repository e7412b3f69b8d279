# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled kernels: causal attention and the BPE inner loops.

Contracts mirror the fallbacks in planact.kernels exactly; attention
agrees to floating-point tolerance, the BPE primitives bit for bit.
Attention matmuls go through BLAS dgemm, the causal softmax and its
Jacobian-vector product stay in C so no masked [S, S] temporaries are
materialised per head.
"""

from collections import Counter

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

cdef double NEG_INF = -np.inf


# BLAS is column-major; a row-major product C = A @ B is computed as
# C^T = B^T A^T by handing the row-major buffers straight to dgemm with
# swapped operand order and the row-major trailing dimension as ld.
cdef inline void _gemm(char ta, char tb, int m, int n, int kk,
                       double *a, int lda, double *b, int ldb,
                       double *c, int ldc) noexcept nogil:
    cdef double one = 1.0, zero = 0.0
    dgemm(&ta, &tb, &m, &n, &kk, &one, a, &lda, b, &ldb, &zero, c, &ldc)


def attn_forward(q, k, v):
    """Causal softmax attention over [B, H, S, dh]; returns (out, probs)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=4] qa = np.ascontiguousarray(q)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] ka = np.ascontiguousarray(k)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] va = np.ascontiguousarray(v)
    cdef Py_ssize_t B = qa.shape[0]
    cdef Py_ssize_t H = qa.shape[1]
    cdef int S = <int> qa.shape[2]
    cdef int dh = <int> qa.shape[3]
    cdef cnp.ndarray[cnp.float64_t, ndim=4] out = np.empty((B, H, S, dh))
    cdef cnp.ndarray[cnp.float64_t, ndim=4] probs = np.empty((B, H, S, S))
    cdef double scale = 1.0 / sqrt(<double> dh)
    cdef Py_ssize_t b, h, i, j
    cdef double m, z, s
    cdef double *pr

    for b in range(B):
        for h in range(H):
            # probs[b, h] <- q[b, h] @ k[b, h]^T, full S x S; rows are
            # softmaxed in place below and the acausal half zeroed.
            _gemm(b'T', b'N', S, S, dh,
                  &ka[b, h, 0, 0], dh, &qa[b, h, 0, 0], dh,
                  &probs[b, h, 0, 0], S)
            for i in range(S):
                pr = &probs[b, h, i, 0]
                m = NEG_INF
                for j in range(i + 1):
                    s = pr[j] * scale
                    pr[j] = s
                    if s > m:
                        m = s
                z = 0.0
                for j in range(i + 1):
                    s = exp(pr[j] - m)
                    pr[j] = s
                    z += s
                for j in range(i + 1):
                    pr[j] /= z
                for j in range(i + 1, S):
                    pr[j] = 0.0
            _gemm(b'N', b'N', dh, S, S,
                  &va[b, h, 0, 0], dh, &probs[b, h, 0, 0], S,
                  &out[b, h, 0, 0], dh)
    return out, probs


def attn_backward(dout, q, k, v, probs):
    """Gradients of attn_forward given the saved softmax weights."""
    cdef cnp.ndarray[cnp.float64_t, ndim=4] da = np.ascontiguousarray(dout)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] qa = np.ascontiguousarray(q)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] ka = np.ascontiguousarray(k)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] va = np.ascontiguousarray(v)
    cdef cnp.ndarray[cnp.float64_t, ndim=4] pa = np.ascontiguousarray(probs)
    cdef Py_ssize_t B = qa.shape[0]
    cdef Py_ssize_t H = qa.shape[1]
    cdef int S = <int> qa.shape[2]
    cdef int dh = <int> qa.shape[3]
    cdef cnp.ndarray[cnp.float64_t, ndim=4] dq = np.empty((B, H, S, dh))
    cdef cnp.ndarray[cnp.float64_t, ndim=4] dk = np.empty((B, H, S, dh))
    cdef cnp.ndarray[cnp.float64_t, ndim=4] dv = np.empty((B, H, S, dh))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] ds = np.empty((S, S))
    cdef double scale = 1.0 / sqrt(<double> dh)
    cdef Py_ssize_t b, h, i, j
    cdef double row_dot
    cdef double *dsr
    cdef double *pr

    for b in range(B):
        for h in range(H):
            # ds <- dout @ v^T, then the softmax JVP row by row:
            # ds[i, j] = p[i, j] * (dp[i, j] - sum_j dp p) * scale.
            _gemm(b'T', b'N', S, S, dh,
                  &va[b, h, 0, 0], dh, &da[b, h, 0, 0], dh,
                  &ds[0, 0], S)
            for i in range(S):
                dsr = &ds[i, 0]
                pr = &pa[b, h, i, 0]
                row_dot = 0.0
                for j in range(i + 1):
                    row_dot += dsr[j] * pr[j]
                for j in range(i + 1):
                    dsr[j] = pr[j] * (dsr[j] - row_dot) * scale
                for j in range(i + 1, S):
                    dsr[j] = 0.0
            _gemm(b'N', b'N', dh, S, S,
                  &ka[b, h, 0, 0], dh, &ds[0, 0], S,
                  &dq[b, h, 0, 0], dh)
            _gemm(b'N', b'T', dh, S, S,
                  &qa[b, h, 0, 0], dh, &ds[0, 0], S,
                  &dk[b, h, 0, 0], dh)
            _gemm(b'N', b'T', dh, S, S,
                  &da[b, h, 0, 0], dh, &pa[b, h, 0, 0], S,
                  &dv[b, h, 0, 0], dh)
    return dq, dk, dv


def pair_counts(seqs):
    """Counts of adjacent symbol pairs over int32 sequences -> Counter."""
    cdef dict counts = {}
    cdef cnp.ndarray[cnp.int32_t, ndim=1] s
    cdef Py_ssize_t i, n
    cdef tuple key
    for seq in seqs:
        s = seq
        n = s.shape[0]
        for i in range(n - 1):
            key = (int(s[i]), int(s[i + 1]))
            if key in counts:
                counts[key] = counts[key] + 1
            else:
                counts[key] = 1
    return Counter(counts)


def merge_pair(cnp.ndarray[cnp.int32_t, ndim=1] seq, int a, int b,
               int new_id):
    """Replace every non-overlapping left-to-right (a, b) with new_id."""
    cdef Py_ssize_t n = seq.shape[0]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] out = np.empty(n, dtype=np.int32)
    cdef Py_ssize_t i = 0, m = 0
    while i < n:
        if i + 1 < n and seq[i] == a and seq[i + 1] == b:
            out[m] = new_id
            i += 2
        else:
            out[m] = seq[i]
            i += 1
        m += 1
    return out[:m].copy()


def encode_ranked(cnp.ndarray[cnp.int32_t, ndim=1] seq, dict ranks):
    """Greedy BPE encode: repeatedly apply the lowest-rank merge present."""
    cdef cnp.ndarray[cnp.int32_t, ndim=1] s = seq.copy()
    cdef cnp.ndarray[cnp.int32_t, ndim=1] out
    cdef Py_ssize_t i, m, n
    cdef long best_rank, best_a, best_b
    cdef int new_id
    cdef bint found
    cdef tuple hit

    n = s.shape[0]
    while n > 1:
        found = False
        best_rank = 0
        best_a = 0
        best_b = 0
        for i in range(n - 1):
            hit = ranks.get((int(s[i]), int(s[i + 1])))
            if hit is not None and (not found or <long> hit[0] < best_rank):
                found = True
                best_rank = <long> hit[0]
                best_a = s[i]
                best_b = s[i + 1]
        if not found:
            break
        new_id = <int> ranks[(best_a, best_b)][1]
        out = np.empty(n, dtype=np.int32)
        i = 0
        m = 0
        while i < n:
            if i + 1 < n and s[i] == best_a and s[i + 1] == best_b:
                out[m] = new_id
                i += 2
            else:
                out[m] = s[i]
                i += 1
            m += 1
        s = out[:m]
        n = m
    return s.copy()
