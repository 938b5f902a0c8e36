# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: XNOR-popcount sign matmul, same-padding conv2d and
its two adjoints, and the fused three-moment reduction used by the theory lab.

Every function here has a numpy twin in ``surge._fallback`` with the same
signature; ``surge.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t

cnp.import_array()

cdef extern from *:
    """
    static inline int surge_popcount64(unsigned long long v) {
    #if defined(__GNUC__) || defined(__clang__)
        return __builtin_popcountll(v);
    #else
        int c = 0;
        while (v) { v &= v - 1; c++; }
        return c;
    #endif
    }
    """
    int surge_popcount64(unsigned long long v) nogil


cdef void _pack_rows(const double[:, ::1] src, uint64_t[:, ::1] dst) noexcept nogil:
    cdef Py_ssize_t i, j, n = src.shape[0], k = src.shape[1]
    cdef uint64_t word
    for i in range(n):
        for j in range(dst.shape[1]):
            dst[i, j] = 0
        for j in range(k):
            if src[i, j] > 0.0:
                dst[i, j >> 6] |= (<uint64_t>1) << (j & 63)


def sign_matmul(a, b):
    """Return ``a @ b.T`` for matrices with entries in {-1, +1}.

    Rows are packed into 64-bit words; each inner product is
    ``k - 2 * popcount(a_row XOR b_row)``.
    """
    cdef const double[:, ::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = av.shape[0], m = bv.shape[0], k = av.shape[1]
    if bv.shape[1] != k:
        raise ValueError(f"sign_matmul: inner dimensions differ ({k} vs {bv.shape[1]})")
    cdef Py_ssize_t words = (k + 63) // 64
    pa_arr = np.empty((n, max(words, 1)), dtype=np.uint64)
    pb_arr = np.empty((m, max(words, 1)), dtype=np.uint64)
    cdef uint64_t[:, ::1] pa = pa_arr
    cdef uint64_t[:, ::1] pb = pb_arr
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, w
    cdef long mismatches
    with nogil:
        _pack_rows(av, pa)
        _pack_rows(bv, pb)
        for i in range(n):
            for j in range(m):
                mismatches = 0
                for w in range(words):
                    mismatches += surge_popcount64(pa[i, w] ^ pb[j, w])
                out[i, j] = <double>(k - 2 * mismatches)
    return out_arr


def conv2d_same(x, w):
    """Stride-1 cross-correlation with zero padding that preserves H and W.

    x: (N, C, H, W); w: (O, C, k, k) with odd k. Returns (N, O, H, W).
    """
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t O = wv.shape[0], K = wv.shape[2], p = K // 2
    out_arr = np.zeros((N, O, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, o, c, i, j, di, dj, si, sj
    cdef double acc
    with nogil:
        for n in range(N):
            for o in range(O):
                for i in range(H):
                    for j in range(W):
                        acc = 0.0
                        for c in range(C):
                            for di in range(K):
                                si = i + di - p
                                if si < 0 or si >= H:
                                    continue
                                for dj in range(K):
                                    sj = j + dj - p
                                    if sj < 0 or sj >= W:
                                        continue
                                    acc = acc + xv[n, c, si, sj] * wv[o, c, di, dj]
                        out[n, o, i, j] = acc
    return out_arr


def conv2d_same_grad_input(g, w):
    """Adjoint of ``conv2d_same`` with respect to its input."""
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef Py_ssize_t N = gv.shape[0], O = gv.shape[1], H = gv.shape[2], W = gv.shape[3]
    cdef Py_ssize_t C = wv.shape[1], K = wv.shape[2], p = K // 2
    out_arr = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, o, c, i, j, di, dj, si, sj
    cdef double gval
    with nogil:
        for n in range(N):
            for o in range(O):
                for i in range(H):
                    for j in range(W):
                        gval = gv[n, o, i, j]
                        if gval == 0.0:
                            continue
                        for c in range(C):
                            for di in range(K):
                                si = i + di - p
                                if si < 0 or si >= H:
                                    continue
                                for dj in range(K):
                                    sj = j + dj - p
                                    if sj < 0 or sj >= W:
                                        continue
                                    out[n, c, si, sj] += gval * wv[o, c, di, dj]
    return out_arr


def conv2d_same_grad_weight(x, g, int ksize):
    """Adjoint of ``conv2d_same`` with respect to its (O, C, k, k) kernel."""
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef Py_ssize_t O = gv.shape[1], K = ksize, p = ksize // 2
    out_arr = np.zeros((O, C, K, K), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, o, c, i, j, di, dj, si, sj
    cdef double acc
    with nogil:
        for o in range(O):
            for c in range(C):
                for di in range(K):
                    for dj in range(K):
                        acc = 0.0
                        for n in range(N):
                            for i in range(H):
                                si = i + di - p
                                if si < 0 or si >= H:
                                    continue
                                for j in range(W):
                                    sj = j + dj - p
                                    if sj < 0 or sj >= W:
                                        continue
                                    acc = acc + gv[n, o, i, j] * xv[n, c, si, sj]
                        out[o, c, di, dj] = acc
    return out_arr


def pair_moments(g_b, g_a, g_star):
    """One pass over paired samples returning the three empirical moments

        A = mean ||g_b - g*||^2,  B = mean <g_b - g*, g_a>,  C = mean ||g_a||^2

    so that the empirical error at scale lam is ``A + 2 lam B + lam^2 C``.
    """
    cdef const double[:, ::1] bv = np.ascontiguousarray(g_b, dtype=np.float64)
    cdef const double[:, ::1] av = np.ascontiguousarray(g_a, dtype=np.float64)
    cdef const double[::1] sv = np.ascontiguousarray(g_star, dtype=np.float64)
    cdef Py_ssize_t n = bv.shape[0], d = bv.shape[1], i, j
    if av.shape[0] != n or av.shape[1] != d or sv.shape[0] != d:
        raise ValueError("pair_moments: sample shapes do not match")
    cdef double sa = 0.0, sb = 0.0, sc = 0.0, r, q
    with nogil:
        for i in range(n):
            for j in range(d):
                r = bv[i, j] - sv[j]
                q = av[i, j]
                sa = sa + r * r
                sb = sb + r * q
                sc = sc + q * q
    return sa / n, sb / n, sc / n
