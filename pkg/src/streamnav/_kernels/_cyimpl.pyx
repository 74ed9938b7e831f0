# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Semantics match ``numpy_impl`` exactly; see that module.

The matrix products go through numpy (BLAS); what is compiled here is the
masked softmax, forward and backward, where the fallback pays for full-size
temporaries and exponentials of masked-out entries.
"""

from libc.math cimport exp, sqrt, INFINITY

import numpy as np

BACKEND = "cython"


def masked_softmax_fwd(const double[:, ::1] scores, const unsigned char[:, ::1] mask):
    cdef Py_ssize_t r = scores.shape[0], c = scores.shape[1], i, j
    out_arr = np.empty((r, c))
    cdef double[:, ::1] out = out_arr
    cdef double mx, s, e
    for i in range(r):
        mx = -INFINITY
        for j in range(c):
            if mask[i, j] and scores[i, j] > mx:
                mx = scores[i, j]
        s = 0.0
        for j in range(c):
            if mask[i, j]:
                e = exp(scores[i, j] - mx)
                out[i, j] = e
                s += e
            else:
                out[i, j] = 0.0
        for j in range(c):
            out[i, j] /= s
    return out_arr


def masked_softmax_bwd(const double[:, ::1] grad_out, const double[:, ::1] probs):
    cdef Py_ssize_t r = probs.shape[0], c = probs.shape[1], i, j
    out_arr = np.empty((r, c))
    cdef double[:, ::1] out = out_arr
    cdef double inner
    for i in range(r):
        inner = 0.0
        for j in range(c):
            inner += grad_out[i, j] * probs[i, j]
        for j in range(c):
            out[i, j] = probs[i, j] * (grad_out[i, j] - inner)
    return out_arr


cdef void _softmax3_inplace(double[:, :, ::1] scores,
                            const unsigned char[:, ::1] mask) noexcept nogil:
    """Masked softmax over the last axis for every (head, query) row;
    masked entries become exactly 0, permitted ones never see an exp of a
    masked score."""
    cdef Py_ssize_t nh = scores.shape[0], tq = scores.shape[1], tk = scores.shape[2]
    cdef Py_ssize_t h, i, j
    cdef double mx, s, p
    for h in range(nh):
        for i in range(tq):
            mx = -INFINITY
            for j in range(tk):
                if mask[i, j] and scores[h, i, j] > mx:
                    mx = scores[h, i, j]
            s = 0.0
            for j in range(tk):
                if mask[i, j]:
                    p = exp(scores[h, i, j] - mx)
                    scores[h, i, j] = p
                    s += p
                else:
                    scores[h, i, j] = 0.0
            for j in range(tk):
                scores[h, i, j] /= s


cdef void _softmax3_bwd_inplace(double[:, :, ::1] grad,
                                const double[:, :, ::1] probs,
                                double scale) noexcept nogil:
    """grad <- probs * (grad - sum(grad*probs)) * scale, rows of zeros stay 0."""
    cdef Py_ssize_t nh = probs.shape[0], tq = probs.shape[1], tk = probs.shape[2]
    cdef Py_ssize_t h, i, j
    cdef double inner, p
    for h in range(nh):
        for i in range(tq):
            inner = 0.0
            for j in range(tk):
                inner += grad[h, i, j] * probs[h, i, j]
            for j in range(tk):
                p = probs[h, i, j]
                grad[h, i, j] = p * (grad[h, i, j] - inner) * scale if p != 0.0 \
                    else 0.0


def attn_fwd(q, k, v, mask, Py_ssize_t n_heads):
    cdef Py_ssize_t tq = q.shape[0], d = q.shape[1], tk = k.shape[0]
    cdef Py_ssize_t hd = d // n_heads
    cdef double scale = 1.0 / sqrt(<double> hd)
    qh = q.reshape(tq, n_heads, hd).transpose(1, 0, 2)
    kh = k.reshape(tk, n_heads, hd).transpose(1, 2, 0)
    vh = v.reshape(tk, n_heads, hd).transpose(1, 0, 2)
    probs_arr = np.ascontiguousarray(qh @ kh)
    probs_arr *= scale
    cdef double[:, :, ::1] probs = probs_arr
    cdef const unsigned char[:, ::1] m = mask
    with nogil:
        _softmax3_inplace(probs, m)
    out = np.ascontiguousarray(
        (probs_arr @ vh).transpose(1, 0, 2).reshape(tq, d))
    return out, probs_arr


def attn_bwd(grad_out, q, k, v, probs, Py_ssize_t n_heads):
    cdef Py_ssize_t tq = q.shape[0], d = q.shape[1], tk = k.shape[0]
    cdef Py_ssize_t hd = d // n_heads
    cdef double scale = 1.0 / sqrt(<double> hd)
    gh = grad_out.reshape(tq, n_heads, hd).transpose(1, 0, 2)
    qh = q.reshape(tq, n_heads, hd).transpose(1, 0, 2)
    kh = k.reshape(tk, n_heads, hd).transpose(1, 0, 2)
    vh = v.reshape(tk, n_heads, hd).transpose(1, 0, 2)
    gscores_arr = np.ascontiguousarray(gh @ vh.transpose(0, 2, 1))
    cdef double[:, :, ::1] gview = gscores_arr
    cdef const double[:, :, ::1] pview = probs
    with nogil:
        _softmax3_bwd_inplace(gview, pview, scale)
    gq = np.ascontiguousarray((gscores_arr @ kh).transpose(1, 0, 2).reshape(tq, d))
    gk = np.ascontiguousarray(
        (gscores_arr.transpose(0, 2, 1) @ qh).transpose(1, 0, 2).reshape(tk, d))
    gv = np.ascontiguousarray(
        (probs.transpose(0, 2, 1) @ gh).transpose(1, 0, 2).reshape(tk, d))
    return gq, gk, gv
