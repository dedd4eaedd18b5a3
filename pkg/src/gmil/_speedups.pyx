# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-segment kernels (drop-in twins of gmil._kernels_np).

Same flattened-batch layout: N instances across B bags, int64 offsets of
length B+1. See the numpy module for the semantics; this file only changes
the execution strategy.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

DIV_SQUARED_ERROR = 0
DIV_FORWARD_KL = 1
DIV_REVERSE_KL = 2


def seg_sum(double[::1] values, long long[::1] offsets):
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    out = np.empty(n_seg, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t b, j
    cdef double acc
    for b in range(n_seg):
        acc = 0.0
        for j in range(offsets[b], offsets[b + 1]):
            acc += values[j]
        o[b] = acc
    return out


def seg_softmax(double[::1] scores, long long[::1] offsets):
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    out = np.empty(scores.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t b, j
    cdef double high, total
    for b in range(n_seg):
        high = scores[offsets[b]]
        for j in range(offsets[b] + 1, offsets[b + 1]):
            if scores[j] > high:
                high = scores[j]
        total = 0.0
        for j in range(offsets[b], offsets[b + 1]):
            o[j] = exp(scores[j] - high)
            total += o[j]
        for j in range(offsets[b], offsets[b + 1]):
            o[j] /= total
    return out


def seg_softmax_vjp(double[::1] probs, double[::1] grad, long long[::1] offsets):
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    out = np.empty(probs.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t b, j
    cdef double inner
    for b in range(n_seg):
        inner = 0.0
        for j in range(offsets[b], offsets[b + 1]):
            inner += probs[j] * grad[j]
        for j in range(offsets[b], offsets[b + 1]):
            o[j] = probs[j] * (grad[j] - inner)
    return out


def seg_weighted_pool(double[:, ::1] feats, double[::1] weights, long long[::1] offsets):
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    cdef Py_ssize_t m = feats.shape[1]
    out = np.zeros((n_seg, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t b, j, k
    cdef double w
    for b in range(n_seg):
        for j in range(offsets[b], offsets[b + 1]):
            w = weights[j]
            for k in range(m):
                o[b, k] += w * feats[j, k]
    return out


def seg_weighted_pool_vjp(double[:, ::1] feats, double[::1] weights,
                          long long[::1] offsets, double[:, ::1] grad_out):
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t m = feats.shape[1]
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    grad_feats = np.empty((n, m), dtype=np.float64)
    grad_weights = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] gf = grad_feats
    cdef double[::1] gw = grad_weights
    cdef Py_ssize_t b, j, k
    cdef double w, acc
    for b in range(n_seg):
        for j in range(offsets[b], offsets[b + 1]):
            w = weights[j]
            acc = 0.0
            for k in range(m):
                gf[j, k] = w * grad_out[b, k]
                acc += feats[j, k] * grad_out[b, k]
            gw[j] = acc
    return grad_feats, grad_weights


def seg_colmax(double[:, ::1] feats, long long[::1] offsets):
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    cdef Py_ssize_t m = feats.shape[1]
    out = np.empty((n_seg, m), dtype=np.float64)
    argmax = np.empty((n_seg, m), dtype=np.int64)
    cdef double[:, ::1] o = out
    cdef long long[:, ::1] am = argmax
    cdef Py_ssize_t b, j, k
    for b in range(n_seg):
        for k in range(m):
            o[b, k] = feats[offsets[b], k]
            am[b, k] = offsets[b]
        for j in range(offsets[b] + 1, offsets[b + 1]):
            for k in range(m):
                if feats[j, k] > o[b, k]:
                    o[b, k] = feats[j, k]
                    am[b, k] = j
    return out, argmax


def seg_colmax_vjp(long long[:, ::1] argmax, double[:, ::1] grad_out, Py_ssize_t n_rows):
    cdef Py_ssize_t m = grad_out.shape[1]
    grad = np.zeros((n_rows, m), dtype=np.float64)
    cdef double[:, ::1] g = grad
    cdef Py_ssize_t b, k
    for b in range(argmax.shape[0]):
        for k in range(m):
            g[argmax[b, k], k] += grad_out[b, k]
    return grad


cdef void _fill_chain_coeffs(long long[::1] offsets, bint row_stochastic,
                             double[::1] cl, double[::1] cr):
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    cdef Py_ssize_t b, j, lo, hi, s
    cdef double d_own, d_prev, d_next
    for b in range(n_seg):
        lo = offsets[b]
        hi = offsets[b + 1]
        s = hi - lo
        for j in range(lo, hi):
            cl[j] = 0.0
            cr[j] = 0.0
        if s == 1:
            continue
        for j in range(lo, hi):
            d_own = 2.0
            if j == lo or j == hi - 1:
                d_own = 1.0
            if row_stochastic:
                if j > lo:
                    cl[j] = 1.0 / d_own
                if j < hi - 1:
                    cr[j] = 1.0 / d_own
            else:
                if j > lo:
                    d_prev = 2.0
                    if j - 1 == lo:
                        d_prev = 1.0
                    cl[j] = 1.0 / sqrt(d_own * d_prev)
                if j < hi - 1:
                    d_next = 2.0
                    if j + 1 == hi - 1:
                        d_next = 1.0
                    cr[j] = 1.0 / sqrt(d_own * d_next)


def chain_smooth(double[:, ::1] feats, long long[::1] offsets, double alpha,
                 Py_ssize_t n_iter, bint row_stochastic):
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t m = feats.shape[1]
    cl_arr = np.empty(n, dtype=np.float64)
    cr_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] cl = cl_arr
    cdef double[::1] cr = cr_arr
    _fill_chain_coeffs(offsets, row_stochastic, cl, cr)

    stack = np.empty((n_iter, n, m), dtype=np.float64)
    out = np.array(feats, dtype=np.float64)
    nxt = np.empty((n, m), dtype=np.float64)
    cdef double[:, :, ::1] st = stack
    cdef double[:, ::1] g = out
    cdef double[:, ::1] gn = nxt
    cdef Py_ssize_t t, j, k
    cdef double mix
    for t in range(n_iter):
        for j in range(n):
            for k in range(m):
                st[t, j, k] = g[j, k]
        for j in range(n):
            for k in range(m):
                mix = 0.0
                if cl[j] != 0.0:
                    mix += cl[j] * g[j - 1, k]
                if cr[j] != 0.0:
                    mix += cr[j] * g[j + 1, k]
                gn[j, k] = (1.0 - alpha) * feats[j, k] + alpha * mix
        g, gn = gn, g
    if n_iter % 2 == 1:
        out, nxt = nxt, out
    return out, stack


def chain_smooth_vjp(double[:, ::1] feats, long long[::1] offsets, double alpha,
                     Py_ssize_t n_iter, bint row_stochastic,
                     double[:, :, ::1] stack, double[:, ::1] grad_out):
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t m = feats.shape[1]
    cl_arr = np.empty(n, dtype=np.float64)
    cr_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] cl = cl_arr
    cdef double[::1] cr = cr_arr
    _fill_chain_coeffs(offsets, row_stochastic, cl, cr)

    grad_feats = np.zeros((n, m), dtype=np.float64)
    delta = np.array(grad_out, dtype=np.float64)
    delta_next = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] gf = grad_feats
    cdef double[:, ::1] d = delta
    cdef double[:, ::1] dn = delta_next
    cdef double grad_alpha = 0.0
    cdef Py_ssize_t t, j, k
    cdef double mix, tl, tr
    for t in range(n_iter - 1, -1, -1):
        for j in range(n):
            for k in range(m):
                mix = 0.0
                if cl[j] != 0.0:
                    mix += cl[j] * stack[t, j - 1, k]
                if cr[j] != 0.0:
                    mix += cr[j] * stack[t, j + 1, k]
                grad_alpha += d[j, k] * (mix - feats[j, k])
                gf[j, k] += (1.0 - alpha) * d[j, k]
        # delta <- alpha * A^T delta; A^T[j, j-1] = cr[j-1], A^T[j, j+1] = cl[j+1]
        for j in range(n):
            for k in range(m):
                mix = 0.0
                if j > 0 and cr[j - 1] != 0.0:
                    mix += cr[j - 1] * d[j - 1, k]
                if j < n - 1 and cl[j + 1] != 0.0:
                    mix += cl[j + 1] * d[j + 1, k]
                dn[j, k] = alpha * mix
        d, dn = dn, d
    for j in range(n):
        for k in range(m):
            gf[j, k] += d[j, k]
    return grad_feats, grad_alpha


def seg_positions(long long[::1] offsets):
    cdef Py_ssize_t n = offsets[offsets.shape[0] - 1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t b, j
    for b in range(offsets.shape[0] - 1):
        for j in range(offsets[b], offsets[b + 1]):
            o[j] = <double> (j - offsets[b] + 1)
    return out


def normal_reference_seg(double[::1] attn, long long[::1] offsets, double var_floor):
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    out = np.empty(attn.shape[0], dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t b, j
    cdef double mean, second, var, pos, high, total
    for b in range(n_seg):
        mean = 0.0
        second = 0.0
        for j in range(offsets[b], offsets[b + 1]):
            pos = <double> (j - offsets[b] + 1)
            mean += pos * attn[j]
            second += pos * pos * attn[j]
        var = second - mean * mean
        if var < var_floor:
            var = var_floor
        high = -1e300
        for j in range(offsets[b], offsets[b + 1]):
            pos = <double> (j - offsets[b] + 1)
            o[j] = -((pos - mean) * (pos - mean)) / (2.0 * var)
            if o[j] > high:
                high = o[j]
        total = 0.0
        for j in range(offsets[b], offsets[b + 1]):
            o[j] = exp(o[j] - high)
            total += o[j]
        for j in range(offsets[b], offsets[b + 1]):
            o[j] /= total
    return out


def divergence_seg(int kind, double[::1] ref, double[::1] attn,
                   long long[::1] offsets, double eps):
    cdef Py_ssize_t n_seg = offsets.shape[0] - 1
    values = np.zeros(n_seg, dtype=np.float64)
    grad = np.empty(attn.shape[0], dtype=np.float64)
    cdef double[::1] v = values
    cdef double[::1] g = grad
    cdef Py_ssize_t b, j
    cdef double diff, ac, rc, ratio, acc
    for b in range(n_seg):
        acc = 0.0
        if kind == 0:
            for j in range(offsets[b], offsets[b + 1]):
                diff = ref[j] - attn[j]
                acc += diff * diff
                g[j] = -2.0 * diff
        elif kind == 1:
            for j in range(offsets[b], offsets[b + 1]):
                ac = attn[j] if attn[j] > eps else eps
                if ref[j] > 0.0:
                    rc = ref[j] if ref[j] > eps else eps
                    acc += ref[j] * (log(rc) - log(ac))
                if attn[j] > eps:
                    g[j] = -ref[j] / ac
                else:
                    g[j] = 0.0
        elif kind == 2:
            for j in range(offsets[b], offsets[b + 1]):
                ac = attn[j] if attn[j] > eps else eps
                rc = ref[j] if ref[j] > eps else eps
                ratio = log(ac) - log(rc)
                acc += attn[j] * ratio
                if attn[j] > eps:
                    g[j] = ratio + 1.0
                else:
                    g[j] = ratio
        else:
            raise ValueError(f"unknown divergence kind code {kind}")
        v[b] = acc
    return values, grad
