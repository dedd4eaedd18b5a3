"""Pure-numpy implementations of the hot per-segment kernels.

All kernels operate on a flattened batch: the instances of B bags are packed
into one length-N axis, and ``offsets`` (int64, length B+1) marks the bag
boundaries. Every function here has a drop-in twin in the compiled extension
(``gmil._speedups``); :mod:`gmil.backend` picks one at import time.

Conventions: float64 throughout; a *_vjp function returns the gradient of a
scalar loss with respect to the kernel inputs given the gradient with respect
to its outputs.
"""

from __future__ import annotations

import numpy as np

# Divergence kind codes shared with the compiled core.
DIV_SQUARED_ERROR = 0
DIV_FORWARD_KL = 1
DIV_REVERSE_KL = 2


def _lengths(offsets):
    return np.diff(offsets)


def _expand(per_seg, offsets):
    """Broadcast one value per segment back to the flat instance axis."""
    return np.repeat(per_seg, _lengths(offsets))


def seg_sum(values, offsets):
    """Per-segment sum of a flat vector."""
    return np.add.reduceat(values, offsets[:-1])


def seg_softmax(scores, offsets):
    """Per-segment softmax (max-subtracted for overflow safety)."""
    high = np.maximum.reduceat(scores, offsets[:-1])
    e = np.exp(scores - _expand(high, offsets))
    return e / _expand(seg_sum(e, offsets), offsets)


def seg_softmax_vjp(probs, grad, offsets):
    """Gradient of scores given the gradient w.r.t. the softmax output."""
    inner = seg_sum(probs * grad, offsets)
    return probs * (grad - _expand(inner, offsets))


def seg_weighted_pool(feats, weights, offsets):
    """Per-segment weighted sum of rows: out[b] = sum_j w_j * feats[j]."""
    return np.add.reduceat(feats * weights[:, None], offsets[:-1], axis=0)


def seg_weighted_pool_vjp(feats, weights, offsets, grad_out):
    g = np.repeat(grad_out, _lengths(offsets), axis=0)
    return weights[:, None] * g, np.einsum("ij,ij->i", feats, g)


def seg_colmax(feats, offsets):
    """Per-segment columnwise max with the (flat) index of the first maximum."""
    n_seg = offsets.shape[0] - 1
    out = np.empty((n_seg, feats.shape[1]), dtype=np.float64)
    argmax = np.empty((n_seg, feats.shape[1]), dtype=np.int64)
    for b in range(n_seg):
        lo, hi = offsets[b], offsets[b + 1]
        block = feats[lo:hi]
        idx = block.argmax(axis=0)
        argmax[b] = idx + lo
        out[b] = block[idx, np.arange(feats.shape[1])]
    return out, argmax


def seg_colmax_vjp(argmax, grad_out, n_rows):
    grad = np.zeros((n_rows, grad_out.shape[1]), dtype=np.float64)
    cols = np.broadcast_to(np.arange(grad_out.shape[1]), argmax.shape)
    np.add.at(grad, (argmax.ravel(), cols.ravel()), grad_out.ravel())
    return grad


def _chain_coeffs(offsets, row_stochastic):
    """Neighbor weights of the normalized chain adjacency, flat layout.

    cl[j] multiplies g[j-1], cr[j] multiplies g[j+1]; both are zero across
    segment boundaries, so globally shifted adds never leak between bags.
    """
    lengths = _lengths(offsets)
    n = int(offsets[-1])
    degree = np.full(n, 2.0)
    starts = offsets[:-1]
    ends = offsets[1:] - 1
    degree[starts] = 1.0
    degree[ends] = 1.0
    degree[starts[lengths == 1]] = 0.0

    cl = np.zeros(n)
    cr = np.zeros(n)
    has_prev = np.ones(n, dtype=bool)
    has_prev[starts] = False
    has_next = np.ones(n, dtype=bool)
    has_next[ends] = False
    if row_stochastic:
        with np.errstate(divide="ignore"):
            inv = np.where(degree > 0, 1.0 / np.maximum(degree, 1.0), 0.0)
        cl[has_prev] = inv[has_prev]
        cr[has_next] = inv[has_next]
    else:
        sqrt_d = np.sqrt(np.maximum(degree, 1.0))
        prod_prev = np.empty(n)
        prod_prev[1:] = sqrt_d[1:] * sqrt_d[:-1]
        prod_prev[0] = 1.0
        cl[has_prev] = 1.0 / prod_prev[has_prev]
        prod_next = np.empty(n)
        prod_next[:-1] = sqrt_d[:-1] * sqrt_d[1:]
        prod_next[-1] = 1.0
        cr[has_next] = 1.0 / prod_next[has_next]
    return cl, cr


def _shift_down(x):
    out = np.zeros_like(x)
    out[1:] = x[:-1]
    return out


def _shift_up(x):
    out = np.zeros_like(x)
    out[:-1] = x[1:]
    return out


def _apply_chain(g, cl, cr):
    return cl[:, None] * _shift_down(g) + cr[:, None] * _shift_up(g)


def chain_smooth(feats, offsets, alpha, n_iter, row_stochastic):
    """Run g <- (1-alpha) * feats + alpha * A g for n_iter steps per segment.

    Returns the final iterate and the stack of intermediate iterates
    g_0 .. g_{T-1} needed by the backward pass.
    """
    cl, cr = _chain_coeffs(offsets, row_stochastic)
    stack = np.empty((n_iter, feats.shape[0], feats.shape[1]), dtype=np.float64)
    g = feats.astype(np.float64, copy=True)
    for t in range(n_iter):
        stack[t] = g
        g = (1.0 - alpha) * feats + alpha * _apply_chain(g, cl, cr)
    return g, stack


def chain_smooth_vjp(feats, offsets, alpha, n_iter, row_stochastic, stack, grad_out):
    """Gradients w.r.t. the input features and the mixing scalar alpha."""
    cl, cr = _chain_coeffs(offsets, row_stochastic)
    tl = _shift_down(cr)
    tr = _shift_up(cl)
    delta = np.asarray(grad_out, dtype=np.float64)
    grad_feats = np.zeros_like(feats, dtype=np.float64)
    grad_alpha = 0.0
    for t in range(n_iter - 1, -1, -1):
        a_gt = _apply_chain(stack[t], cl, cr)
        grad_alpha += float(np.sum(delta * (a_gt - feats)))
        grad_feats += (1.0 - alpha) * delta
        delta = alpha * (tl[:, None] * _shift_down(delta) + tr[:, None] * _shift_up(delta))
    grad_feats += delta
    return grad_feats, grad_alpha


def seg_positions(offsets):
    """1-based position of each instance within its segment."""
    n = int(offsets[-1])
    return np.arange(1, n + 1) - _expand(offsets[:-1], offsets)


def normal_reference_seg(attn, offsets, var_floor):
    """Discretized-normal reference per segment from the attention moments.

    Mean and variance of the attended position are taken under ``attn``; the
    normal pdf is evaluated at positions 1..S and renormalized (a per-segment
    softmax of the log densities, which drops the constant factor).
    """
    j = seg_positions(offsets).astype(np.float64)
    mean = seg_sum(j * attn, offsets)
    second = seg_sum(j * j * attn, offsets)
    var = np.maximum(second - mean * mean, var_floor)
    log_pdf = -((j - _expand(mean, offsets)) ** 2) / (2.0 * _expand(var, offsets))
    return seg_softmax(log_pdf, offsets)


def divergence_seg(kind, ref, attn, offsets, eps):
    """Per-segment divergence D(ref, attn) and its gradient w.r.t. attn.

    ref is treated as a constant (stop-gradient). kind is one of the DIV_*
    codes; logs are clamped at eps.
    """
    if kind == DIV_SQUARED_ERROR:
        diff = ref - attn
        return seg_sum(diff * diff, offsets), -2.0 * diff
    if kind == DIV_FORWARD_KL:
        ac = np.maximum(attn, eps)
        terms = np.where(ref > 0, ref * (np.log(np.maximum(ref, eps)) - np.log(ac)), 0.0)
        grad = np.where(attn > eps, -ref / ac, 0.0)
        return seg_sum(terms, offsets), grad
    if kind == DIV_REVERSE_KL:
        ac = np.maximum(attn, eps)
        rc = np.maximum(ref, eps)
        ratio = np.log(ac) - np.log(rc)
        grad = np.where(attn > eps, ratio + 1.0, ratio)
        return seg_sum(attn * ratio, offsets), grad
    raise ValueError(f"unknown divergence kind code {kind}")
