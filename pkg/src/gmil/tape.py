"""Minimal reverse-mode automatic differentiation over numpy float64 arrays.

Covers exactly the operator set the pooling architectures need: dense linear
algebra, pointwise nonlinearities, softmax/layernorm, depthwise 1D
convolution, and the per-segment kernels from :mod:`gmil.backend` that act on
flattened variable-length bags. Each node stores a joint vector-Jacobian
product returning one gradient per parent; :func:`backward` runs a
deterministic iterative topological sweep.

Gradient flow is pruned through ``requires_grad``: constants (for example
raw features or reference distributions) never accumulate gradients and ops
whose inputs are all constant create constant outputs.
"""

import numpy as np

from . import backend


class Tensor:
    """A node in the computation graph wrapping a float64 ndarray."""

    __slots__ = ("data", "grad", "parents", "vjp", "requires_grad")

    def __init__(self, data, parents=(), vjp=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        flag = "param" if self.requires_grad and not self.parents else "node"
        return f"Tensor({flag}, shape={self.data.shape})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def constant(data):
    """Leaf node that never receives a gradient."""
    return Tensor(data)


def parameter(data):
    """Trainable leaf node."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    if any(p.requires_grad for p in parents):
        return Tensor(data, parents=tuple(parents), vjp=vjp, requires_grad=True)
    return Tensor(data)


def backward(root):
    """Accumulate gradients of ``root`` (summed over its entries) into every
    reachable leaf with ``requires_grad``."""
    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node.vjp is None or node.grad is None:
            continue
        for p, g in zip(node.parents, node.vjp(node.grad)):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            p.grad += g


def _unbroadcast(g, shape):
    """Reduce ``g`` back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(a.data - b.data, (a, b), vjp)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)

    def vjp(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), vjp)


def matmul(a, b):
    na, nb = a.data.ndim, b.data.ndim
    if na == 2 and nb == 2:
        def vjp(g):
            return g @ b.data.T, a.data.T @ g
    elif na == 2 and nb == 1:
        def vjp(g):
            return np.outer(g, b.data), a.data.T @ g
    elif na == 1 and nb == 1:
        def vjp(g):
            return g * b.data, g * a.data
    elif na == 3 and nb == 3:
        def vjp(g):
            return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g
    else:
        raise ValueError(f"unsupported matmul ranks {na} x {nb}")
    return _make(a.data @ b.data, (a, b), vjp)


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def softmax_last(a):
    """Softmax along the last axis (any rank)."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def layernorm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        g_x = inv * (gx_hat
                     - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return g_x, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), vjp)


def sum_all(a):
    return _make(a.data.sum(), (a,), lambda g: (np.full_like(a.data, float(g)),))


def mean_all(a):
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.full_like(a.data, float(g) / n),))


def sum_axis(a, axis):
    def vjp(g):
        return (np.repeat(np.expand_dims(g, axis), a.data.shape[axis], axis=axis),)

    return _make(a.data.sum(axis=axis), (a,), vjp)


def mean_axis(a, axis):
    n = a.data.shape[axis]
    return mul(sum_axis(a, axis), Tensor(1.0 / n))


def reshape(a, shape):
    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _make(a.data.reshape(shape), (a,), vjp)


def transpose(a, axes):
    inverse = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _make(a.data.transpose(axes), (a,), vjp)


def concat0(tensors):
    sizes = [t.data.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return _make(np.concatenate([t.data for t in tensors], axis=0), tuple(tensors), vjp)


def take(a, idx):
    """Basic indexing (ints/slices); gradient scatters back into place."""

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), vjp)


def depthwise_conv1d_same(x, w):
    """Per-channel 1D convolution along axis 0 with zero 'same' padding.

    x: (S, M), w: (K, M) with K odd. out[s, m] = sum_k w[k, m] * xpad[s+k, m].
    """
    s, m = x.data.shape
    k = w.data.shape[0]
    if k % 2 != 1:
        raise ValueError("depthwise_conv1d_same requires an odd kernel size")
    pad = k // 2
    xpad = np.zeros((s + 2 * pad, m))
    xpad[pad:pad + s] = x.data
    out = np.zeros((s, m))
    for i in range(k):
        out += w.data[i] * xpad[i:i + s]

    def vjp(g):
        gxpad = np.zeros_like(xpad)
        gw = np.empty_like(w.data)
        for i in range(k):
            gxpad[i:i + s] += w.data[i] * g
            gw[i] = (g * xpad[i:i + s]).sum(axis=0)
        return gxpad[pad:pad + s], gw

    return _make(out, (x, w), vjp)


def seg_softmax(scores, offsets):
    """Independent softmax inside each segment of a flat vector."""
    probs = backend.seg_softmax(scores.data, offsets)

    def vjp(g):
        return (backend.seg_softmax_vjp(probs, np.ascontiguousarray(g), offsets),)

    return _make(probs, (scores,), vjp)


def seg_weighted_pool(feats, weights, offsets):
    """Per-segment weighted sum of rows: out[b] = sum_j w_j * feats[j]."""
    out = backend.seg_weighted_pool(feats.data, weights.data, offsets)

    def vjp(g):
        return backend.seg_weighted_pool_vjp(
            feats.data, weights.data, offsets, np.ascontiguousarray(g))

    return _make(out, (feats, weights), vjp)


def seg_colmax(feats, offsets):
    """Per-segment column-wise max (first occurrence wins on ties).

    Returns (tensor, argmax) where argmax holds the flat winning row per
    (segment, column); callers use it for post-hoc attention.
    """
    out, argmax = backend.seg_colmax(feats.data, offsets)

    def vjp(g):
        return (backend.seg_colmax_vjp(argmax, np.ascontiguousarray(g),
                                       feats.data.shape[0]),)

    return _make(out, (feats,), vjp), argmax


def chain_smooth(feats, alpha, offsets, n_iter, row_stochastic=False):
    """Iterated neighbor mixing g <- (1-a)*feats + a*A*g per segment chain."""
    out, stack = backend.chain_smooth(feats.data, offsets, float(alpha.data),
                                      n_iter, row_stochastic)

    def vjp(g):
        gf, ga = backend.chain_smooth_vjp(feats.data, offsets, float(alpha.data),
                                          n_iter, row_stochastic, stack,
                                          np.ascontiguousarray(g))
        return gf, np.asarray(ga)

    return _make(out, (feats, alpha), vjp)


def bce_with_logits(logits, targets):
    """Per-element binary cross-entropy; stable for large |logit|."""
    x = logits.data
    y = np.asarray(targets, dtype=np.float64)
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * (_sigmoid(x) - y),)

    return _make(out, (logits,), vjp)


def divergence(kind, ref, attn, offsets, eps):
    """Per-segment divergence D(ref, attn) with the reference held constant.

    Returns one value per segment; the gradient flows to ``attn`` only via
    the closed-form expressions in the kernel backend.
    """
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    values, grad_flat = backend.divergence_seg(kind, ref, attn.data, offsets, eps)
    lengths = np.diff(offsets)

    def vjp(g):
        return (np.repeat(g, lengths) * grad_flat,)

    return _make(values, (attn,), vjp)
