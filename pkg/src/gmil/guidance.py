"""Reference distributions and divergence penalties for attention guidance.

The guided objective is BCE(y, y_hat) + lambda * D(r, a), applied to every
bag. The reference r is always treated as a constant: for the moment-matched
normal reference it is rebuilt from the current attention before each
backward pass, and gradients of D flow through the attention argument only.
"""

import dataclasses

import numpy as np

from . import backend

DIVERGENCES = ("squared_error", "forward_kl", "reverse_kl")
REFERENCES = ("none", "normal_guidance", "centered_gaussian", "label_guidance")

_DIV_CODES = {
    "squared_error": backend.DIV_SQUARED_ERROR,
    "forward_kl": backend.DIV_FORWARD_KL,
    "reverse_kl": backend.DIV_REVERSE_KL,
}


class GuidanceError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ReferenceDistribution:
    """A probability vector over instance positions plus its provenance."""

    r: np.ndarray
    kind: str
    stop_gradient: bool = True

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        if r.ndim != 1 or r.size < 1:
            raise GuidanceError("reference must be a nonempty vector")
        if np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
            raise GuidanceError("reference must be a probability vector")
        if self.kind not in REFERENCES[1:]:
            raise GuidanceError(f"unknown reference kind {self.kind!r}")
        object.__setattr__(self, "r", r)


@dataclasses.dataclass(frozen=True)
class GuidanceSpec:
    """How (and whether) to regularize attention.

    ``reference='none'`` or ``strength=0`` disables the penalty. The default
    divergence is the forward KL at strength 1.
    """

    reference: str = "normal_guidance"
    divergence: str = "forward_kl"
    strength: float = 1.0
    epsilon: float = 1e-12
    variance_floor: float = 0.25

    def __post_init__(self):
        if self.reference not in REFERENCES:
            raise GuidanceError(f"unknown reference {self.reference!r}")
        if self.divergence not in DIVERGENCES:
            raise GuidanceError(f"unknown divergence {self.divergence!r}")
        if self.strength < 0:
            raise GuidanceError("strength must be nonnegative")
        if self.epsilon <= 0:
            raise GuidanceError("epsilon must be positive")
        if self.variance_floor <= 0:
            raise GuidanceError("variance_floor must be positive")

    @property
    def active(self):
        return self.reference != "none" and self.strength > 0

    def to_json_dict(self):
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("strength")
        return d

    @classmethod
    def from_json_dict(cls, d):
        d = dict(d)
        if "lambda" in d:
            if "strength" in d:
                raise GuidanceError("give either 'lambda' or 'strength', not both")
            d["strength"] = d.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise GuidanceError(f"unknown GuidanceSpec keys: {sorted(unknown)}")
        return cls(**d)


def centered_gaussian_reference(s):
    """Unit-variance Gaussian over positions 1..S centered on the middle."""
    if s < 1:
        raise GuidanceError("S must be >= 1")
    j = np.arange(1, s + 1, dtype=np.float64)
    log_r = -0.5 * (j - s / 2.0) ** 2
    r = np.exp(log_r - log_r.max())
    return ReferenceDistribution(r / r.sum(), kind="centered_gaussian")


def normal_reference(a, variance_floor=0.25):
    """Discretized normal matching the first two moments of attention ``a``.

    Positions are 1-based; the variance is floored at ``variance_floor``.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 1 or a.size < 1:
        raise GuidanceError("attention must be a nonempty vector")
    if abs(a.sum() - 1.0) > 1e-6 or np.any(a < 0):
        raise GuidanceError("attention must be a probability vector")
    offsets = np.array([0, a.size], dtype=np.int64)
    r = backend.normal_reference_seg(a, offsets, float(variance_floor))
    return ReferenceDistribution(r, kind="normal_guidance")


def label_reference(instance_labels, bag_label, s=None):
    """Uniform over positive instances (positive bag) or all instances."""
    labels = np.asarray(instance_labels)
    if s is None:
        s = labels.size
    if labels.size != s:
        raise GuidanceError("instance label count does not match S")
    if bag_label == 0:
        if labels.any():
            raise GuidanceError("negative bag with positive instance labels")
        r = np.full(s, 1.0 / s)
    else:
        pos = labels.astype(bool)
        count = int(pos.sum())
        if count == 0:
            raise GuidanceError("positive bag with no positive instance labels")
        r = np.where(pos, 1.0 / count, 0.0)
    return ReferenceDistribution(r, kind="label_guidance")


def divergence(kind, r, a, epsilon=1e-12):
    """D(r, a) plus its exact gradient with respect to ``a`` (r constant).

    squared_error: sum (r_j - a_j)^2
    forward_kl:    sum r_j log(r_j / max(a_j, eps))
    reverse_kl:    sum a_j log(max(a_j, eps) / max(r_j, eps))
    """
    if kind not in DIVERGENCES:
        raise GuidanceError(f"unknown divergence {kind!r}")
    r = np.ascontiguousarray(r, dtype=np.float64)
    a = np.ascontiguousarray(a, dtype=np.float64)
    if r.shape != a.shape:
        raise GuidanceError("reference and attention lengths differ")
    offsets = np.array([0, a.size], dtype=np.int64)
    values, grad = backend.divergence_seg(_DIV_CODES[kind], r, a, offsets,
                                          float(epsilon))
    return float(values[0]), grad


def reference_for(spec, attention, s=None, instance_labels=None, bag_label=None):
    """Build the reference named by ``spec.reference`` for one bag."""
    if spec.reference == "normal_guidance":
        return normal_reference(attention, spec.variance_floor)
    if spec.reference == "centered_gaussian":
        return centered_gaussian_reference(len(attention) if s is None else s)
    if spec.reference == "label_guidance":
        return label_reference(instance_labels, bag_label, s)
    raise GuidanceError("no reference requested")


def guided_loss(y, y_hat, references, attentions, spec):
    """Scalar objective for one bag: BCE plus the (possibly multi-head)
    divergence penalty averaged over heads."""
    y_hat = float(np.clip(y_hat, 1e-12, 1.0 - 1e-12))
    bce = -(y * np.log(y_hat) + (1.0 - y) * np.log(1.0 - y_hat))
    if not spec.active:
        return float(bce)
    if isinstance(references, ReferenceDistribution):
        references = [references]
        attentions = [attentions]
    if len(references) != len(attentions):
        raise GuidanceError("need one attention row per reference")
    total = 0.0
    for ref, a in zip(references, attentions):
        value, _ = divergence(spec.divergence, ref.r, a, spec.epsilon)
        total += value
    return float(bce + spec.strength * total / len(references))
