"""Pooling architectures: max, mean, ABMIL, TransMIL-lite, chain smoothing.

All models share one calling convention: a batch of bags is flattened into a
single (N, M) feature matrix plus an int64 offsets vector of length B+1, and
``Model.forward_flat`` returns per-bag logits together with flat per-instance
attention. Attention rows always sum to 1. TransMIL is evaluated bag by bag
inside the batch; the other poolings vectorize across the whole batch.

Trainable parameters live in a name -> Tensor dict. Initialization draws
projection weights from N(0, 1/fan_in); biases, the class token and layer
norm shifts start at zero, layer norm gains at one, and the smoothing mixers
at alpha_raw = 0 so sigmoid(alpha_raw) = 0.5.
"""

import dataclasses
import json
import zipfile

import numpy as np

from . import backend, tape

POOLINGS = ("max", "mean", "abmil", "transmil")
SMOOTHS = ("none", "smap", "smtp")

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters; validated on construction."""

    pooling: str
    smooth: str = "none"
    attention_hidden_dim: int = 128
    heads: int = 8
    model_dim: int = 768
    ppeg_kernels: tuple = (3, 5, 7)
    sm_iterations: int = 10
    sm_row_stochastic: bool = False

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ModelError(f"unknown pooling {self.pooling!r}")
        if self.smooth not in SMOOTHS:
            raise ModelError(f"unknown smooth {self.smooth!r}")
        if self.smooth == "smap" and self.pooling != "abmil":
            raise ModelError("smap smoothing requires abmil pooling")
        if self.smooth == "smtp" and self.pooling != "transmil":
            raise ModelError("smtp smoothing requires transmil pooling")
        if self.model_dim < 1:
            raise ModelError("model_dim must be positive")
        if self.pooling == "transmil":
            if self.heads < 1 or self.model_dim % self.heads != 0:
                raise ModelError("model_dim must be divisible by heads")
            if any(k < 1 or k % 2 == 0 for k in self.ppeg_kernels):
                raise ModelError("ppeg kernels must be odd positive integers")
        if self.pooling == "abmil" and self.attention_hidden_dim < 1:
            raise ModelError("attention_hidden_dim must be positive")
        if self.sm_iterations < 1:
            raise ModelError("sm_iterations must be positive")
        object.__setattr__(self, "ppeg_kernels", tuple(int(k) for k in self.ppeg_kernels))

    def to_json_dict(self):
        d = dataclasses.asdict(self)
        d["ppeg_kernels"] = list(self.ppeg_kernels)
        return d

    @classmethod
    def from_json_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown ModelSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclasses.dataclass
class ForwardResult:
    """Single-bag forward outputs (plain numpy, no gradient graph).

    ``attention`` is the length-S localization vector; for transmil it is the
    head-averaged class-token row with the class-token self entry removed and
    renormalized, and ``head_attention`` additionally carries the H x S
    per-head rows (each renormalized over instance positions).
    """

    bag_embedding: np.ndarray
    attention: np.ndarray
    logit: float
    probability: float
    head_attention: np.ndarray = None


@dataclasses.dataclass
class BatchForward:
    """Differentiable batch outputs in the flattened-segment layout."""

    logits: tape.Tensor
    attention: tape.Tensor
    offsets: np.ndarray
    head_attention: list = None
    bag_embeddings: list = None


def make_offsets(lengths):
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return offsets


def flatten_bags(feature_list):
    """Stack per-bag (S_b, M) arrays into (N, M) float64 plus offsets."""
    offsets = make_offsets([f.shape[0] for f in feature_list])
    flat = np.concatenate([np.asarray(f, dtype=np.float64) for f in feature_list],
                          axis=0)
    return np.ascontiguousarray(flat), offsets


class Model:
    """A pooling architecture plus linear classifier head."""

    def __init__(self, spec, params):
        self.spec = spec
        self.params = params

    @classmethod
    def create(cls, spec, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x6D1]))
        m = spec.model_dim

        def dense(shape, fan_in):
            return tape.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))

        params = {}
        if spec.pooling == "abmil":
            hidden = spec.attention_hidden_dim
            params["att_V"] = dense((hidden, m), m)
            params["att_w"] = dense((hidden,), hidden)
            if spec.smooth == "smap":
                params["sm_alpha_raw"] = tape.parameter(0.0)
        elif spec.pooling == "transmil":
            params["token"] = tape.parameter(np.zeros(m))
            for block in ("b1", "b2"):
                params[f"{block}_ln_gain"] = tape.parameter(np.ones(m))
                params[f"{block}_ln_bias"] = tape.parameter(np.zeros(m))
                for name in ("q", "k", "v", "o"):
                    params[f"{block}_w{name}"] = dense((m, m), m)
                    params[f"{block}_b{name}"] = tape.parameter(np.zeros(m))
                if spec.smooth == "smtp":
                    params[f"{block}_sm_alpha_raw"] = tape.parameter(0.0)
            for k in spec.ppeg_kernels:
                params[f"ppeg_k{k}"] = dense((k, m), k)
        params["cls_w"] = dense((m,), m)
        params["cls_b"] = tape.parameter(0.0)
        return cls(spec, params)

    def penalized_names(self):
        """Parameters covered by the L1 penalty: projection and classifier
        weight matrices. Biases, layer norms, the class token and the
        smoothing mixers are exempt."""
        keep = []
        for name in self.params:
            is_weight = (name == "cls_w"
                         or name in ("att_V", "att_w")
                         or name.startswith("ppeg_")
                         or name[2:] in ("_wq", "_wk", "_wv", "_wo"))
            if is_weight:
                keep.append(name)
        return keep

    def state_arrays(self):
        return {name: np.array(t.data) for name, t in self.params.items()}

    def load_state(self, arrays):
        for name, t in self.params.items():
            if name not in arrays:
                raise ModelError(f"checkpoint missing parameter {name}")
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.data.shape:
                raise ModelError(f"shape mismatch for {name}: "
                                 f"{value.shape} vs {t.data.shape}")
            t.data = value
        extra = set(arrays) - set(self.params)
        if extra:
            raise ModelError(f"checkpoint has unknown parameters {sorted(extra)}")

    # -- forward passes ----------------------------------------------------

    def forward_flat(self, flat_feats, offsets):
        if flat_feats.shape[1] != self.spec.model_dim:
            raise ModelError(f"feature dim {flat_feats.shape[1]} does not match "
                             f"model_dim {self.spec.model_dim}")
        if self.spec.pooling == "mean":
            return self._forward_mean(flat_feats, offsets)
        if self.spec.pooling == "max":
            return self._forward_max(flat_feats, offsets)
        if self.spec.pooling == "abmil":
            return self._forward_abmil(flat_feats, offsets)
        return self._forward_transmil(flat_feats, offsets)

    def _classify(self, pooled):
        logits = tape.matmul(pooled, self.params["cls_w"]) + self.params["cls_b"]
        return logits

    def _forward_mean(self, flat_feats, offsets):
        lengths = np.diff(offsets)
        weights = tape.constant(np.repeat(1.0 / lengths, lengths))
        feats = tape.constant(flat_feats)
        pooled = tape.seg_weighted_pool(feats, weights, offsets)
        return BatchForward(self._classify(pooled), weights, offsets)

    def _forward_max(self, flat_feats, offsets):
        feats = tape.constant(flat_feats)
        pooled, argmax = tape.seg_colmax(feats, offsets)
        attn = np.zeros(flat_feats.shape[0])
        np.add.at(attn, argmax.ravel(), 1.0 / flat_feats.shape[1])
        return BatchForward(self._classify(pooled), tape.constant(attn), offsets)

    def _forward_abmil(self, flat_feats, offsets):
        feats = tape.constant(flat_feats)
        if self.spec.smooth == "smap":
            alpha = tape.sigmoid(self.params["sm_alpha_raw"])
            feats = tape.chain_smooth(feats, alpha, offsets,
                                      self.spec.sm_iterations,
                                      self.spec.sm_row_stochastic)
        hidden = tape.tanh(tape.matmul(feats, tape.transpose(self.params["att_V"], (1, 0))))
        scores = tape.matmul(hidden, self.params["att_w"])
        attn = tape.seg_softmax(scores, offsets)
        pooled = tape.seg_weighted_pool(feats, attn, offsets)
        return BatchForward(self._classify(pooled), attn, offsets)

    def _forward_transmil(self, flat_feats, offsets):
        logits, attns, head_rows, embeds = [], [], [], []
        for b in range(len(offsets) - 1):
            x = tape.constant(flat_feats[offsets[b]:offsets[b + 1]])
            logit, attn, heads, z = self._transmil_bag(x)
            logits.append(tape.reshape(logit, (1,)))
            attns.append(attn)
            head_rows.append(heads)
            embeds.append(z)
        flat_attn = tape.concat0(attns)
        return BatchForward(tape.concat0(logits), flat_attn, offsets,
                            head_rows, embeds)

    def _mhsa_block(self, tokens, block):
        """Pre-LN multi-head self-attention with residual connection."""
        p = self.params
        n, m = tokens.data.shape
        h = self.spec.heads
        dh = m // h
        normed = tape.layernorm(tokens, p[f"{block}_ln_gain"], p[f"{block}_ln_bias"])

        def heads_of(name):
            proj = tape.matmul(normed, tape.transpose(p[f"{block}_w{name}"], (1, 0)))
            proj = proj + p[f"{block}_b{name}"]
            return tape.transpose(tape.reshape(proj, (n, h, dh)), (1, 0, 2))

        q, k, v = heads_of("q"), heads_of("k"), heads_of("v")
        scores = tape.matmul(q, tape.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
        attn_map = tape.softmax_last(scores)
        ctx = tape.matmul(attn_map, v)
        merged = tape.reshape(tape.transpose(ctx, (1, 0, 2)), (n, m))
        out = tape.matmul(merged, tape.transpose(p[f"{block}_wo"], (1, 0)))
        out = out + p[f"{block}_bo"]
        return tokens + out, attn_map

    def _smooth_instances(self, tokens, block):
        """Chain-smooth the instance rows; the class token passes through."""
        s = tokens.data.shape[0] - 1
        alpha = tape.sigmoid(self.params[f"{block}_sm_alpha_raw"])
        inst = tape.chain_smooth(tokens[1:], alpha,
                                 np.array([0, s], dtype=np.int64),
                                 self.spec.sm_iterations,
                                 self.spec.sm_row_stochastic)
        return tape.concat0([tokens[0:1], inst])

    def _ppeg(self, tokens):
        """Add summed depthwise convolutions to the non-class-token rows."""
        inst = tokens[1:]
        total = inst
        for k in self.spec.ppeg_kernels:
            total = total + tape.depthwise_conv1d_same(inst, self.params[f"ppeg_k{k}"])
        return tape.concat0([tokens[0:1], total])

    def _transmil_bag(self, x):
        s = x.data.shape[0]
        token = tape.reshape(self.params["token"], (1, self.spec.model_dim))
        tokens = tape.concat0([token, x])
        tokens, _ = self._mhsa_block(tokens, "b1")
        if self.spec.smooth == "smtp":
            tokens = self._smooth_instances(tokens, "b1")
        tokens = self._ppeg(tokens)
        tokens, attn_map = self._mhsa_block(tokens, "b2")
        if self.spec.smooth == "smtp":
            tokens = self._smooth_instances(tokens, "b2")
        z = tokens[0]
        logit = tape.matmul(z, self.params["cls_w"]) + self.params["cls_b"]

        # class-token query row, averaged over heads, self entry dropped
        cls_row = attn_map[:, 0, :]
        mean_row = tape.mean_axis(cls_row, 0)
        inst_row = mean_row[1:]
        attn = inst_row / tape.sum_all(inst_row)
        head_inst = cls_row[:, 1:]
        head_sums = tape.reshape(tape.sum_axis(head_inst, 1), (self.spec.heads, 1))
        head_attn = head_inst / head_sums
        return logit, attn, head_attn, z

    def forward(self, features):
        """Single-bag forward returning plain numpy outputs."""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ModelError("features must be a (S, M) matrix")
        flat = np.ascontiguousarray(features)
        offsets = np.array([0, features.shape[0]], dtype=np.int64)
        out = self.forward_flat(flat, offsets)
        logit = float(out.logits.data[0])
        head = out.head_attention[0].data if out.head_attention else None
        return ForwardResult(
            bag_embedding=self._embed(flat, offsets, out),
            attention=np.array(out.attention.data),
            logit=logit,
            probability=float(_sigmoid_scalar(logit)),
            head_attention=None if head is None else np.array(head),
        )

    def _embed(self, flat, offsets, out):
        spec = self.spec
        if spec.pooling == "mean":
            return flat.mean(axis=0)
        if spec.pooling == "max":
            return flat.max(axis=0)
        if spec.pooling == "abmil":
            feats = flat
            if spec.smooth == "smap":
                alpha = float(_sigmoid_scalar(self.params["sm_alpha_raw"].data))
                feats, _ = backend.chain_smooth(feats, offsets, alpha,
                                                spec.sm_iterations,
                                                spec.sm_row_stochastic)
            return backend.seg_weighted_pool(feats, out.attention.data, offsets)[0]
        return np.array(out.bag_embeddings[0].data)


def _sigmoid_scalar(x):
    x = float(x)
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


# -- single-bag functional front ends -------------------------------------


def _zero_classifier(m):
    return {"cls_w": np.zeros(m), "cls_b": 0.0}


def _result_from_pooled(z, attention, params, head_attention=None):
    logit = float(np.asarray(z) @ np.asarray(params["cls_w"], dtype=np.float64)
                  + float(params["cls_b"]))
    return ForwardResult(
        bag_embedding=np.asarray(z, dtype=np.float64),
        attention=np.asarray(attention, dtype=np.float64),
        logit=logit,
        probability=_sigmoid_scalar(logit),
        head_attention=head_attention,
    )


def mean_pool(features, params=None):
    """Uniform-attention pooling; with no params the classifier is zero."""
    features = np.asarray(features, dtype=np.float64)
    s = features.shape[0]
    if s < 1:
        raise ModelError("empty bag")
    params = params or _zero_classifier(features.shape[1])
    return _result_from_pooled(features.mean(axis=0), np.full(s, 1.0 / s), params)


def max_pool(features, params=None):
    """Element-wise max pooling with post-hoc argmax-count attention."""
    features = np.asarray(features, dtype=np.float64)
    s, m = features.shape
    if s < 1:
        raise ModelError("empty bag")
    params = params or _zero_classifier(m)
    z = features.max(axis=0)
    attn = np.bincount(features.argmax(axis=0), minlength=s) / m
    return _result_from_pooled(z, attn, params)


def abmil_forward(features, params):
    """Attention MLP scoring e_j = w.tanh(V h_j), softmax, weighted pool."""
    features = np.asarray(features, dtype=np.float64)
    v = np.asarray(params["att_V"], dtype=np.float64)
    w = np.asarray(params["att_w"], dtype=np.float64)
    if v.shape[1] != features.shape[1] or w.shape[0] != v.shape[0]:
        raise ModelError("attention parameter shapes do not match features")
    scores = np.tanh(features @ v.T) @ w
    shifted = np.exp(scores - scores.max())
    attn = shifted / shifted.sum()
    return _result_from_pooled(attn @ features, attn, params)


def transmil_forward(features, params, spec=None):
    """Class-token transformer forward; see Model for the full layout."""
    features = np.asarray(features, dtype=np.float64)
    if spec is None:
        spec = ModelSpec(pooling="transmil", model_dim=features.shape[1])
    model = Model.create(spec, seed=0)
    model.load_state({k: np.asarray(v, dtype=np.float64) for k, v in params.items()})
    return model.forward(features)


def smooth_operator(features, alpha_raw, n_iterations=10, row_stochastic=False):
    """Iterated chain-graph smoothing with mixing sigmoid(alpha_raw)."""
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.shape[0] < 1:
        raise ModelError("empty bag")
    offsets = np.array([0, features.shape[0]], dtype=np.int64)
    alpha = _sigmoid_scalar(alpha_raw)
    out, _ = backend.chain_smooth(features, offsets, alpha, int(n_iterations),
                                  row_stochastic)
    return out


def classifier(z, params):
    """Linear head: logit = w.z + b, probability = sigmoid(logit)."""
    z = np.asarray(z, dtype=np.float64)
    logit = float(z @ np.asarray(params["cls_w"], dtype=np.float64)
                  + float(params["cls_b"]))
    return logit, _sigmoid_scalar(logit)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, model):
    """Versioned parameter archive with the ModelSpec stored alongside."""
    meta = {"format_version": CHECKPOINT_VERSION,
            "model_spec": model.spec.to_json_dict()}
    arrays = model.state_arrays()
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=2, sort_keys=True))
        for name in sorted(arrays):
            with zf.open(f"param/{name}.npy", "w") as fh:
                np.save(fh, arrays[name])


def load_checkpoint(path):
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ModelError(f"unsupported checkpoint version "
                             f"{meta.get('format_version')!r}")
        spec = ModelSpec.from_json_dict(meta["model_spec"])
        spec_dict = {}
        for info in zf.namelist():
            if info.startswith("param/") and info.endswith(".npy"):
                with zf.open(info) as fh:
                    spec_dict[info[len("param/"):-len(".npy")]] = np.load(fh)
    model = Model.create(spec, seed=0)
    model.load_state(spec_dict)
    return model
