"""Upper-bound estimators that use instance labels deliberately.

Three tools: block statistics over instance-label runs (runs of positives
separated by at most 3 negatives merge into one block), a windowed instance
classifier (1D convolution of kernel R over a zero-padded window per
instance, then a linear head), and a bag classifier over ROI-pooled
embeddings (positive bags pool uniformly over their positive instances;
negative bags borrow a donor positive bag's weight profile by piecewise
linear interpolation on the normalized index axis).

On the synthetic benchmark the exact posteriors from :mod:`gmil.synth` are
the ceilings and nothing is trained.
"""

import dataclasses
import hashlib

import numpy as np

from . import metrics, models, synth, tape

GAP_MERGE = 3


class CeilingError(ValueError):
    pass


@dataclasses.dataclass
class BlockStats:
    """Summary of positive-instance blocks across a dataset."""

    n_bags: int
    per_bag_block_count: list
    block_lengths: list
    length_mean: float
    length_min: int
    length_p25: float
    length_p50: float
    length_p75: float
    length_max: int
    block_fraction_mean: float
    r_estimate: int

    def to_json_dict(self):
        d = dataclasses.asdict(self)
        d.pop("per_bag_block_count")
        d.pop("block_lengths")
        return d


def find_blocks(instance_labels, gap=GAP_MERGE):
    """Group positive positions into blocks, merging across <= ``gap``
    consecutive negatives. Returns a list of (start, end, positive_count)
    with inclusive 0-based span bounds."""
    positions = np.flatnonzero(np.asarray(instance_labels) != 0)
    if positions.size == 0:
        return []
    blocks = []
    start = prev = positions[0]
    count = 1
    for p in positions[1:]:
        if p - prev - 1 <= gap:
            prev = p
            count += 1
        else:
            blocks.append((int(start), int(prev), int(count)))
            start = prev = p
            count = 1
    blocks.append((int(start), int(prev), int(count)))
    return blocks


def block_stats(dataset, gap=GAP_MERGE):
    """Per-bag block counts and the pooled block-length distribution.

    Only bags containing at least one positive instance contribute; block
    length means the number of positive instances in the block.
    """
    counts, lengths, fractions = [], [], []
    for bag in dataset.bags:
        if bag.instance_labels is None:
            raise CeilingError(f"bag {bag.bag_id} lacks instance labels")
        blocks = find_blocks(bag.instance_labels, gap)
        if not blocks:
            continue
        counts.append(len(blocks))
        lengths.extend(b[2] for b in blocks)
        fractions.append(sum(b[2] for b in blocks) / bag.features.shape[0])
    if not lengths:
        raise CeilingError("no positive instances in dataset")
    arr = np.asarray(lengths, dtype=np.float64)
    return BlockStats(
        n_bags=len(counts),
        per_bag_block_count=counts,
        block_lengths=lengths,
        length_mean=float(arr.mean()),
        length_min=int(arr.min()),
        length_p25=float(np.percentile(arr, 25)),
        length_p50=float(np.percentile(arr, 50)),
        length_p75=float(np.percentile(arr, 75)),
        length_max=int(arr.max()),
        block_fraction_mean=float(np.mean(fractions)),
        r_estimate=int(round(arr.mean())),
    )


# -- windowed instance ceiling ---------------------------------------------


def window_matrix(features, r):
    """Per-instance windows of ``r`` consecutive rows, zero-padded at the
    edges. Even ``r`` centers left: floor(r/2) rows before the instance."""
    features = np.asarray(features, dtype=np.float64)
    s, m = features.shape
    before = r // 2
    after = r - 1 - before
    padded = np.zeros((s + before + after, m))
    padded[before:before + s] = features
    view = np.lib.stride_tricks.sliding_window_view(padded, (r, m))
    return view.reshape(s, r * m)


@dataclasses.dataclass
class WindowedClassifier:
    """conv (kernel R, C channels) + linear head, all linear maps."""

    r: int
    conv_w: np.ndarray
    conv_b: np.ndarray
    head_w: np.ndarray
    head_b: float

    def scores(self, features):
        x = window_matrix(features, self.r)
        return (x @ self.conv_w + self.conv_b) @ self.head_w + self.head_b

    def probabilities(self, features):
        s = self.scores(features)
        return 1.0 / (1.0 + np.exp(-np.clip(s, -500, 500)))


def _sgd_step(params, velocity, lr, momentum):
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocity[name]
        v *= momentum
        v -= lr * g
        p.data = p.data + v
        p.grad = None


def train_instance_ceiling(train_dataset, val_dataset, r, channels=64,
                           learning_rate=0.01, momentum=0.9, epochs=50,
                           batch_bags=32, seed=0):
    """Fit the windowed classifier with BCE on instance labels.

    Early stopping keeps the epoch with the best validation instance AUROC.
    """
    for ds in (train_dataset, val_dataset):
        for bag in ds.bags:
            if bag.instance_labels is None:
                raise CeilingError(f"bag {bag.bag_id} lacks instance labels")
    m = train_dataset.dim
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCE1]))
    params = {
        "conv_w": tape.parameter(rng.normal(0, 1.0 / np.sqrt(r * m), (r * m, channels))),
        "conv_b": tape.parameter(np.zeros(channels)),
        "head_w": tape.parameter(rng.normal(0, 1.0 / np.sqrt(channels), channels)),
        "head_b": tape.parameter(0.0),
    }
    velocity = {n: np.zeros_like(p.data) for n, p in params.items()}

    def forward(x):
        hidden = tape.matmul(tape.constant(x), params["conv_w"]) + params["conv_b"]
        return tape.matmul(hidden, params["head_w"]) + params["head_b"]

    val_x = np.concatenate([window_matrix(b.features, r) for b in val_dataset.bags])
    val_y = np.concatenate([b.instance_labels for b in val_dataset.bags]).astype(np.int64)
    if val_y.min() == val_y.max():
        raise CeilingError("validation instances need both classes")

    best = (-np.inf, None)
    bags = train_dataset.bags
    for epoch in range(epochs):
        order = rng.permutation(len(bags))
        for start in range(0, len(order), batch_bags):
            chunk = order[start:start + batch_bags]
            x = np.concatenate([window_matrix(bags[i].features, r) for i in chunk])
            y = np.concatenate([bags[i].instance_labels for i in chunk])
            loss = tape.mean_all(tape.bce_with_logits(forward(x), y.astype(np.float64)))
            if not np.isfinite(loss.data):
                raise CeilingError(f"non-finite loss at epoch {epoch}")
            tape.backward(loss)
            _sgd_step(params, velocity, learning_rate, momentum)
        logits = forward(val_x).data
        auc = metrics.auroc(logits, val_y)
        if auc > best[0]:
            best = (auc, {n: np.array(p.data) for n, p in params.items()})
    state = best[1]
    return WindowedClassifier(r=r, conv_w=state["conv_w"], conv_b=state["conv_b"],
                              head_w=state["head_w"], head_b=float(state["head_b"]))


def instance_ceiling(datasets, r=None, source="oracle", config=None, **fit_kwargs):
    """Localization report for the instance-level ceiling on the test split.

    ``source='oracle'`` scores test bags with the exact posterior from the
    generator config; ``source='trained'`` fits the windowed classifier on
    the train/val splits first.
    """
    test = datasets["test"]
    if source == "oracle":
        if config is None:
            raise CeilingError("oracle source needs the generator config")
        scores = {bag.bag_id: synth.instance_posterior(bag.features, config)
                  for bag in test.bags}
        classifier = None
    elif source == "trained":
        if r is None:
            raise CeilingError("trained source needs the window size R")
        classifier = train_instance_ceiling(datasets["train"], datasets["val"],
                                            r, **fit_kwargs)
        scores = {bag.bag_id: classifier.scores(bag.features) for bag in test.bags}
    else:
        raise CeilingError(f"unknown source {source!r}")
    report = metrics.localization_report(scores, test)
    return classifier, report


# -- ROI-pooled bag ceiling ------------------------------------------------


def _normalized_axis(s):
    if s == 1:
        return np.array([0.5])
    return np.arange(s, dtype=np.float64) / (s - 1)


def interpolate_weights(donor_labels, target_s):
    """Map a donor bag's uniform-over-positives profile onto another length.

    Both index axes are normalized to [0, 1]; the profile is interpolated
    piecewise linearly and renormalized. Degenerate all-zero interpolations
    fall back to uniform weights.
    """
    donor_labels = np.asarray(donor_labels, dtype=np.float64)
    count = donor_labels.sum()
    if count == 0:
        raise CeilingError("donor bag has no positive instances")
    profile = donor_labels / count
    u_donor = _normalized_axis(donor_labels.size)
    u_target = _normalized_axis(target_s)
    weights = np.interp(u_target, u_donor, profile)
    total = weights.sum()
    if total <= 0:
        return np.full(target_s, 1.0 / target_s)
    return weights / total


def _donor_rng(seed, bag_id):
    digest = hashlib.sha256(bag_id.encode("utf-8")).digest()
    token = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([int(seed), token]))


def roi_pooled_embeddings(dataset, seed=0, uniform_negative=False):
    """Pool each bag with ROI-matched weights; returns (X, y) arrays.

    Positive bags average their positively labeled instances. Negative bags
    either copy a seeded donor positive bag's interpolated profile or, with
    ``uniform_negative``, use uniform weights.
    """
    positives = [b for b in dataset.bags if b.bag_label == 1]
    if not positives:
        raise CeilingError("no positive bags to sample donors from")
    for bag in dataset.bags:
        if bag.instance_labels is None:
            raise CeilingError(f"bag {bag.bag_id} lacks instance labels")
    rows, labels = [], []
    for bag in dataset.bags:
        feats = np.asarray(bag.features, dtype=np.float64)
        s = feats.shape[0]
        if bag.bag_label == 1:
            mask = bag.instance_labels.astype(bool)
            if not mask.any():
                raise CeilingError(f"positive bag {bag.bag_id} has no "
                                   f"positive instances")
            weights = mask / mask.sum()
        elif uniform_negative:
            weights = np.full(s, 1.0 / s)
        else:
            donor = positives[int(_donor_rng(seed, bag.bag_id).integers(len(positives)))]
            weights = interpolate_weights(donor.instance_labels, s)
        rows.append(weights @ feats)
        labels.append(bag.bag_label)
    return np.asarray(rows), np.asarray(labels, dtype=np.int64)


def _train_linear(x_train, y_train, x_val, y_val, learning_rate=0.01,
                  momentum=0.9, epochs=200, batch_size=64, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xCE2]))
    m = x_train.shape[1]
    params = {"w": tape.parameter(rng.normal(0, 1.0 / np.sqrt(m), m)),
              "b": tape.parameter(0.0)}
    velocity = {n: np.zeros_like(p.data) for n, p in params.items()}
    best = (-np.inf, None)
    for epoch in range(epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            logits = tape.matmul(tape.constant(x_train[chunk]), params["w"]) + params["b"]
            loss = tape.mean_all(tape.bce_with_logits(logits, y_train[chunk].astype(np.float64)))
            tape.backward(loss)
            _sgd_step(params, velocity, learning_rate, momentum)
        val_logits = x_val @ params["w"].data + float(params["b"].data)
        auc = metrics.auroc(val_logits, y_val)
        if auc > best[0]:
            best = (auc, (np.array(params["w"].data), float(params["b"].data)))
    return best[1]


def bag_ceiling(datasets, source="oracle", config=None, seed=0, **fit_kwargs):
    """Bag-level ceiling report on the test split.

    Oracle source scores test bags with the exact bag posterior. The trained
    source fits a linear classifier on ROI-pooled embeddings and reports
    both negative-bag weighting variants (ROI-matched and uniform).
    """
    test = datasets["test"]
    y_test = np.array([b.bag_label for b in test.bags], dtype=np.int64)
    if source == "oracle":
        if config is None:
            raise CeilingError("oracle source needs the generator config")
        probs = np.array([synth.bag_posterior(b.features, config)
                          for b in test.bags])
        return {"bag_auroc": metrics.auroc(probs, y_test)}
    if source != "trained":
        raise CeilingError(f"unknown source {source!r}")
    report = {}
    for variant, uniform in (("roi", False), ("uniform_negative", True)):
        x_tr, y_tr = roi_pooled_embeddings(datasets["train"], seed, uniform)
        x_va, y_va = roi_pooled_embeddings(datasets["val"], seed, uniform)
        x_te, y_te = roi_pooled_embeddings(datasets["test"], seed, uniform)
        w, b = _train_linear(x_tr, y_tr, x_va, y_va, seed=seed, **fit_kwargs)
        report[f"bag_auroc_{variant}"] = metrics.auroc(x_te @ w + b, y_te)
    return report
