"""Shifted-mean semi-synthetic MIL benchmark and its exact Bayes oracles.

Generative process: bag label ~ Bernoulli(prior); bag size S ~ Uniform{S_min..
S_max}. Negative bags are pure iid standard normal noise in every feature.
Positive bags hide a contiguous block of ``block_len`` instances, starting at a
uniformly random index, whose FIRST feature is drawn from Normal(delta, 1);
everything else stays standard normal. Instance labels mark the block.

Because the process is fully known, the posterior over the latent block start
(and hence over instance labels, and over the bag label itself) is available in
closed form. Both oracles work in the log domain: for a candidate start u, the
log likelihood relative to the all-noise model telescopes to

    sum_{j in block(u)} (delta * h_j1 - delta^2 / 2)

so only the first feature column ever enters the computation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .bags import Bag, Dataset

SPLIT_STREAMS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the shifted-mean generator (defaults match the benchmark)."""

    dim: int = 768
    block_len: int = 12
    delta: float = 0.5
    s_min: int = 20
    s_max: int = 60
    n_train: int = 10000
    n_val: int = 2500
    n_test: int = 1000
    seed: int = 0
    positive_prior: float = 0.5

    def __post_init__(self):
        if not (1 <= self.block_len <= self.s_min):
            raise ValueError(
                f"block_len must satisfy 1 <= block_len <= s_min "
                f"(got block_len={self.block_len}, s_min={self.s_min})"
            )
        if self.s_min > self.s_max:
            raise ValueError("s_min must not exceed s_max")
        if not np.isfinite(self.delta):
            raise ValueError("delta must be finite")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("bag counts must be nonnegative")
        if not (0.0 < self.positive_prior < 1.0):
            raise ValueError("positive_prior must be in (0, 1)")

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_dict(cls, data: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class OracleScores:
    """Posterior marginals for one bag: per-instance p(y_ij=1 | ...) and the bag posterior."""

    instance_posteriors: np.ndarray
    bag_posterior: float


def _bag_rng(config: SynthConfig, split_seed: int, index: int) -> np.random.Generator:
    # Per-bag substream: reproducible no matter in what order bags are drawn.
    return np.random.default_rng(
        np.random.SeedSequence(entropy=(config.seed, split_seed, index))
    )


def generate_bag(config: SynthConfig, split_seed: int, index: int, bag_id: str,
                 patient_id: Optional[str] = None) -> Bag:
    """Draw a single bag from its dedicated RNG substream."""
    rng = _bag_rng(config, split_seed, index)
    label = int(rng.random() < config.positive_prior)
    size = int(rng.integers(config.s_min, config.s_max + 1))
    features = rng.standard_normal((size, config.dim))
    instance_labels = np.zeros(size, dtype=np.uint8)
    if label == 1:
        start = int(rng.integers(0, size - config.block_len + 1))
        features[start : start + config.block_len, 0] += config.delta
        instance_labels[start : start + config.block_len] = 1
    return Bag(
        bag_id=bag_id,
        patient_id=patient_id if patient_id is not None else bag_id,
        features=features.astype(np.float32),
        bag_label=label,
        instance_labels=instance_labels,
    )


def generate_dataset(config: SynthConfig, split_seed, n_bags: Optional[int] = None,
                     prefix: str = "syn") -> Dataset:
    """Generate one split of ``n_bags`` bags (default: the configured count).

    ``split_seed`` selects the stream: one of the names "train"/"val"/"test"
    or an integer. Each bag has its own patient id (no shared-patient
    structure).
    """
    if isinstance(split_seed, str):
        if split_seed not in SPLIT_STREAMS:
            raise ValueError(f"unknown split name {split_seed!r}")
        split_seed = SPLIT_STREAMS[split_seed]
    if n_bags is None:
        sizes = {0: config.n_train, 1: config.n_val, 2: config.n_test}
        n_bags = sizes.get(split_seed, config.n_test)
    bags = [
        generate_bag(config, split_seed, i, f"{prefix}-s{config.seed}-t{split_seed}-{i:05d}")
        for i in range(n_bags)
    ]
    return Dataset(bags=bags, dim=config.dim)


def generate_splits(config: SynthConfig, prefix: str = "syn") -> dict[str, Dataset]:
    """Generate the train/val/test triple for one repetition seed."""
    return {
        name: generate_dataset(config, stream, prefix=prefix)
        for name, stream in SPLIT_STREAMS.items()
    }


def _segment_loglik(first_feature: np.ndarray, config: SynthConfig) -> np.ndarray:
    """Log likelihood ratio (vs all-noise) of every candidate block start.

    Returns an array over the S - R + 1 valid starts. Works on the first
    feature column only; all other columns cancel in the ratio.
    """
    size = first_feature.shape[0]
    n_starts = size - config.block_len + 1
    if n_starts < 1:
        raise ValueError(
            f"bag of size {size} cannot contain a block of {config.block_len}"
        )
    per_slice = config.delta * first_feature - 0.5 * config.delta**2
    csum = np.concatenate(([0.0], np.cumsum(per_slice)))
    return csum[config.block_len : config.block_len + n_starts] - csum[:n_starts]


def instance_posterior(features: np.ndarray, config: SynthConfig) -> np.ndarray:
    """p(y_ij = 1 | h_i, S_i, y_i = 1) for every instance j of a positive bag.

    Marginalizes the posterior over the block start u: the prior over starts is
    uniform, so the posterior is a softmax of the per-start log likelihoods,
    and the instance marginal sums the starts whose block covers j.
    """
    features = np.asarray(features, dtype=np.float64)
    loglik = _segment_loglik(features[:, 0], config)
    shifted = loglik - loglik.max()
    start_post = np.exp(shifted)
    start_post /= start_post.sum()
    # Instance j is covered by starts max(0, j-R+1) .. min(n_starts-1, j), 0-based.
    size = features.shape[0]
    csum = np.concatenate(([0.0], np.cumsum(start_post)))
    j = np.arange(size)
    lo = np.maximum(0, j - config.block_len + 1)
    hi = np.minimum(start_post.shape[0] - 1, j)
    return np.clip(csum[hi + 1] - csum[lo], 0.0, 1.0)


def bag_posterior(features: np.ndarray, config: SynthConfig) -> float:
    """p(y_i = 1 | h_i, S_i) under the generator's label prior.

    The positive-class likelihood marginalizes the block start uniformly; the
    ratio against the all-noise likelihood depends only on the first feature
    column, and the posterior is a sigmoid of the log odds.
    """
    features = np.asarray(features, dtype=np.float64)
    loglik = _segment_loglik(features[:, 0], config)
    n_starts = loglik.shape[0]
    log_ratio = logsumexp(loglik) - np.log(n_starts)
    prior = config.positive_prior
    log_odds = log_ratio + np.log(prior) - np.log1p(-prior)
    # sigmoid via the stable branch
    if log_odds >= 0:
        return float(1.0 / (1.0 + np.exp(-log_odds)))
    return float(np.exp(log_odds) / (1.0 + np.exp(log_odds)))


def oracle_scores(features: np.ndarray, config: SynthConfig) -> OracleScores:
    return OracleScores(
        instance_posteriors=instance_posterior(features, config),
        bag_posterior=bag_posterior(features, config),
    )


def write_sidecar(path, config: SynthConfig, split_seeds: dict[str, int],
                  files: dict[str, str]) -> None:
    """Record the full generator configuration next to the emitted bag files."""
    doc = {
        "config": config.to_json_dict(),
        "split_seeds": split_seeds,
        "files": files,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sidecar(path) -> SynthConfig:
    with open(path) as fh:
        doc = json.load(fh)
    return SynthConfig.from_json_dict(doc["config"])


def with_seed(config: SynthConfig, seed: int) -> SynthConfig:
    return replace(config, seed=seed)
