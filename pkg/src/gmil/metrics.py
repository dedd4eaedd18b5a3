"""Ranking metrics with explicit tie handling, and seed aggregation.

AUROC uses the Mann-Whitney U statistic computed from average ranks, so
every tied positive-negative pair contributes exactly 0.5. AUPRC uses the
step-wise (non-interpolated) construction with tied scores entering as one
group, which makes constant scores yield the positive prevalence.

Localization is macro-averaged: the metric is computed per positive bag
against its instance labels, then averaged over bags. Bags without both
instance classes are skipped and counted.
"""

import dataclasses
import json

import numpy as np


class MetricError(ValueError):
    pass


def _validate(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    if scores.size == 0:
        raise MetricError("empty input")
    if not np.all(np.isfinite(scores)):
        raise MetricError("scores must be finite")
    labels = labels.astype(np.int64)
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be binary")
    return scores, labels


def _average_ranks(scores):
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels):
    """Probability a random positive outranks a random negative; ties 0.5."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC undefined without both classes")
    ranks = _average_ranks(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels):
    """Area under precision-recall, tie-grouped step construction."""
    scores, labels = _validate(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUPRC undefined without positives")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    area = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i:j + 1].sum())
        seen += j + 1 - i
        recall = tp / n_pos
        precision = tp / seen
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return float(area)


@dataclasses.dataclass
class LocalizationResult:
    """Macro localization metrics for one scored dataset (one seed)."""

    loc_auroc: float
    loc_auprc: float
    n_bags_evaluated: int
    n_bags_skipped: int
    per_bag: dict


def localization_report(attention_by_bag, dataset):
    """Macro-average attention-vs-instance-label ranking over positive bags.

    ``attention_by_bag`` maps bag_id to a length-S score vector. Only
    positive bags are read; positive bags lacking both instance classes are
    skipped and counted.
    """
    per_bag = {}
    skipped = 0
    aurocs, auprcs = [], []
    for bag in dataset.bags:
        if bag.bag_label != 1:
            continue
        if bag.instance_labels is None:
            raise MetricError(f"bag {bag.bag_id} lacks instance labels")
        labels = bag.instance_labels.astype(np.int64)
        if bag.bag_id not in attention_by_bag:
            raise MetricError(f"no attention scores for bag {bag.bag_id}")
        scores = np.asarray(attention_by_bag[bag.bag_id], dtype=np.float64)
        if scores.shape != labels.shape:
            raise MetricError(f"attention length mismatch for bag {bag.bag_id}")
        if labels.min() == labels.max():
            skipped += 1
            continue
        a_roc = auroc(scores, labels)
        a_prc = auprc(scores, labels)
        per_bag[bag.bag_id] = {"auroc": a_roc, "auprc": a_prc}
        aurocs.append(a_roc)
        auprcs.append(a_prc)
    if not aurocs:
        raise MetricError("no eligible positive bags")
    return LocalizationResult(
        loc_auroc=float(np.mean(aurocs)),
        loc_auprc=float(np.mean(auprcs)),
        n_bags_evaluated=len(aurocs),
        n_bags_skipped=skipped,
        per_bag=per_bag,
    )


@dataclasses.dataclass
class MetricsReport:
    """Mean and sample std over seeds for the four headline metrics."""

    bag_auroc: tuple
    bag_auprc: tuple
    loc_auroc: tuple
    loc_auprc: tuple
    per_seed: list
    n_bags_evaluated: int
    n_bags_skipped: int

    def to_json_dict(self):
        def pair(p):
            return None if p is None else {"mean": p[0], "std": p[1]}

        return {
            "bag_auroc": pair(self.bag_auroc),
            "bag_auprc": pair(self.bag_auprc),
            "loc_auroc": pair(self.loc_auroc),
            "loc_auprc": pair(self.loc_auprc),
            "per_seed": self.per_seed,
            "n_bags_evaluated": self.n_bags_evaluated,
            "n_bags_skipped": self.n_bags_skipped,
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def to_table(self):
        """Aligned plain-text table in mean +/- std form."""
        rows = [("metric", "mean", "std")]
        for name in ("bag_auroc", "bag_auprc", "loc_auroc", "loc_auprc"):
            value = getattr(self, name)
            if value is None:
                continue
            rows.append((name, f"{value[0]:.3f}", f"{value[1]:.3f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
                 for row in rows]
        return "\n".join(lines) + "\n"


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None
    arr = np.asarray(values, dtype=np.float64)
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return (float(arr.mean()), std)


def aggregate_seeds(per_seed):
    """Combine per-seed metric dicts into a MetricsReport.

    Each entry may carry keys bag_auroc, bag_auprc, loc_auroc, loc_auprc
    (missing ones are allowed), plus optional n_bags_evaluated and
    n_bags_skipped which are summed.
    """
    if not per_seed:
        raise MetricError("need at least one seed report")
    return MetricsReport(
        bag_auroc=_mean_std([r.get("bag_auroc") for r in per_seed]),
        bag_auprc=_mean_std([r.get("bag_auprc") for r in per_seed]),
        loc_auroc=_mean_std([r.get("loc_auroc") for r in per_seed]),
        loc_auprc=_mean_std([r.get("loc_auprc") for r in per_seed]),
        per_seed=list(per_seed),
        n_bags_evaluated=sum(r.get("n_bags_evaluated", 0) for r in per_seed),
        n_bags_skipped=sum(r.get("n_bags_skipped", 0) for r in per_seed),
    )


def format_mean_std(mean, std):
    return f"{mean:.3f}±{std:.3f}"
