"""Release gate: ten numbered checks with printed verdicts.

Each check prints one ``[criterion NN] name: PASS/FAIL (detail)`` line
outside pytest's capture so the verdicts survive into piped logs, then
asserts. Benchmarks use the shifted-mean generator at its default
configuration: 768 features, block length 12, shift 0.5, bags of 20 to 60
instances, balanced labels.

Check 5 trains the gated-attention classifier for real. Its desk-scale
variant (2000 training bags, 200-epoch budget) runs by default and takes a
couple of minutes; the full-scale variant (10000 training bags) is marked
slow and only runs when GMIL_RUN_SLOW=1 is set.
"""

import filecmp
import json
import os
from contextlib import redirect_stderr, redirect_stdout
from io import StringIO

import numpy as np
import pytest

from gmil import backend, ceilings, cli, guidance, metrics, models, synth
from gmil import tape, training

N_SEEDS = 3


def _verdict(num, name, ok, detail, capsys):
    line = f"[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


@pytest.fixture(scope="module")
def test_sets():
    """Default-configuration test splits for three generator seeds."""
    return [synth.generate_dataset(synth.with_seed(synth.SynthConfig(), s),
                                   "test", 1000)
            for s in range(N_SEEDS)]


@pytest.fixture(scope="module")
def oracle_eval(test_sets):
    """Exact-posterior localization and bag AUROC for each test seed."""
    rows = []
    for ds in test_sets:
        att = {}
        probs = np.empty(len(ds.bags))
        labels = np.empty(len(ds.bags), dtype=np.int64)
        for i, bag in enumerate(ds.bags):
            scores = synth.oracle_scores(bag.features, synth.SynthConfig())
            probs[i] = scores.bag_posterior
            labels[i] = bag.bag_label
            if bag.bag_label == 1:
                att[bag.bag_id] = scores.instance_posteriors
        rows.append({
            "loc": metrics.localization_report(att, ds).loc_auroc,
            "bag": metrics.auroc(probs, labels),
        })
    return rows


def test_criterion_01_exact_instance_posterior_ceiling(oracle_eval, capsys):
    mean = float(np.mean([r["loc"] for r in oracle_eval]))
    _verdict(1, "exact instance posterior localization ceiling",
             abs(mean - 0.884) <= 0.015,
             f"macro loc AUROC {mean:.4f} over {N_SEEDS} seeds, "
             f"target 0.884 +/- 0.015", capsys)


def test_criterion_02_exact_bag_posterior_ceiling(oracle_eval, capsys):
    mean = float(np.mean([r["bag"] for r in oracle_eval]))
    _verdict(2, "exact bag posterior ceiling",
             abs(mean - 0.810) <= 0.015,
             f"bag AUROC {mean:.4f} over {N_SEEDS} seeds, "
             f"target 0.810 +/- 0.015", capsys)


def test_criterion_03_centered_gaussian_baseline(test_sets, capsys):
    vals = []
    for ds in test_sets:
        att = {bag.bag_id: guidance.centered_gaussian_reference(bag.size).r
               for bag in ds.bags if bag.bag_label == 1}
        vals.append(metrics.localization_report(att, ds).loc_auroc)
    mean = float(np.mean(vals))
    _verdict(3, "centered gaussian localization baseline",
             abs(mean - 0.689) <= 0.03,
             f"macro loc AUROC {mean:.4f} over {N_SEEDS} seeds, "
             f"target 0.689 +/- 0.03", capsys)


def test_criterion_04_uniform_attention_tie_handling(test_sets, capsys):
    aurocs, auprcs = [], []
    for ds in test_sets:
        att = {bag.bag_id: np.full(bag.size, 1.0 / bag.size)
               for bag in ds.bags if bag.bag_label == 1}
        rep = metrics.localization_report(att, ds)
        aurocs.append(rep.loc_auroc)
        auprcs.append(rep.loc_auprc)
    auprc = float(np.mean(auprcs))
    ok = all(a == 0.5 for a in aurocs) and abs(auprc - 0.332) <= 0.010
    _verdict(4, "uniform attention tie handling",
             ok, f"loc AUROC {sorted(set(aurocs))} (want exactly [0.5]), "
             f"loc AUPRC {auprc:.4f}, target 0.332 +/- 0.010", capsys)


ABMIL = models.ModelSpec(pooling="abmil", model_dim=768)
SELECT_L1 = (0.0, 0.01)


def _fit_and_score(train_ds, val_ds, test_ds, epochs):
    """Validation-selected gated-attention run over the small L1 grid."""
    conf = training.TrainConfig(learning_rate=0.01, epochs=epochs,
                                batch_size=64, patience=30, seed=0)
    model, _, best, _ = training.grid_search(
        ABMIL, None, conf, train_ds, val_ds,
        lr_grid=(0.01,), l1_grid=SELECT_L1)
    scores = training.score_bags(model, test_ds.bags)
    labels = np.array([b.bag_label for b in test_ds.bags], dtype=np.int64)
    return metrics.auroc(scores, labels), best


def test_criterion_05_trained_attention_classifier_desk_scale(test_sets, capsys):
    cfg = synth.SynthConfig()
    train_ds = synth.generate_dataset(cfg, "train", 2000)
    val_ds = synth.generate_dataset(cfg, "val", 500)
    auroc, best = _fit_and_score(train_ds, val_ds, test_sets[0], epochs=200)
    _verdict(5, "trained attention classifier (desk scale)",
             auroc >= 0.70,
             f"test bag AUROC {auroc:.4f} at selected l1={best.l1_strength:g} "
             f"(val {best.val_auroc:.4f}), threshold 0.70", capsys)


@pytest.mark.slow
@pytest.mark.skipif(os.environ.get("GMIL_RUN_SLOW") != "1",
                    reason="set GMIL_RUN_SLOW=1 for the full-scale training run")
def test_criterion_05_trained_attention_classifier_full_scale(test_sets, capsys):
    cfg = synth.SynthConfig()
    train_ds = synth.generate_dataset(cfg, "train")
    val_ds = synth.generate_dataset(cfg, "val")
    auroc, best = _fit_and_score(train_ds, val_ds, test_sets[0], epochs=1000)
    _verdict(5, "trained attention classifier (full scale)",
             abs(auroc - 0.751) <= 0.03,
             f"test bag AUROC {auroc:.4f} at selected l1={best.l1_strength:g} "
             f"(val {best.val_auroc:.4f}), target 0.751 +/- 0.03", capsys)


GRAD_SPECS = [
    dict(pooling="max"),
    dict(pooling="mean"),
    dict(pooling="abmil", attention_hidden_dim=8),
    dict(pooling="abmil", attention_hidden_dim=8, smooth="smap"),
    dict(pooling="transmil", heads=2, ppeg_kernels=(3,)),
    dict(pooling="transmil", heads=2, ppeg_kernels=(3,), smooth="smtp"),
]


class _FrozenReferences:
    """Capture moment-matched references on the first pass, replay them on
    every later one.

    The analytic gradient treats the reference as a constant (it is built
    from the current attention under a stop-gradient), so the numeric
    check must difference an objective whose reference stays pinned at the
    base point rather than tracking the perturbed attention.
    """

    def __init__(self):
        self.store = []
        self.replay = False
        self.cursor = 0
        self.real = backend.normal_reference_seg

    def __call__(self, att, offs, floor):
        if not self.replay:
            refs = self.real(att, offs, floor)
            self.store.append(refs)
            return refs
        refs = self.store[self.cursor]
        self.cursor += 1
        return refs


def _fd_check_config(spec, div, flat, offsets, labels, rng, h=1e-5):
    gspec = guidance.GuidanceSpec(reference="normal_guidance",
                                  divergence=div, strength=1.0)
    model = models.Model.create(spec, seed=3)
    freezer = _FrozenReferences()
    backend.normal_reference_seg = freezer
    try:
        loss = training.batch_loss(model, gspec, flat, offsets, labels)
        tape.backward(loss)
        analytic = {}
        for name, p in model.params.items():
            analytic[name] = (np.array(p.grad) if p.grad is not None
                              else np.zeros_like(np.atleast_1d(p.data)))
            p.grad = None
        freezer.replay = True

        def value():
            freezer.cursor = 0
            return float(training.batch_loss(
                model, gspec, flat, offsets, labels).data)

        worst, n_checks = 0.0, 0
        for name, p in model.params.items():
            data = np.atleast_1d(p.data)
            for flat_idx in rng.choice(data.size, size=min(3, data.size),
                                       replace=False):
                idx = np.unravel_index(flat_idx, data.shape)
                orig = data[idx]

                def central(step):
                    data[idx] = orig + step
                    up = value()
                    data[idx] = orig - step
                    dn = value()
                    data[idx] = orig
                    return (up - dn) / (2 * step)

                num = (4 * central(h / 2) - central(h)) / 3
                got = float(np.atleast_1d(analytic[name])[idx])
                n_checks += 1
                if abs(num) > 1e-3:
                    worst = max(worst, abs(got - num) / abs(num))
                assert got == pytest.approx(num, rel=1e-4, abs=1e-7), \
                    f"{spec} {div} {name}[{idx}]"
        return worst, n_checks
    finally:
        backend.normal_reference_seg = freezer.real


def test_criterion_06_gradient_suite(capsys):
    rng = np.random.default_rng(11)
    n_checks = 0
    worst = 0.0
    for spec_kwargs in GRAD_SPECS:
        for dim in (4, 8):
            spec = models.ModelSpec(model_dim=dim, **spec_kwargs)
            feats = [rng.normal(size=(s, dim)) for s in (1, 2, 7)]
            flat, offsets = models.flatten_bags(feats)
            labels = np.array([1.0, 0.0, 1.0])
            for div in ("squared_error", "forward_kl", "reverse_kl"):
                w, n = _fd_check_config(spec, div, flat, offsets, labels, rng)
                worst = max(worst, w)
                n_checks += n
    _verdict(6, "finite-difference gradient suite", worst < 1e-4,
             f"{n_checks} probes over {len(GRAD_SPECS) * 6} configurations, "
             f"max relative error {worst:.2e}", capsys)


def _brute_force_posteriors(features, cfg):
    """Direct density-product enumeration over every block placement."""
    s, r = features.shape[0], cfg.block_len
    n_starts = s - r + 1
    weights = np.empty(n_starts)
    for t in range(n_starts):
        mu = np.zeros_like(features)
        mu[t:t + r, 0] = cfg.delta
        weights[t] = np.exp(-0.5 * np.sum((features - mu) ** 2))
    noise = np.exp(-0.5 * np.sum(features ** 2))
    inst = np.empty(s)
    for j in range(s):
        covering = [t for t in range(n_starts) if t <= j < t + r]
        inst[j] = weights[covering].sum() / weights.sum()
    ratio = weights.mean() / noise
    p = cfg.positive_prior
    bag = p * ratio / (p * ratio + (1.0 - p))
    return inst, bag


def test_criterion_07_oracle_brute_force_equivalence(capsys):
    cfg = synth.SynthConfig(dim=4, block_len=3, delta=0.8,
                            s_min=3, s_max=8, positive_prior=0.4, seed=5)
    rng = np.random.default_rng(21)
    worst_inst = worst_bag = 0.0
    for i in range(1000):
        s = int(rng.integers(3, 9))
        feats = rng.normal(size=(s, cfg.dim))
        if i % 2 == 0:
            t = int(rng.integers(0, s - cfg.block_len + 1))
            feats[t:t + cfg.block_len, 0] += cfg.delta
        want_inst, want_bag = _brute_force_posteriors(feats, cfg)
        got = synth.oracle_scores(feats, cfg)
        gap = np.abs(got.instance_posteriors - want_inst)
        worst_inst = max(worst_inst, float(np.max(
            gap / np.maximum(np.abs(want_inst), 1e-2))))
        worst_bag = max(worst_bag, abs(got.bag_posterior - want_bag)
                        / max(abs(want_bag), 1e-2))
        assert np.allclose(got.instance_posteriors, want_inst,
                           rtol=1e-10, atol=1e-12)
        assert got.bag_posterior == pytest.approx(want_bag, rel=1e-10, abs=1e-12)
    _verdict(7, "posterior equals brute-force enumeration",
             max(worst_inst, worst_bag) < 1e-10,
             f"1000 bags, S <= 8; max relative gap "
             f"{max(worst_inst, worst_bag):.2e}", capsys)


def _is_unimodal(r):
    signs = np.sign(np.diff(r))
    signs = signs[signs != 0]
    if signs.size == 0:
        return True
    drop = np.flatnonzero(signs < 0)
    if drop.size == 0:
        return True
    return not np.any(signs[drop[0]:] > 0)


def test_criterion_08_guidance_properties(capsys):
    rng = np.random.default_rng(31)
    n_checked = 0
    for _ in range(10_000):
        s = int(rng.integers(1, 61))
        alpha = rng.choice([0.05, 0.5, 5.0])
        a = rng.dirichlet(np.full(s, alpha))
        r = guidance.normal_reference(a).r
        assert np.all(r >= 0) and abs(r.sum() - 1.0) <= 1e-9
        assert _is_unimodal(r), f"multimodal reference for size {s}"
        n_checked += 1
    for _ in range(100):
        s = int(rng.integers(2, 30))
        r = rng.dirichlet(np.ones(s))
        a = rng.dirichlet(np.ones(s))
        for kind in ("squared_error", "forward_kl", "reverse_kl"):
            value, _ = guidance.divergence(kind, r, a)
            assert value >= -1e-12
            same, _ = guidance.divergence(kind, a, a)
            assert abs(same) <= 1e-8
            if not np.allclose(r, a):
                assert value > 0
    bag = np.random.default_rng(3).normal(size=(9, 8))
    model = models.Model.create(models.ModelSpec(pooling="abmil", model_dim=8,
                                                 attention_hidden_dim=8), seed=0)
    out = model.forward(bag)
    a = out.attention
    ref = guidance.normal_reference(a)
    base_div, _ = guidance.divergence("forward_kl", ref.r, a)
    assert base_div > 0
    y_hat = 1.0 / (1.0 + np.exp(-out.logit))
    losses = [guidance.guided_loss(
        1.0, y_hat, ref, a,
        guidance.GuidanceSpec(divergence="forward_kl", strength=lam))
        for lam in (0.0, 0.1, 1.0, 10.0)]
    monotone = all(b > a_ for a_, b in zip(losses, losses[1:]))
    _verdict(8, "guidance reference and divergence properties",
             monotone, f"{n_checked} unimodal references, divergences "
             f"nonnegative and zero only at equality, loss strictly "
             f"increasing in strength (div {base_div:.3f})", capsys)


def test_criterion_09_byte_identical_reruns(tmp_path, capsys):
    data_dir = tmp_path / "data"
    code = cli.main(["generate", "--out-dir", str(data_dir), "--dim", "6",
                     "--r", "2", "--delta", "2.0", "--s-min", "5",
                     "--s-max", "9", "--n-train", "60", "--n-val", "30",
                     "--n-test", "30"])
    assert code == 0
    config = tmp_path / "exp.json"
    with open(config, "w") as fh:
        json.dump({
            "output_dir": str(tmp_path / "unused"),
            "data": {name: str(data_dir / f"seed0-{name}.gmilbags")
                     for name in ("train", "val", "test")},
            "model": {"pooling": "abmil", "model_dim": 6,
                      "attention_hidden_dim": 8},
            "guidance": {"reference": "normal_guidance",
                         "divergence": "forward_kl", "lambda": 0.5},
            "train": {"epochs": 4, "batch_size": 16, "learning_rate": 0.05},
            "seeds": [0, 1],
        }, fh)
    for run_dir in ("a", "b"):
        with redirect_stdout(StringIO()), redirect_stderr(StringIO()):
            code = cli.main(["run", "--config", str(config),
                             "--out-dir", str(tmp_path / run_dir)])
        assert code == 0
    names = ["metrics.json", "history-seed0.csv", "history-seed1.csv"]
    same = {name: filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name,
                              shallow=False) for name in names}
    _verdict(9, "byte-identical reruns", all(same.values()),
             ", ".join(f"{n}: {'same' if ok else 'DIFFERS'}"
                       for n, ok in same.items()), capsys)


def test_criterion_10_block_statistics(test_sets, capsys):
    stats = ceilings.block_stats(test_sets[0])
    counts = set(stats.per_bag_block_count)
    lengths = set(stats.block_lengths)
    ok = counts == {1} and lengths == {12} and stats.r_estimate == 12
    _verdict(10, "block statistics on synthetic positives", ok,
             f"{stats.n_bags} positive bags, block counts {sorted(counts)}, "
             f"lengths {sorted(lengths)}, r_estimate {stats.r_estimate}",
             capsys)
