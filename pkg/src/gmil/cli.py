"""Command-line front end for the toolkit.

Subcommands cover the whole experimental loop: synthetic data generation,
patient-stratified splitting, training (single runs, grids, sweeps),
checkpoint evaluation, performance ceilings, exact-posterior scoring, and
attention-curve export for figures.

Exit codes: 0 on success, 1 for validation problems (bad flags, malformed
configs, inconsistent inputs), 2 for runtime failures.
"""

import argparse
import csv
import dataclasses
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bags as bagio
from . import ceilings, guidance, metrics, models, synth, training


class _UsageError(ValueError):
    """Raised instead of argparse's default SystemExit(2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


_DIV_ALIASES = {
    "se": "squared_error",
    "fkl": "forward_kl",
    "rkl": "reverse_kl",
    "squared_error": "squared_error",
    "forward_kl": "forward_kl",
    "reverse_kl": "reverse_kl",
}

DESK_SCALE_TRAIN_BAGS = 2000
DESK_SCALE_EPOCHS = 200
DESK_SCALE_VAL_BAGS = 500


# -- small shared helpers --------------------------------------------------


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ValueError(f"{where} must be a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ValueError(f"unknown {where} keys: {unknown}")


def _write_text(path, text):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _json_text(doc):
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _load_dataset(path):
    p = Path(path)
    if not p.is_file():
        raise ValueError(f"bag file not found: {p}")
    return bagio.load_bags(p)


def _fnum(x):
    return f"{x:.17g}"


# -- static SVG line plots -------------------------------------------------

_PALETTE = ("#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#e67e22", "#16a085")


def svg_line_plot(series, title="", xlabel="", ylabel="", log_x=False,
                  width=640, height=400):
    """Render a multi-series line chart as standalone SVG text.

    ``series`` is a list of (label, xs, ys) triples. Only static polylines
    and text are emitted, so the output needs no scripts or styles.
    """
    if not series:
        raise ValueError("need at least one series")
    left, right, top, bottom = 62.0, 16.0, 34.0, 48.0
    pw, ph = width - left - right, height - top - bottom

    def xt(v):
        if log_x:
            if v <= 0:
                raise ValueError("log-x plots need positive x values")
            return math.log10(v)
        return float(v)

    all_x = [xt(v) for _, xs, _ in series for v in xs]
    all_y = [float(v) for _, _, ys in series for v in ys]
    if not all_x:
        raise ValueError("series must not be empty")
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y), max(all_y)
    if x1 - x0 < 1e-300:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 - y0 < 1e-300:
        y0, y1 = y0 - 0.5, y1 + 0.5
    ypad = 0.05 * (y1 - y0)
    y0, y1 = y0 - ypad, y1 + ypad

    def px(v):
        return left + (xt(v) - x0) / (x1 - x0) * pw

    def py(v):
        return top + (y1 - float(v)) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left:.2f}" y1="{top + ph:.2f}" x2="{left + pw:.2f}" '
        f'y2="{top + ph:.2f}" stroke="black"/>',
        f'<line x1="{left:.2f}" y1="{top:.2f}" x2="{left:.2f}" '
        f'y2="{top + ph:.2f}" stroke="black"/>',
    ]
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4.0
        fy = y0 + (y1 - y0) * i / 4.0
        gx = left + pw * i / 4.0
        gy = top + ph - ph * i / 4.0
        xv = 10.0 ** fx if log_x else fx
        out.append(f'<line x1="{gx:.2f}" y1="{top + ph:.2f}" x2="{gx:.2f}" '
                   f'y2="{top + ph + 4:.2f}" stroke="black"/>')
        out.append(f'<text x="{gx:.2f}" y="{top + ph + 17:.2f}" '
                   f'font-family="sans-serif" font-size="11" '
                   f'text-anchor="middle">{xv:.4g}</text>')
        out.append(f'<line x1="{left - 4:.2f}" y1="{gy:.2f}" x2="{left:.2f}" '
                   f'y2="{gy:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 7:.2f}" y="{gy + 4:.2f}" '
                   f'font-family="sans-serif" font-size="11" '
                   f'text-anchor="end">{fy:.4g}</text>')
    for k, (label, xs, ys) in enumerate(series):
        color = _PALETTE[k % len(_PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{points}" fill="none" '
                   f'stroke="{color}" stroke-width="1.5"/>')
        ly = top + 14 + 15 * k
        lx = left + pw - 130
        out.append(f'<line x1="{lx:.2f}" y1="{ly - 4:.2f}" x2="{lx + 18:.2f}" '
                   f'y2="{ly - 4:.2f}" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{lx + 23:.2f}" y="{ly:.2f}" '
                   f'font-family="sans-serif" font-size="11">{label}</text>')
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="20" '
                   f'font-family="sans-serif" font-size="13" '
                   f'text-anchor="middle">{title}</text>')
    if xlabel:
        out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10:.2f}" '
                   f'font-family="sans-serif" font-size="12" '
                   f'text-anchor="middle">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="16" y="{top + ph / 2:.2f}" '
                   f'font-family="sans-serif" font-size="12" '
                   f'text-anchor="middle" '
                   f'transform="rotate(-90 16 {top + ph / 2:.2f})">{ylabel}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- generate --------------------------------------------------------------


def cmd_generate(args):
    cfg_base = synth.SynthConfig(
        dim=args.dim, block_len=args.r, delta=args.delta,
        s_min=args.s_min, s_max=args.s_max, n_train=args.n_train,
        n_val=args.n_val, n_test=args.n_test, positive_prior=args.prior,
    )
    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for seed in range(args.seed_base, args.seed_base + args.seeds):
        cfg = synth.with_seed(cfg_base, seed)
        splits = synth.generate_splits(cfg)
        files = {}
        for name in ("train", "val", "test"):
            fname = f"seed{seed}-{name}.gmilbags"
            bagio.save_bags(splits[name], out_dir / fname)
            files[name] = fname
        sidecar = out_dir / f"seed{seed}-sidecar.json"
        synth.write_sidecar(sidecar, cfg, synth.SPLIT_STREAMS, files)
        counts = ", ".join(f"{n}={len(splits[n].bags)}" for n in files)
        print(f"seed {seed}: {counts} -> {out_dir}")


# -- split -----------------------------------------------------------------


def _parse_ratios(text):
    parts = text.split(",")
    if len(parts) != 3:
        raise ValueError("--ratios must be three comma-separated integers")
    try:
        ratios = tuple(int(p) for p in parts)
    except ValueError:
        raise ValueError("--ratios must be three comma-separated integers")
    if any(r < 0 for r in ratios) or sum(ratios) == 0:
        raise ValueError("--ratios must be nonnegative with a positive sum")
    return ratios


def cmd_split(args):
    dataset = _load_dataset(args.input)
    ratios = _parse_ratios(args.ratios)
    assigned = bagio.split_by_patient(dataset, ratios=ratios, seed=args.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for name in ("train", "val", "test"):
        part = assigned.split(name)
        path = out_dir / f"{stem}-{name}.gmilbags"
        bagio.save_bags(part, path)
        frac = part.positive_fraction() if part.bags else float("nan")
        print(f"{name}: {len(part.bags)} bags, positive fraction {frac:.3f} "
              f"-> {path}")


# -- run -------------------------------------------------------------------


@dataclasses.dataclass
class Experiment:
    data_paths: dict
    model_spec: models.ModelSpec
    guidance_spec: object
    train_config: training.TrainConfig
    seeds: list
    grid: object
    output_dir: str


def load_experiment(path):
    """Parse and strictly validate an experiment config document."""
    p = Path(path)
    if not p.is_file():
        raise ValueError(f"config file not found: {p}")
    with open(p) as fh:
        doc = json.load(fh)
    _check_keys(doc, {"output_dir", "data", "model", "guidance", "train",
                      "seeds", "grid"}, "experiment config")
    for key in ("data", "model"):
        if key not in doc:
            raise ValueError(f"experiment config needs a {key!r} section")
    data = doc["data"]
    _check_keys(data, {"train", "val", "test"}, "data")
    for name in ("train", "val", "test"):
        if name not in data or not isinstance(data[name], str):
            raise ValueError(f"data section needs a {name!r} path")
    model_spec = models.ModelSpec.from_json_dict(doc["model"])
    gdoc = doc.get("guidance")
    guidance_spec = None if gdoc is None else guidance.GuidanceSpec.from_json_dict(gdoc)
    train_config = training.TrainConfig.from_json_dict(doc.get("train", {}))
    seeds = doc.get("seeds", [train_config.seed])
    if (not isinstance(seeds, list) or not seeds
            or any(not isinstance(s, int) for s in seeds)
            or len(set(seeds)) != len(seeds)):
        raise ValueError("seeds must be a nonempty list of distinct integers")
    grid = None
    gdoc = doc.get("grid")
    if gdoc is not None:
        _check_keys(gdoc, {"learning_rates", "l1_strengths"}, "grid")
        lr_grid = [float(v) for v in gdoc.get("learning_rates", training.LR_GRID)]
        l1_grid = [float(v) for v in gdoc.get("l1_strengths", training.L1_GRID)]
        if not lr_grid or not l1_grid:
            raise ValueError("grid lists must be nonempty")
        grid = (lr_grid, l1_grid)
    output_dir = doc.get("output_dir", f"{p.stem}-out")
    if not isinstance(output_dir, str) or not output_dir:
        raise ValueError("output_dir must be a nonempty string")
    return Experiment(data, model_spec, guidance_spec, train_config,
                      seeds, grid, output_dir)


def evaluate_model(model, test_dataset, seed=None):
    """Per-seed metric dict: bag metrics always, localization when labelled."""
    test_bags = test_dataset.bags
    scores = training.score_bags(model, test_bags)
    labels = np.array([b.bag_label for b in test_bags], dtype=np.int64)
    row = {}
    if seed is not None:
        row["seed"] = seed
    row["bag_auroc"] = metrics.auroc(scores, labels)
    row["bag_auprc"] = metrics.auprc(scores, labels)
    positives = [b for b in test_bags if b.bag_label == 1]
    if positives and all(b.instance_labels is not None for b in positives):
        att = training.attention_by_bag(model, test_bags)
        rep = metrics.localization_report(att, test_dataset)
        row["loc_auroc"] = rep.loc_auroc
        row["loc_auprc"] = rep.loc_auprc
        row["n_bags_evaluated"] = rep.n_bags_evaluated
        row["n_bags_skipped"] = rep.n_bags_skipped
    return row


def _write_report(out_dir, per_seed, prefix=""):
    report = metrics.aggregate_seeds(per_seed)
    _write_text(out_dir / f"{prefix}metrics.json", report.to_json() + "\n")
    _write_text(out_dir / f"{prefix}metrics.txt", report.to_table() + "\n")
    print(report.to_table())
    return report


def _train_seeds(exp, tconf, gspec, datasets, val_ds, out_dir, tag_prefix=""):
    """Train across seeds; writes per-seed artifacts, returns metric dicts."""
    per_seed = []
    for seed in exp.seeds:
        cell_conf = dataclasses.replace(tconf, seed=seed)
        tag = f"{tag_prefix}seed{seed}"
        if exp.grid is not None:
            lr_grid, l1_grid = exp.grid
            model, history, best, cells = training.grid_search(
                exp.model_spec, gspec, cell_conf, datasets["train"], val_ds,
                lr_grid=lr_grid, l1_grid=l1_grid)
            _write_text(out_dir / f"grid-{tag}.csv", training.grid_to_csv(cells))
            print(f"[{tag}] best cell lr={best.learning_rate:g} "
                  f"l1={best.l1_strength:g} val AUROC {best.val_auroc:.4f}")
        else:
            model, history = training.train(
                exp.model_spec, gspec, cell_conf, datasets["train"], val_ds)
        _write_text(out_dir / f"history-{tag}.csv", history.to_csv())
        models.save_checkpoint(out_dir / f"model-{tag}.ckpt", model)
        print(f"[{tag}] best epoch {history.best_epoch} "
              f"val AUROC {history.best_val_auroc:.4f}")
        per_seed.append(evaluate_model(model, datasets["test"], seed=seed))
    return per_seed


def parse_sweep(expr):
    """Decode --sweep into ('lambda', values) or ('divergence', names)."""
    name, sep, rest = expr.partition("=")
    if not sep:
        raise ValueError("--sweep needs the form name=values")
    if name == "lambda":
        lo_text, sep, hi_text = rest.partition("..")
        if not sep:
            raise ValueError("lambda sweep needs the form lambda=1e-2..1e2")
        lo, hi = float(lo_text), float(hi_text)
        if lo <= 0 or hi <= 0:
            raise ValueError("lambda endpoints must be positive")
        klo, khi = round(math.log10(lo)), round(math.log10(hi))
        if (abs(10.0 ** klo - lo) > 1e-9 * lo or abs(10.0 ** khi - hi) > 1e-9 * hi
                or klo > khi):
            raise ValueError("lambda endpoints must be increasing powers of 10")
        return "lambda", [10.0 ** k for k in range(klo, khi + 1)]
    if name == "divergence":
        tokens = [t.strip() for t in rest.split(",") if t.strip()]
        if not tokens:
            raise ValueError("divergence sweep needs at least one name")
        out = []
        for tok in tokens:
            if tok not in _DIV_ALIASES:
                raise ValueError(f"unknown divergence {tok!r}")
            out.append(_DIV_ALIASES[tok])
        return "divergence", out
    raise ValueError(f"unknown sweep variable {name!r}")


def _sweep_rows_csv(variable, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = [variable]
    for key in ("loc_auroc", "loc_auprc", "bag_auroc", "bag_auprc"):
        header += [f"{key}_mean", f"{key}_std"]
    writer.writerow(header)
    for value, report in rows:
        cells = [value if isinstance(value, str) else _fnum(value)]
        for pair in (report.loc_auroc, report.loc_auprc,
                     report.bag_auroc, report.bag_auprc):
            if pair is None:
                cells += ["", ""]
            else:
                cells += [_fnum(pair[0]), _fnum(pair[1])]
        writer.writerow(cells)
    return buf.getvalue()


def _print_sweep_table(variable, rows):
    print(f"{variable:>14}  {'loc_auroc':>18}  {'bag_auroc':>18}")
    for value, report in rows:
        label = value if isinstance(value, str) else f"{value:g}"
        cells = []
        for pair in (report.loc_auroc, report.bag_auroc):
            cells.append("-" if pair is None
                         else metrics.format_mean_std(*pair))
        print(f"{label:>14}  {cells[0]:>18}  {cells[1]:>18}")


def _run_sweep(exp, tconf, datasets, val_ds, out_dir, sweep):
    variable, values = sweep
    if exp.grid is not None:
        raise ValueError("--sweep and a grid section are mutually exclusive")
    base = exp.guidance_spec or guidance.GuidanceSpec()
    rows = []
    for value in values:
        if variable == "lambda":
            gspec = dataclasses.replace(base, strength=value)
            tag = f"lambda{value:.0e}-"
        else:
            gspec = dataclasses.replace(base, divergence=value)
            tag = f"{value}-"
        per_seed = _train_seeds(exp, tconf, gspec, datasets, val_ds,
                                out_dir, tag_prefix=tag)
        rows.append((value, metrics.aggregate_seeds(per_seed)))
    _write_text(out_dir / "sweep.csv", _sweep_rows_csv(variable, rows))
    if variable == "lambda":
        series = []
        for key, getter in (("loc AUROC", lambda r: r.loc_auroc),
                            ("bag AUROC", lambda r: r.bag_auroc)):
            pts = [(v, getter(r)[0]) for v, r in rows if getter(r) is not None]
            if pts:
                series.append((key, [p[0] for p in pts], [p[1] for p in pts]))
        if series:
            _write_text(out_dir / "sweep.svg",
                        svg_line_plot(series, title="Guidance strength sweep",
                                      xlabel="lambda", ylabel="AUROC",
                                      log_x=True))
    _print_sweep_table(variable, rows)


def cmd_run(args):
    exp = load_experiment(args.config)
    out_dir = Path(args.out_dir) if args.out_dir else Path(exp.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    datasets = {name: _load_dataset(path)
                for name, path in exp.data_paths.items()}
    tconf = exp.train_config
    val_ds = datasets["val"]
    if args.desk_scale:
        tconf = dataclasses.replace(tconf, epochs=DESK_SCALE_EPOCHS,
                                    max_train_bags=DESK_SCALE_TRAIN_BAGS)
        val_ds = bagio.Dataset(bags=val_ds.bags[:DESK_SCALE_VAL_BAGS],
                               dim=val_ds.dim)
    if args.sweep:
        _run_sweep(exp, tconf, datasets, val_ds, out_dir, parse_sweep(args.sweep))
        return
    per_seed = _train_seeds(exp, tconf, exp.guidance_spec, datasets, val_ds,
                            out_dir)
    _write_report(out_dir, per_seed)


# -- evaluate --------------------------------------------------------------


def cmd_evaluate(args):
    model = models.load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.bags)
    if dataset.dim != model.spec.model_dim:
        raise ValueError(
            f"bag feature dim {dataset.dim} does not match "
            f"checkpoint dim {model.spec.model_dim}")
    row = evaluate_model(model, dataset)
    report = metrics.aggregate_seeds([row])
    print(report.to_table())
    if args.out:
        _write_text(Path(args.out), report.to_json() + "\n")


# -- ceiling ---------------------------------------------------------------


def _ceiling_datasets(args, need_train):
    if args.test is None:
        raise ValueError("--test is required for this ceiling")
    datasets = {"test": _load_dataset(args.test)}
    if need_train:
        if args.train is None or args.val is None:
            raise ValueError("trained ceilings need --train and --val")
        datasets["train"] = _load_dataset(args.train)
        datasets["val"] = _load_dataset(args.val)
    return datasets


def cmd_ceiling(args):
    if args.kind == "blocks":
        if args.bags is None:
            raise ValueError("blocks ceiling needs --bags")
        dataset = _load_dataset(args.bags)
        stats = ceilings.block_stats(dataset, gap=args.gap)
        doc = stats.to_json_dict()
    elif args.kind == "instance":
        if args.source == "oracle":
            datasets = _ceiling_datasets(args, need_train=False)
            if args.sidecar is None:
                raise ValueError("oracle ceilings need --sidecar")
            cfg = synth.read_sidecar(args.sidecar)
            _, report = ceilings.instance_ceiling(datasets, source="oracle",
                                                  config=cfg)
            r_used = None
        else:
            datasets = _ceiling_datasets(args, need_train=True)
            r_used = args.r
            if r_used is None:
                r_used = ceilings.block_stats(datasets["train"]).r_estimate
            _, report = ceilings.instance_ceiling(datasets, r=r_used,
                                                  source="trained")
        doc = {"kind": "instance", "source": args.source, "r": r_used,
               "loc_auroc": report.loc_auroc, "loc_auprc": report.loc_auprc,
               "n_bags_evaluated": report.n_bags_evaluated,
               "n_bags_skipped": report.n_bags_skipped}
    else:
        need_train = args.source == "trained"
        datasets = _ceiling_datasets(args, need_train=need_train)
        if args.source == "oracle":
            if args.sidecar is None:
                raise ValueError("oracle ceilings need --sidecar")
            cfg = synth.read_sidecar(args.sidecar)
            result = ceilings.bag_ceiling(datasets, source="oracle", config=cfg)
        else:
            result = ceilings.bag_ceiling(datasets, source="trained",
                                          seed=args.seed)
        doc = {"kind": "bag", "source": args.source, **result}
    text = _json_text(doc)
    print(text, end="")
    if args.out:
        _write_text(Path(args.out), text)


# -- oracle ----------------------------------------------------------------


def cmd_oracle(args):
    dataset = _load_dataset(args.bags)
    cfg = synth.read_sidecar(args.sidecar)
    if dataset.dim != cfg.dim:
        raise ValueError(f"bag feature dim {dataset.dim} does not match "
                         f"generator dim {cfg.dim}")
    bag_rows = []
    inst_rows = []
    att = {}
    for bag in dataset.bags:
        scores = synth.oracle_scores(bag.features, cfg)
        att[bag.bag_id] = scores.instance_posteriors
        bag_rows.append((bag.bag_id, scores.bag_posterior, bag.bag_label))
        labels = bag.instance_labels
        for j in range(bag.size):
            lab = "" if labels is None else str(int(labels[j]))
            inst_rows.append((bag.bag_id, j, scores.instance_posteriors[j], lab))
    probs = np.array([r[1] for r in bag_rows])
    labels = np.array([r[2] for r in bag_rows], dtype=np.int64)
    summary = {"n_bags": len(bag_rows)}
    if 0 < labels.sum() < labels.size:
        summary["bag_auroc"] = metrics.auroc(probs, labels)
        summary["bag_auprc"] = metrics.auprc(probs, labels)
    positives = [b for b in dataset.bags if b.bag_label == 1]
    if positives and all(b.instance_labels is not None for b in positives):
        rep = metrics.localization_report(att, dataset)
        summary["loc_auroc"] = rep.loc_auroc
        summary["loc_auprc"] = rep.loc_auprc
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bag_id", "bag_posterior", "bag_label"])
        for bag_id, prob, label in bag_rows:
            writer.writerow([bag_id, _fnum(prob), label])
        _write_text(out_dir / "oracle_bags.csv", buf.getvalue())
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["bag_id", "position", "instance_posterior",
                         "instance_label"])
        for row in inst_rows:
            writer.writerow([row[0], row[1], _fnum(row[2]), row[3]])
        _write_text(out_dir / "oracle_instances.csv", buf.getvalue())
    print(_json_text(summary), end="")


# -- export-attention ------------------------------------------------------


def _baseline_attention(kind, dataset):
    result = {}
    for bag in dataset.bags:
        s = bag.size
        if kind == "uniform":
            result[bag.bag_id] = np.full(s, 1.0 / s)
        else:
            result[bag.bag_id] = guidance.centered_gaussian_reference(s).r
    return result


def cmd_export_attention(args):
    if (args.checkpoint is None) == (args.baseline is None):
        raise ValueError("give exactly one of --checkpoint or --baseline")
    dataset = _load_dataset(args.bags)
    selected = dataset.bags
    if args.bag_ids:
        wanted = [t.strip() for t in args.bag_ids.split(",") if t.strip()]
        by_id = {b.bag_id: b for b in dataset.bags}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise ValueError(f"bag ids not in file: {missing}")
        selected = [by_id[w] for w in wanted]
    head_att = {}
    if args.checkpoint is not None:
        model = models.load_checkpoint(args.checkpoint)
        if dataset.dim != model.spec.model_dim:
            raise ValueError(
                f"bag feature dim {dataset.dim} does not match "
                f"checkpoint dim {model.spec.model_dim}")
        att = {}
        for bag in selected:
            out = model.forward(bag.features)
            att[bag.bag_id] = out.attention
            if out.head_attention is not None:
                head_att[bag.bag_id] = out.head_attention
    else:
        att = _baseline_attention(args.baseline, dataset)
    n_heads = 0
    if head_att:
        n_heads = next(iter(head_att.values())).shape[0]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["bag_id", "position", "attention"]
    header += [f"head_{h}" for h in range(n_heads)]
    header.append("instance_label")
    writer.writerow(header)
    for bag in selected:
        a = att[bag.bag_id]
        heads = head_att.get(bag.bag_id)
        labels = bag.instance_labels
        for j in range(bag.size):
            row = [bag.bag_id, j, _fnum(a[j])]
            if n_heads:
                row += [_fnum(heads[h, j]) if heads is not None else ""
                        for h in range(n_heads)]
            row.append("" if labels is None else int(labels[j]))
            writer.writerow(row)
    _write_text(Path(args.out), buf.getvalue())
    print(f"wrote {sum(b.size for b in selected)} rows for "
          f"{len(selected)} bags -> {args.out}")
    if args.svg_dir:
        svg_dir = Path(args.svg_dir)
        svg_dir.mkdir(parents=True, exist_ok=True)
        for bag in selected[:args.max_svg]:
            a = att[bag.bag_id]
            xs = list(range(1, bag.size + 1))
            series = [("attention", xs, list(a))]
            if bag.instance_labels is not None and a.size:
                scale = float(a.max())
                series.append(("positive block (scaled)", xs,
                               [float(v) * scale for v in bag.instance_labels]))
            _write_text(svg_dir / f"{bag.bag_id}.svg",
                        svg_line_plot(series, title=bag.bag_id,
                                      xlabel="position", ylabel="attention"))
        n = min(len(selected), args.max_svg)
        print(f"wrote {n} SVG curve(s) -> {svg_dir}")


# -- parser ----------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="gmil",
                     description="Guided attention MIL experiment toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("generate", help="write synthetic benchmark splits")
    p.add_argument("--out-dir", default="data")
    p.add_argument("--seeds", type=int, default=1,
                   help="number of generator seeds")
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--dim", type=int, default=768)
    p.add_argument("--r", type=int, default=12, help="positive block length")
    p.add_argument("--delta", type=float, default=0.5)
    p.add_argument("--s-min", type=int, default=20)
    p.add_argument("--s-max", type=int, default=60)
    p.add_argument("--n-train", type=int, default=10000)
    p.add_argument("--n-val", type=int, default=2500)
    p.add_argument("--n-test", type=int, default=1000)
    p.add_argument("--prior", type=float, default=0.5)
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("split", help="patient-stratified train/val/test split")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--ratios", default="4,1,1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("run", help="train and evaluate from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None,
                   help="override the config output_dir")
    p.add_argument("--desk-scale", action="store_true",
                   help="2000 train bags, 200 epochs, 500 val bags")
    p.add_argument("--sweep", default=None,
                   help="lambda=1e-2..1e2 or divergence=se,fkl,rkl")
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser("evaluate", help="score a checkpoint on a bag file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bags", required=True)
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("ceiling", help="performance ceilings and block stats")
    p.add_argument("kind", choices=("instance", "bag", "blocks"))
    p.add_argument("--source", choices=("oracle", "trained"), default="oracle")
    p.add_argument("--bags", default=None, help="bag file for blocks")
    p.add_argument("--train", default=None)
    p.add_argument("--val", default=None)
    p.add_argument("--test", default=None)
    p.add_argument("--sidecar", default=None, help="generator sidecar JSON")
    p.add_argument("--r", type=int, default=None, help="window length")
    p.add_argument("--gap", type=int, default=ceilings.GAP_MERGE)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="result JSON path")
    p.set_defaults(handler=cmd_ceiling)

    p = sub.add_parser("oracle", help="exact posterior scores for a bag file")
    p.add_argument("--bags", required=True)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--out-dir", default=None, help="write score CSVs here")
    p.set_defaults(handler=cmd_oracle)

    p = sub.add_parser("export-attention",
                       help="per-bag attention curves as CSV/SVG")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--baseline", choices=("uniform", "centered_gaussian"),
                   default=None)
    p.add_argument("--bags", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--bag-ids", default=None, help="comma-separated filter")
    p.add_argument("--svg-dir", default=None)
    p.add_argument("--max-svg", type=int, default=4)
    p.set_defaults(handler=cmd_export_attention)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "handler", None):
            parser.print_help()
            return 1
        args.handler(args)
        return 0
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except training.TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
