"""SGD + momentum training with early stopping and grid search.

One optimization run is fully deterministic given its seed: parameter
initialization, epoch shuffles, and every numeric step replay identically.
The per-epoch validation bag AUROC drives checkpoint selection; the best
epoch wins and ties keep the earliest one.

The training API strips instance labels from its datasets on entry, so no
code below this boundary can read them.
"""

import csv
import dataclasses
import io

import numpy as np

from . import backend, guidance, metrics, models, tape

LR_GRID = (0.1, 0.01, 0.001, 0.0001)
L1_GRID = (1.0, 0.1, 0.01, 0.001, 0.0001, 1e-5, 1e-6, 0.0)

_DIV_CODES = {
    "squared_error": backend.DIV_SQUARED_ERROR,
    "forward_kl": backend.DIV_FORWARD_KL,
    "reverse_kl": backend.DIV_REVERSE_KL,
}


class TrainingError(RuntimeError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 1000
    l1_strength: float = 0.0
    seed: int = 0
    patience: int = None
    max_train_bags: int = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.l1_strength < 0:
            raise ValueError("l1_strength must be nonnegative")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")

    def to_json_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_json_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclasses.dataclass
class TrainHistory:
    train_loss: list
    val_auroc: list
    best_epoch: int
    best_val_auroc: float

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_auroc"])
        for epoch, (loss, auc) in enumerate(zip(self.train_loss, self.val_auroc)):
            writer.writerow([epoch, f"{loss:.17g}", f"{auc:.17g}"])
        return buf.getvalue()


def _bag_features(bag):
    return np.ascontiguousarray(bag.features, dtype=np.float64)


def _batch_arrays(bags, indices):
    feats = [_bag_features(bags[i]) for i in indices]
    flat, offsets = models.flatten_bags(feats)
    labels = np.array([bags[i].bag_label for i in indices], dtype=np.float64)
    return flat, offsets, labels


def _flat_guidance_penalty(out, spec):
    """Per-bag divergence vector for single-row attention models."""
    if spec.reference == "normal_guidance":
        refs = backend.normal_reference_seg(out.attention.data, out.offsets,
                                            spec.variance_floor)
    else:
        lengths = np.diff(out.offsets)
        refs = np.concatenate([
            guidance.centered_gaussian_reference(int(s)).r for s in lengths])
    return tape.divergence(_DIV_CODES[spec.divergence], refs, out.attention,
                           out.offsets, spec.epsilon)


def _multihead_penalty(out, spec, heads):
    """Per-bag mean-over-heads divergence for transmil head rows."""
    per_bag = []
    for rows in out.head_attention:
        s = rows.data.shape[1]
        flat = tape.reshape(rows, (heads * s,))
        offs = np.arange(heads + 1, dtype=np.int64) * s
        refs = backend.normal_reference_seg(flat.data, offs, spec.variance_floor)
        div = tape.divergence(_DIV_CODES[spec.divergence], refs, flat, offs,
                              spec.epsilon)
        per_bag.append(tape.reshape(tape.mean_all(div), (1,)))
    return tape.concat0(per_bag)


def batch_loss(model, guidance_spec, flat, offsets, labels):
    """Mean guided loss over one batch as a differentiable scalar."""
    out = model.forward_flat(flat, offsets)
    loss = tape.mean_all(tape.bce_with_logits(out.logits, labels))
    if guidance_spec is not None and guidance_spec.active:
        if guidance_spec.reference == "label_guidance":
            raise TrainingError(
                "label guidance needs instance labels, which the training "
                "API does not see")
        if out.head_attention is not None and \
                guidance_spec.reference == "normal_guidance":
            div = _multihead_penalty(out, guidance_spec, model.spec.heads)
        else:
            div = _flat_guidance_penalty(out, guidance_spec)
        loss = loss + tape.mean_all(div) * guidance_spec.strength
    return loss


def _l1_value(model, names, strength):
    return strength * sum(float(np.abs(model.params[n].data).sum()) for n in names)


def score_bags(model, bags, batch_size=256):
    """Forward probabilities for a list of bags (no gradients kept)."""
    probs = np.empty(len(bags))
    for start in range(0, len(bags), batch_size):
        idx = range(start, min(start + batch_size, len(bags)))
        flat, offsets, _ = _batch_arrays(bags, idx)
        out = model.forward_flat(flat, offsets)
        logits = out.logits.data
        probs[start:start + len(logits)] = 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))
    return probs


def attention_by_bag(model, bags, batch_size=256):
    """Per-bag attention vectors keyed by bag_id."""
    result = {}
    for start in range(0, len(bags), batch_size):
        idx = list(range(start, min(start + batch_size, len(bags))))
        flat, offsets, _ = _batch_arrays(bags, idx)
        out = model.forward_flat(flat, offsets)
        for k, i in enumerate(idx):
            a = out.attention.data[offsets[k]:offsets[k + 1]]
            result[bags[i].bag_id] = np.array(a)
    return result


def train(model_spec, guidance_spec, config, train_dataset, val_dataset):
    """Optimize one model; returns (best model, history).

    The returned model carries the parameters of the epoch with the highest
    validation bag AUROC (earliest epoch on ties).
    """
    train_dataset = train_dataset.without_instance_labels()
    val_dataset = val_dataset.without_instance_labels()
    train_bags = train_dataset.bags
    if config.max_train_bags is not None:
        train_bags = train_bags[:config.max_train_bags]
    if not train_bags or not val_dataset.bags:
        raise TrainingError("train and val splits must be nonempty")

    model = models.Model.create(model_spec, seed=config.seed)
    penalized = model.penalized_names()
    velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}
    rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 0x5E0]))

    val_labels = np.array([b.bag_label for b in val_dataset.bags])
    if val_labels.min() == val_labels.max():
        raise TrainingError("validation split needs both bag classes")

    history_loss, history_auroc = [], []
    best_auroc = -np.inf
    best_epoch = -1
    best_state = None

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_bags))
        total_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            flat, offsets, labels = _batch_arrays(train_bags, idx)
            loss = batch_loss(model, guidance_spec, flat, offsets, labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss {value} at epoch {epoch}, batch "
                    f"{start // config.batch_size} "
                    f"(lr={config.learning_rate}, l1={config.l1_strength})")
            tape.backward(loss)
            for name, p in model.params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                if config.l1_strength > 0 and name in penalized:
                    g = g + config.l1_strength * np.sign(p.data)
                v = velocity[name]
                v *= config.momentum
                v -= config.learning_rate * g
                p.data = p.data + v
                p.grad = None
            total_loss += value * len(idx)
        epoch_loss = total_loss / len(order)
        if config.l1_strength > 0:
            epoch_loss += _l1_value(model, penalized, config.l1_strength)
        probs = score_bags(model, val_dataset.bags)
        val_auroc = metrics.auroc(probs, val_labels)
        history_loss.append(epoch_loss)
        history_auroc.append(val_auroc)
        if val_auroc > best_auroc:
            best_auroc = val_auroc
            best_epoch = epoch
            best_state = model.state_arrays()
        if config.patience is not None and epoch - best_epoch >= config.patience:
            break

    model.load_state(best_state)
    history = TrainHistory(history_loss, history_auroc, best_epoch, best_auroc)
    return model, history


@dataclasses.dataclass
class GridCell:
    learning_rate: float
    l1_strength: float
    val_auroc: float = None
    best_epoch: int = None
    error: str = None


def grid_search(model_spec, guidance_spec, config, train_dataset, val_dataset,
                lr_grid=LR_GRID, l1_grid=L1_GRID, callback=None):
    """Train every (lr, l1) cell; select by validation bag AUROC.

    Ties prefer smaller l1, then smaller lr. Failed cells record their error
    and are excluded from selection. Returns (best model, best history,
    best cell, all cells).
    """
    if not lr_grid or not l1_grid:
        raise ValueError("grids must be nonempty")
    cells = []
    best = None
    for lr in lr_grid:
        for l1 in l1_grid:
            cell_config = dataclasses.replace(
                config, learning_rate=lr, l1_strength=l1)
            cell = GridCell(learning_rate=lr, l1_strength=l1)
            try:
                model, history = train(model_spec, guidance_spec, cell_config,
                                       train_dataset, val_dataset)
                cell.val_auroc = history.best_val_auroc
                cell.best_epoch = history.best_epoch
                if best is None or _beats(cell, best[2]):
                    best = (model, history, cell)
            except (TrainingError, FloatingPointError) as exc:
                cell.error = str(exc)
            cells.append(cell)
            if callback is not None:
                callback(cell)
    if best is None:
        raise TrainingError("every grid cell failed")
    return best[0], best[1], best[2], cells


def _beats(a, b):
    key_a = (-a.val_auroc, a.l1_strength, a.learning_rate)
    key_b = (-b.val_auroc, b.l1_strength, b.learning_rate)
    return key_a < key_b


def grid_to_csv(cells):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["learning_rate", "l1_strength", "val_auroc", "best_epoch",
                     "error"])
    for c in cells:
        writer.writerow([
            f"{c.learning_rate:.17g}",
            f"{c.l1_strength:.17g}",
            "" if c.val_auroc is None else f"{c.val_auroc:.17g}",
            "" if c.best_epoch is None else c.best_epoch,
            c.error or "",
        ])
    return buf.getvalue()
