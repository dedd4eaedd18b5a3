"""Bag/dataset data model, the on-disk bag file format, and patient-level splitting.

A bag is an ordered sequence of instance feature vectors (one CT slice
embedding per instance) with a single binary label and, optionally, a binary
label per instance. Instance order is meaningful and preserved everywhere.

The file format is a small little-endian binary container (magic ``GMILBAGS``)
that round-trips float32 features bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable, Optional

import numpy as np

MAGIC = b"GMILBAGS"
FORMAT_VERSION = 1

SPLIT_NAMES = ("train", "val", "test")


class BagError(ValueError):
    """Invalid bag or dataset contents."""


class BagFormatError(BagError):
    """Malformed or truncated bag file."""


@dataclass(frozen=True)
class Bag:
    """One ordered bag of instance embeddings.

    features has shape (S, M), float32. instance_labels, when present, is a
    length-S uint8 vector of {0, 1}. Under the standard MIL assumption a bag
    is negative iff all of its instances are negative.
    """

    bag_id: str
    patient_id: str
    features: np.ndarray
    bag_label: int
    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise BagError(f"bag {self.bag_id!r}: features must be a nonempty S x M matrix")
        object.__setattr__(self, "features", feats)
        if self.bag_label not in (0, 1):
            raise BagError(f"bag {self.bag_id!r}: bag_label must be 0 or 1")
        if self.instance_labels is not None:
            labels = np.ascontiguousarray(self.instance_labels, dtype=np.uint8)
            if labels.shape != (feats.shape[0],):
                raise BagError(f"bag {self.bag_id!r}: instance_labels length != S")
            if not np.isin(labels, (0, 1)).all():
                raise BagError(f"bag {self.bag_id!r}: instance_labels must be 0/1")
            if self.bag_label == 0 and labels.any():
                raise BagError(
                    f"bag {self.bag_id!r}: negative bag with a positive instance label"
                )
            if self.bag_label == 1 and not labels.any():
                raise BagError(
                    f"bag {self.bag_id!r}: positive bag with no positive instance label"
                )
            object.__setattr__(self, "instance_labels", labels)

    @property
    def size(self) -> int:
        """Number of instances S."""
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        """Feature dimension M."""
        return self.features.shape[1]

    def without_instance_labels(self) -> "Bag":
        return replace(self, instance_labels=None)

    def equals(self, other: "Bag") -> bool:
        """Field-for-field equality, with float bits compared exactly."""
        if (self.bag_id, self.patient_id, self.bag_label) != (
            other.bag_id,
            other.patient_id,
            other.bag_label,
        ):
            return False
        if self.features.shape != other.features.shape:
            return False
        if self.features.tobytes() != other.features.tobytes():
            return False
        if (self.instance_labels is None) != (other.instance_labels is None):
            return False
        if self.instance_labels is not None:
            return bool((self.instance_labels == other.instance_labels).all())
        return True


@dataclass
class Dataset:
    """A collection of bags sharing one feature dimension.

    split_assignment maps bag_id -> one of "train"/"val"/"test". The split is
    patient-atomic: all bags of a patient carry the same split label.
    """

    bags: list[Bag]
    dim: int
    split_assignment: Optional[dict[str, str]] = field(default=None)

    def __post_init__(self):
        for bag in self.bags:
            if bag.dim != self.dim:
                raise BagError(
                    f"bag {bag.bag_id!r} has dim {bag.dim}, dataset dim is {self.dim}"
                )
        if self.split_assignment is not None:
            self._check_split()

    def _check_split(self):
        patient_split: dict[str, str] = {}
        for bag in self.bags:
            name = self.split_assignment.get(bag.bag_id)
            if name is None:
                raise BagError(f"bag {bag.bag_id!r} missing from split_assignment")
            if name not in SPLIT_NAMES:
                raise BagError(f"unknown split name {name!r}")
            seen = patient_split.setdefault(bag.patient_id, name)
            if seen != name:
                raise BagError(
                    f"patient {bag.patient_id!r} appears in splits {seen!r} and {name!r}"
                )

    def __len__(self) -> int:
        return len(self.bags)

    def split(self, name: str) -> "Dataset":
        """Sub-dataset of one split (assignment is dropped on the result)."""
        if self.split_assignment is None:
            raise BagError("dataset has no split assignment")
        if name not in SPLIT_NAMES:
            raise BagError(f"unknown split name {name!r}")
        bags = [b for b in self.bags if self.split_assignment[b.bag_id] == name]
        return Dataset(bags=bags, dim=self.dim)

    def positive_fraction(self) -> float:
        if not self.bags:
            return 0.0
        return float(np.mean([b.bag_label for b in self.bags]))

    def without_instance_labels(self) -> "Dataset":
        return Dataset(
            bags=[b.without_instance_labels() for b in self.bags],
            dim=self.dim,
            split_assignment=dict(self.split_assignment) if self.split_assignment else None,
        )

    def equals(self, other: "Dataset") -> bool:
        if self.dim != other.dim or len(self.bags) != len(other.bags):
            return False
        return all(a.equals(b) for a, b in zip(self.bags, other.bags))


def _write_str(fh: BinaryIO, value: str) -> None:
    raw = value.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise BagError("identifier longer than 65535 bytes")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise BagFormatError(f"truncated file: wanted {n} bytes, got {len(raw)}")
    return raw


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    return _read_exact(fh, n).decode("utf-8")


def save_bags(dataset: Dataset, path) -> None:
    """Write a dataset to ``path`` in the bag file format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIQ", FORMAT_VERSION, dataset.dim, len(dataset.bags)))
        for bag in dataset.bags:
            _write_str(fh, bag.bag_id)
            _write_str(fh, bag.patient_id)
            has_labels = bag.instance_labels is not None
            fh.write(struct.pack("<IBB", bag.size, bag.bag_label, int(has_labels)))
            if has_labels:
                fh.write(bag.instance_labels.tobytes())
            fh.write(np.ascontiguousarray(bag.features, dtype="<f4").tobytes())


def load_bags(path) -> Dataset:
    """Read a dataset written by :func:`save_bags`.

    Validates the MIL label assumption (negative bag => all instance labels 0;
    positive bag => at least one 1) and rejects files that violate it.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, 8) != MAGIC:
            raise BagFormatError(f"{path}: bad magic, not a bag file")
        version, dim, count = struct.unpack("<IIQ", _read_exact(fh, 16))
        if version != FORMAT_VERSION:
            raise BagFormatError(f"{path}: unsupported format version {version}")
        bags = []
        for _ in range(count):
            bag_id = _read_str(fh)
            patient_id = _read_str(fh)
            size, bag_label, has_labels = struct.unpack("<IBB", _read_exact(fh, 6))
            instance_labels = None
            if has_labels:
                instance_labels = np.frombuffer(_read_exact(fh, size), dtype=np.uint8)
            features = np.frombuffer(
                _read_exact(fh, 4 * size * dim), dtype="<f4"
            ).reshape(size, dim)
            try:
                bags.append(
                    Bag(
                        bag_id=bag_id,
                        patient_id=patient_id,
                        features=features,
                        bag_label=int(bag_label),
                        instance_labels=instance_labels,
                    )
                )
            except BagError as exc:
                raise BagFormatError(f"{path}: {exc}") from exc
    return Dataset(bags=bags, dim=dim)


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer apportionment of ``total`` by ``weights`` (largest remainder)."""
    exact = total * weights / weights.sum()
    base = np.floor(exact).astype(int)
    order = np.argsort(-(exact - base), kind="stable")
    for i in order[: total - base.sum()]:
        base[i] += 1
    return base


def split_by_patient(
    dataset: Dataset, ratios: tuple[int, int, int] = (4, 1, 1), seed: int = 0
) -> Dataset:
    """Assign patients (never individual bags) to train/val/test.

    Patients are grouped by class (a patient is positive if any of their bags
    is), shuffled per class with a seeded generator, and dealt so that per-class
    counts stay proportional while overall split sizes hit the ratio quota.
    The positive fraction of every split therefore tracks the global fraction
    whenever the patient counts permit.
    """
    patients: dict[str, int] = {}
    for bag in dataset.bags:
        patients[bag.patient_id] = max(patients.get(bag.patient_id, 0), bag.bag_label)
    if len(patients) < 3:
        raise BagError(f"need at least 3 patients to split, have {len(patients)}")

    weights = np.asarray(ratios, dtype=float)
    n_total = len(patients)
    overall_target = _largest_remainder(n_total, weights)

    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {0: [], 1: []}
    for pid in sorted(patients):
        by_class[patients[pid]].append(pid)

    counts = {}
    assigned = np.zeros(3, dtype=int)
    fractional = {}
    for label in (1, 0):
        n_c = len(by_class[label])
        exact = n_c * weights / weights.sum()
        base = np.floor(exact).astype(int)
        counts[label] = base
        fractional[label] = exact - base
        assigned += base
    # Hand out the per-class leftovers to whichever split is furthest below
    # its overall quota, preferring the split the class itself leans toward.
    for label in (1, 0):
        leftovers = len(by_class[label]) - counts[label].sum()
        for _ in range(leftovers):
            deficit = overall_target - assigned
            best = max(
                range(3), key=lambda s: (deficit[s], fractional[label][s], -s)
            )
            counts[label][best] += 1
            assigned[best] += 1

    assignment: dict[str, str] = {}
    for label in (1, 0):
        pids = list(by_class[label])
        rng.shuffle(pids)
        cursor = 0
        for split_idx, name in enumerate(SPLIT_NAMES):
            take = counts[label][split_idx]
            for pid in pids[cursor : cursor + take]:
                assignment[pid] = name
            cursor += take

    split_assignment = {bag.bag_id: assignment[bag.patient_id] for bag in dataset.bags}
    return Dataset(
        bags=list(dataset.bags), dim=dataset.dim, split_assignment=split_assignment
    )
