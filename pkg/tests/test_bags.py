"""Bag data model, binary file round-trips, and patient-level splitting."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmil import bags


def make_bag(bag_id="b0", patient_id="p0", s=5, m=3, label=1, with_labels=True,
             seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(s, m)).astype(np.float32)
    inst = None
    if with_labels:
        inst = np.zeros(s, dtype=np.uint8)
        if label == 1:
            inst[s // 2] = 1
    return bags.Bag(bag_id=bag_id, patient_id=patient_id, features=feats,
                    bag_label=label, instance_labels=inst)


class TestBagValidation:
    def test_features_cast_to_float32(self):
        bag = bags.Bag("b", "p", np.ones((2, 3), dtype=np.float64), 0)
        assert bag.features.dtype == np.float32
        assert bag.size == 2 and bag.dim == 3

    def test_empty_bag_rejected(self):
        with pytest.raises(bags.BagError):
            bags.Bag("b", "p", np.empty((0, 3), dtype=np.float32), 0)

    def test_one_dimensional_features_rejected(self):
        with pytest.raises(bags.BagError):
            bags.Bag("b", "p", np.ones(4, dtype=np.float32), 0)

    def test_bag_label_must_be_binary(self):
        with pytest.raises(bags.BagError):
            bags.Bag("b", "p", np.ones((2, 3), dtype=np.float32), 2)

    def test_instance_label_length_checked(self):
        with pytest.raises(bags.BagError):
            bags.Bag("b", "p", np.ones((3, 2), dtype=np.float32), 1,
                     instance_labels=np.array([1, 0]))

    def test_negative_bag_with_positive_instance_rejected(self):
        with pytest.raises(bags.BagError):
            bags.Bag("b", "p", np.ones((2, 2), dtype=np.float32), 0,
                     instance_labels=np.array([0, 1]))

    def test_positive_bag_needs_a_positive_instance(self):
        with pytest.raises(bags.BagError):
            bags.Bag("b", "p", np.ones((2, 2), dtype=np.float32), 1,
                     instance_labels=np.array([0, 0]))

    def test_instance_labels_must_be_binary(self):
        with pytest.raises(bags.BagError):
            bags.Bag("b", "p", np.ones((2, 2), dtype=np.float32), 1,
                     instance_labels=np.array([2, 0]))

    def test_without_instance_labels(self):
        bag = make_bag()
        stripped = bag.without_instance_labels()
        assert stripped.instance_labels is None
        assert stripped.equals(bag) is False
        assert stripped.bag_id == bag.bag_id
        assert np.array_equal(stripped.features, bag.features)


class TestDataset:
    def test_dim_mismatch_rejected(self):
        with pytest.raises(bags.BagError):
            bags.Dataset(bags=[make_bag(m=3)], dim=4)

    def test_len_and_positive_fraction(self):
        ds = bags.Dataset(
            bags=[make_bag("a", label=1), make_bag("b", label=0,
                                                   with_labels=False)],
            dim=3)
        assert len(ds) == 2
        assert ds.positive_fraction() == 0.5

    def test_split_assignment_patient_atomicity_enforced(self):
        two = [make_bag("a", "p1"), make_bag("b", "p1")]
        with pytest.raises(bags.BagError):
            bags.Dataset(bags=two, dim=3,
                         split_assignment={"a": "train", "b": "val"})

    def test_split_assignment_must_cover_all_bags(self):
        with pytest.raises(bags.BagError):
            bags.Dataset(bags=[make_bag("a")], dim=3, split_assignment={})

    def test_split_view_drops_assignment(self):
        ds = bags.Dataset(bags=[make_bag("a", "p1"), make_bag("b", "p2")],
                          dim=3,
                          split_assignment={"a": "train", "b": "test"})
        train = ds.split("train")
        assert [b.bag_id for b in train.bags] == ["a"]
        assert train.split_assignment is None


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        original = bags.Dataset(
            bags=[make_bag("a", "p1", s=4, m=6, label=1),
                  make_bag("b", "p2", s=9, m=6, label=0, with_labels=False)],
            dim=6)
        path = tmp_path / "data.gmilbags"
        bags.save_bags(original, path)
        loaded = bags.load_bags(path)
        assert loaded.equals(original)
        assert loaded.dim == 6
        assert loaded.bags[0].features.dtype == np.float32

    def test_rewrite_is_byte_identical(self, tmp_path):
        ds = bags.Dataset(bags=[make_bag("a")], dim=3)
        p1, p2 = tmp_path / "x1", tmp_path / "x2"
        bags.save_bags(ds, p1)
        bags.save_bags(ds, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"NOTABAGS" + b"\0" * 32)
        with pytest.raises(bags.BagFormatError):
            bags.load_bags(path)

    def test_unsupported_version_rejected(self, tmp_path):
        ds = bags.Dataset(bags=[make_bag("a")], dim=3)
        path = tmp_path / "data"
        bags.save_bags(ds, path)
        raw = bytearray(path.read_bytes())
        raw[8] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(bags.BagFormatError):
            bags.load_bags(path)

    def test_truncated_file_rejected(self, tmp_path):
        ds = bags.Dataset(bags=[make_bag("a", s=8, m=5)], dim=5)
        path = tmp_path / "data"
        bags.save_bags(ds, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(bags.BagFormatError):
            bags.load_bags(path)

    def test_corrupt_labels_rejected_on_load(self, tmp_path):
        """A file whose labels break the MIL assumption fails validation."""
        ds = bags.Dataset(bags=[make_bag("a", s=3, label=1)], dim=3)
        path = tmp_path / "data"
        bags.save_bags(ds, path)
        raw = bytearray(path.read_bytes())
        # instance labels sit right after the fixed per-bag header
        header = 8 + 16 + 2 + len(b"a") + 2 + len(b"p0") + 6
        raw[header:header + 3] = bytes([0, 0, 0])
        path.write_bytes(bytes(raw))
        with pytest.raises(bags.BagFormatError):
            bags.load_bags(path)

    @settings(max_examples=25, deadline=None)
    @given(data=st.data())
    def test_round_trip_random_datasets(self, data, tmp_path_factory):
        m = data.draw(st.integers(1, 6))
        n = data.draw(st.integers(1, 5))
        rng = np.random.default_rng(data.draw(st.integers(0, 2 ** 31)))
        items = []
        for i in range(n):
            s = data.draw(st.integers(1, 7))
            label = data.draw(st.integers(0, 1))
            with_labels = data.draw(st.booleans())
            feats = rng.normal(size=(s, m)).astype(np.float32)
            inst = None
            if with_labels:
                inst = np.zeros(s, dtype=np.uint8)
                if label:
                    inst[rng.integers(s)] = 1
            items.append(bags.Bag(f"bag{i}", f"pat{i % 3}", feats, label, inst))
        ds = bags.Dataset(bags=items, dim=m)
        path = tmp_path_factory.mktemp("rt") / "data"
        bags.save_bags(ds, path)
        assert bags.load_bags(path).equals(ds)


def build_cohort(n_patients=30, bags_per_patient=2, positive_every=3, m=4):
    """Multi-bag patients with a deterministic positive pattern."""
    out = []
    for p in range(n_patients):
        label = 1 if p % positive_every == 0 else 0
        for k in range(bags_per_patient):
            out.append(make_bag(f"b{p}-{k}", f"p{p}", s=3, m=m, label=label,
                                with_labels=False, seed=p * 7 + k))
    return bags.Dataset(bags=out, dim=m)


class TestSplitByPatient:
    def test_patients_stay_together(self):
        ds = build_cohort()
        result = bags.split_by_patient(ds, seed=3)
        by_patient = {}
        for bag in result.bags:
            name = result.split_assignment[bag.bag_id]
            by_patient.setdefault(bag.patient_id, set()).add(name)
        assert all(len(v) == 1 for v in by_patient.values())

    def test_ratio_quotas_hit_exactly(self):
        ds = build_cohort(n_patients=30)
        result = bags.split_by_patient(ds, ratios=(4, 1, 1), seed=0)
        patient_split = {b.patient_id: result.split_assignment[b.bag_id]
                         for b in result.bags}
        counts = {name: 0 for name in bags.SPLIT_NAMES}
        for name in patient_split.values():
            counts[name] += 1
        assert counts == {"train": 20, "val": 5, "test": 5}

    def test_positive_fraction_tracks_global(self):
        ds = build_cohort(n_patients=60, positive_every=2)
        result = bags.split_by_patient(ds, ratios=(2, 1, 1), seed=5)
        overall = ds.positive_fraction()
        for name in bags.SPLIT_NAMES:
            part = result.split(name)
            assert abs(part.positive_fraction() - overall) < 0.12

    def test_seed_changes_assignment_but_not_counts(self):
        ds = build_cohort()
        r1 = bags.split_by_patient(ds, seed=0)
        r2 = bags.split_by_patient(ds, seed=1)
        assert r1.split_assignment != r2.split_assignment
        for name in bags.SPLIT_NAMES:
            assert len(r1.split(name)) == len(r2.split(name))

    def test_same_seed_reproduces(self):
        ds = build_cohort()
        r1 = bags.split_by_patient(ds, seed=9)
        r2 = bags.split_by_patient(ds, seed=9)
        assert r1.split_assignment == r2.split_assignment

    def test_too_few_patients_rejected(self):
        ds = bags.Dataset(bags=[make_bag("a", "p1"), make_bag("b", "p2")],
                          dim=3)
        with pytest.raises(bags.BagError):
            bags.split_by_patient(ds)

    def test_every_patient_assigned(self):
        ds = build_cohort(n_patients=7)
        result = bags.split_by_patient(ds, seed=2)
        assert set(result.split_assignment) == {b.bag_id for b in ds.bags}
