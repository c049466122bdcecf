import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splitmix.data import (
    LabeledDataset, class_noniid_partition, epoch_batches,
    feature_noniid_partition, iid_partition, load_csv, load_dataset, load_idx,
    load_npz, save_npz, synth_multidomain, train_val_split,
    two_class_bayes_accuracy,
)
from splitmix.errors import ConfigError, DataFormatError


def make_dataset(n=120, classes=6, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (n, dim))
    y = (np.arange(n) % classes).astype(np.int64)
    rng.shuffle(y)
    return LabeledDataset(x, y, classes)


def sample_multiset(ds):
    return sorted(map(tuple, np.column_stack([ds.x.reshape(len(ds), -1),
                                              ds.y[:, None]]).tolist()))


# ---------------------------------------------------------------------------
# partitions

def test_class_partition_gives_exactly_the_requested_label_count():
    ds = make_dataset()
    shards = class_noniid_partition(ds, num_clients=6, classes_per_client=3, seed=1)
    for shard in shards:
        assert len(set(shard.y.tolist())) == 3


def test_class_partition_full_class_set_is_label_iid():
    ds = make_dataset()
    shards = class_noniid_partition(ds, 4, classes_per_client=6, seed=1)
    for shard in shards:
        assert shard.present_classes() == tuple(range(6))


def test_class_partition_preserves_the_sample_multiset():
    ds = make_dataset()
    shards = class_noniid_partition(ds, 5, 3, seed=2)
    merged = sum((sample_multiset(s) for s in shards), [])
    assert sorted(merged) == sample_multiset(ds)


def test_class_partition_infeasible_coverage_rejected():
    ds = make_dataset(classes=10)
    with pytest.raises(ConfigError, match="cover"):
        class_noniid_partition(ds, num_clients=2, classes_per_client=3, seed=0)


def test_partition_is_deterministic_per_seed():
    ds = make_dataset()
    a = class_noniid_partition(ds, 5, 3, seed=3)
    b = class_noniid_partition(ds, 5, 3, seed=3)
    c = class_noniid_partition(ds, 5, 3, seed=4)
    assert all(np.array_equal(x.y, y.y) and np.array_equal(x.x, y.x)
               for x, y in zip(a, b))
    assert any(not np.array_equal(x.y, y.y) for x, y in zip(a, c))


def test_feature_partition_counts_and_domains():
    domains = [make_dataset(n=40, seed=s) for s in range(3)]
    for i, d in enumerate(domains):
        d.domain = i
    shards = feature_noniid_partition(domains, 4, seed=0)
    assert len(shards) == 12
    assert [s.domain for s in shards] == [0] * 4 + [1] * 4 + [2] * 4
    merged = sum((sample_multiset(s) for s in shards), [])
    pooled = sum((sample_multiset(d) for d in domains), [])
    assert sorted(merged) == sorted(pooled)


def test_single_domain_single_client_is_passthrough():
    ds = make_dataset(n=10)
    shards = feature_noniid_partition([ds], 1, seed=0)
    assert len(shards) == 1
    assert sample_multiset(shards[0]) == sample_multiset(ds)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 10), st.integers(0, 1000))
def test_property_iid_partition_covers_exactly(clients, seed):
    ds = make_dataset(n=57)
    shards = iid_partition(ds, clients, seed=seed)
    merged = sum((sample_multiset(s) for s in shards), [])
    assert sorted(merged) == sample_multiset(ds)


def test_present_classes_matches_actual_labels():
    ds = make_dataset()
    for shard in class_noniid_partition(ds, 6, 2, seed=5):
        assert shard.present_classes() == tuple(sorted(set(shard.y.tolist())))


def test_train_val_split_fraction_and_determinism():
    ds = make_dataset(n=50)
    train, val = train_val_split(ds, val_fraction=0.1, seed=0, client_id=3)
    assert len(val) == 5 and len(train) == 45
    train2, val2 = train_val_split(ds, val_fraction=0.1, seed=0, client_id=3)
    assert np.array_equal(val.x, val2.x)
    merged = sample_multiset(train) + sample_multiset(val)
    assert sorted(merged) == sample_multiset(ds)


def test_epoch_batches_cover_all_indices_and_fold_singletons():
    rng = np.random.default_rng(0)
    batches = epoch_batches(17, 8, rng)
    assert sorted(np.concatenate(batches).tolist()) == list(range(17))
    assert all(len(b) >= 2 for b in batches)


# ---------------------------------------------------------------------------
# synthetic generator

def test_zero_domain_shift_makes_domains_identically_distributed():
    train, _ = synth_multidomain(4, 3, 300, 8, domain_shift=0.0,
                                 domain_rotation=0.0, seed=1)
    means = [d.x.mean(0) for d in train]
    np.testing.assert_allclose(means[0], means[1], atol=0.05)
    np.testing.assert_allclose(means[0], means[2], atol=0.05)


def test_domain_shift_moves_the_feature_distribution():
    train, _ = synth_multidomain(4, 2, 400, 8, domain_shift=0.2, seed=1)
    assert np.abs(train[0].x.mean(0) - train[1].x.mean(0)).max() > 0.05


def test_huge_margin_makes_a_linear_probe_perfect():
    train, _ = synth_multidomain(2, 1, 200, 4, margin=40.0, noise=0.005, seed=2)
    ds = train[0]
    # least-squares probe on (x, 1) -> one-hot labels
    phi = np.column_stack([ds.x, np.ones(len(ds))])
    targets = np.eye(2)[ds.y]
    w, *_ = np.linalg.lstsq(phi, targets, rcond=None)
    predictions = (phi @ w).argmax(1)
    assert (predictions == ds.y).mean() == 1.0


def test_knn_accuracy_matches_analytic_bayes_rate():
    margin = 3.0  # Bayes accuracy ~93.3%
    train, test = synth_multidomain(2, 1, 4000, 2, margin=margin, noise=0.05,
                                    test_per_domain=1500, seed=3)
    xtr, ytr = train[0].x, train[0].y
    xte, yte = test[0].x, test[0].y
    d2 = ((xte[:, None, :] - xtr[None, :, :]) ** 2).sum(-1)
    nearest = np.argsort(d2, axis=1)[:, :5]
    votes = ytr[nearest].mean(1) > 0.5
    acc = (votes == yte).mean()
    assert abs(acc - two_class_bayes_accuracy(margin)) < 0.02


def test_images_are_rendered_in_unit_range():
    train, _ = synth_multidomain(4, 2, 50, 64, image_side=8, seed=4)
    assert train[0].x.shape == (50, 1, 8, 8)
    assert train[0].x.min() >= 0.0 and train[0].x.max() <= 1.0


def test_image_side_mismatch_rejected():
    with pytest.raises(ConfigError, match="image_side"):
        synth_multidomain(2, 1, 10, 10, image_side=8)


# ---------------------------------------------------------------------------
# loaders

def write_idx_images(path, arr):
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        for d in arr.shape:
            fh.write(struct.pack(">I", d))
        fh.write(arr.astype(">u1").tobytes())


def write_idx_labels(path, labels):
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, 1]))
        fh.write(struct.pack(">I", len(labels)))
        fh.write(np.asarray(labels, dtype=">u1").tobytes())


def test_idx_pair_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (7, 5, 5), dtype=np.uint8)
    labels = rng.integers(0, 3, 7, dtype=np.uint8)
    write_idx_images(tmp_path / "im.idx", images)
    write_idx_labels(tmp_path / "lb.idx", labels)
    ds = load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")
    assert ds.x.shape == (7, 1, 5, 5)
    np.testing.assert_allclose(ds.x[:, 0] * 255.0, images, atol=1e-9)
    assert np.array_equal(ds.y, labels)


def test_idx_truncated_payload_rejected(tmp_path):
    images = np.zeros((100, 3, 3), dtype=np.uint8)
    write_idx_images(tmp_path / "im.idx", images)
    blob = (tmp_path / "im.idx").read_bytes()
    (tmp_path / "bad.idx").write_bytes(blob[:-9])  # one sample missing
    write_idx_labels(tmp_path / "lb.idx", np.zeros(100, dtype=np.uint8))
    with pytest.raises(DataFormatError, match="declares"):
        load_idx(tmp_path / "bad.idx", tmp_path / "lb.idx")


def test_idx_bad_magic_rejected(tmp_path):
    (tmp_path / "junk.idx").write_bytes(b"\x01\x02\x03\x04" + b"\x00" * 10)
    write_idx_labels(tmp_path / "lb.idx", [0])
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "junk.idx", tmp_path / "lb.idx")


def test_idx_count_mismatch_rejected(tmp_path):
    write_idx_images(tmp_path / "im.idx", np.zeros((4, 2, 2), dtype=np.uint8))
    write_idx_labels(tmp_path / "lb.idx", np.zeros(5, dtype=np.uint8))
    with pytest.raises(DataFormatError, match="mismatch"):
        load_idx(tmp_path / "im.idx", tmp_path / "lb.idx")


def test_csv_round_trip_and_header_contract(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,f0,f1\n0,0.25,0.5\n1,0.75,1.0\n")
    ds = load_csv(path)
    assert ds.x.shape == (2, 2)
    assert ds.y.tolist() == [0, 1]


def test_csv_ragged_row_rejected(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("label,f0,f1\n0,0.25\n")
    with pytest.raises(DataFormatError, match="line 2"):
        load_csv(path)


def test_npz_round_trip(tmp_path):
    ds = make_dataset(n=9)
    save_npz(tmp_path / "d.npz", ds)
    loaded = load_npz(tmp_path / "d.npz")
    assert np.array_equal(loaded.x, ds.x)
    assert np.array_equal(loaded.y, ds.y)
    assert loaded.num_classes == ds.num_classes


def test_load_dataset_missing_file_rejected():
    with pytest.raises(DataFormatError, match="no such file"):
        load_dataset("/nonexistent/thing.csv", "csv")
