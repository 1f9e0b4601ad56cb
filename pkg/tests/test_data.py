import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.linear_model import LogisticRegression

from splitproj.data import (Dataset, PoisonSpec, apply_poison, dataset_hash, dirichlet_partition, fnv1a64,
                            load_idx, select_malicious, synth_blobs, train_test_split, write_idx)
from splitproj.errors import FormatError, InconsistentPair, InvalidArgument, PartitionFailure


def small_ds(n=100, classes=4, seed=0):
    gen = np.random.default_rng(seed)
    return Dataset(gen.uniform(size=(n, 1, 4, 4)), np.arange(n) % classes, classes)


def test_fnv1a64_reference_values():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_blobs_spread_zero_is_constant_per_class():
    ds = synth_blobs(3, 5, dims=64, spread=0.0, rng=1)
    assert ds.images.shape == (15, 1, 8, 8)
    for c in range(3):
        imgs = ds.images[ds.labels == c]
        assert np.all(imgs == imgs[0])
    assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_blobs_linearly_separable():
    ds = synth_blobs(2, 200, dims=256, spread=0.1, rng=0)
    x = ds.images.reshape(len(ds), -1)
    probe = LogisticRegression(max_iter=2000).fit(x, ds.labels)
    assert probe.score(x, ds.labels) >= 0.99


def test_blobs_reproducible_hash():
    a = dataset_hash(synth_blobs(3, 10, rng=4))
    assert a == dataset_hash(synth_blobs(3, 10, rng=4))
    assert a != dataset_hash(synth_blobs(3, 10, rng=5))
    assert len(a) == 16
    with pytest.raises(InvalidArgument):
        synth_blobs(1, 10)
    with pytest.raises(InvalidArgument):
        synth_blobs(2, 10, dims=10)


def test_split_is_stratified_and_disjoint():
    ds = small_ds(100)
    rest, test = train_test_split(ds, 0.2, 3)
    assert len(test) == 20 and len(rest) == 80
    assert np.all(test.class_histogram() == 5)
    assert set(test.indices).isdisjoint(rest.indices)


def _write_raw(path, magic, dims, data):
    path.write_bytes(struct.pack(f">I{len(dims)}I", magic, *dims) + bytes(data))


def test_idx_single_pixel(tmp_path):
    _write_raw(tmp_path / "i", 0x803, (1, 1, 1), [255])
    _write_raw(tmp_path / "l", 0x801, (1,), [0])
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (1, 1, 1, 1) and ds.images[0, 0, 0, 0] == 1.0


def test_idx_roundtrip(tmp_path):
    gen = np.random.default_rng(0)
    pixels = gen.integers(0, 256, size=(10, 1, 5, 6))
    ds = Dataset(pixels / 255.0, gen.integers(0, 3, size=10), 3)
    write_idx(tmp_path / "i", tmp_path / "l", ds)
    back = load_idx(tmp_path / "i", tmp_path / "l", num_classes=3)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert dataset_hash(back) == dataset_hash(ds)


def test_idx_errors(tmp_path):
    _write_raw(tmp_path / "i", 0x803, (2, 1, 1), [1, 2])
    _write_raw(tmp_path / "l", 0x801, (3,), [0, 1, 0])
    with pytest.raises(InconsistentPair):
        load_idx(tmp_path / "i", tmp_path / "l")
    _write_raw(tmp_path / "bad", 0x802, (2, 1, 1), [1, 2])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "bad", tmp_path / "l")
    (tmp_path / "hdr").write_bytes(struct.pack(">I", 0x803))  # header only, extents missing
    with pytest.raises(FormatError):
        load_idx(tmp_path / "hdr", tmp_path / "l")
    _write_raw(tmp_path / "short", 0x803, (2, 2, 2), [1, 2, 3])
    with pytest.raises(FormatError):
        load_idx(tmp_path / "short", tmp_path / "l")


@given(st.integers(1, 12), st.floats(0.05, 100.0), st.integers(0, 2**31))
def test_partition_is_exact_cover(n, alpha, seed):
    ds = small_ds(60, classes=3)
    try:
        shards = dirichlet_partition(ds, n, alpha, seed)
    except PartitionFailure:
        return
    assert len(shards) == n and all(len(s) for s in shards)
    idx = np.concatenate([s.indices for s in shards])
    assert sorted(idx.tolist()) == list(range(len(ds)))


def test_partition_iid_limit():
    ds = small_ds(4000, classes=4)
    shards = dirichlet_partition(ds, 10, 1e7, 0)
    glob = ds.class_histogram() / len(ds)
    for s in shards:
        share = s.class_histogram() / len(s)
        assert np.all(np.abs(share - glob) <= 0.05 * glob)


def test_partition_concentrates_at_small_alpha():
    ds = small_ds(1000, classes=10)
    medians = []
    for seed in range(20):
        shards = dirichlet_partition(ds, 10, 0.1, seed)
        dominant = [s.class_histogram().max() / len(s) for s in shards]
        medians.append(np.median(dominant))
    assert np.median(medians) >= 0.5


def test_partition_reproducible_and_errors():
    ds = small_ds(100)
    a = dirichlet_partition(ds, 5, 0.5, 9)
    b = dirichlet_partition(ds, 5, 0.5, 9)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))
    with pytest.raises(PartitionFailure):
        dirichlet_partition(small_ds(3, classes=3), 5, 1.0, 0, max_retries=5)
    with pytest.raises(InvalidArgument):
        dirichlet_partition(ds, 0, 1.0, 0)
    with pytest.raises(InvalidArgument):
        dirichlet_partition(ds, 2, 0.0, 0)


def test_poison_counts_and_trigger():
    ds = small_ds(100)
    spec = PoisonSpec(target_class=2, rate=0.3)
    out = apply_poison(ds, spec, 7)
    assert len(out.poisoned) == 30
    np.testing.assert_array_equal(out.poisoned, apply_poison(ds, spec, 7).poisoned)
    assert np.all(out.labels[out.poisoned] == 2)
    assert np.all(out.images[out.poisoned, :, :3, :3] == 1.0)
    rest = np.setdiff1d(np.arange(100), out.poisoned)
    assert dataset_hash(out.subset(rest)) == dataset_hash(ds.subset(rest))
    # the caller's shard is not modified
    assert not np.any(np.all(ds.images[:, :, :3, :3] == 1.0, axis=(1, 2, 3)))


def test_poison_extremes():
    ds = small_ds(20)
    same = apply_poison(ds, PoisonSpec(rate=0.0), 0)
    assert dataset_hash(same) == dataset_hash(ds)
    full = apply_poison(ds, PoisonSpec(rate=1.0, target_class=1), 0)
    assert np.all(full.labels == 1) and np.all(full.images[:, :, :3, :3] == 1.0)
    with pytest.raises(InvalidArgument):
        apply_poison(Dataset(np.zeros((2, 1, 2, 2)), [0, 1], 2), PoisonSpec(), 0)
    with pytest.raises(InvalidArgument):
        PoisonSpec(rate=1.5)


def test_select_malicious():
    assert len(select_malicious(10, PoisonSpec(malicious_fraction=0.1), 0)) == 1
    assert len(select_malicious(10, PoisonSpec(malicious_fraction=0.3), 0)) == 3
    assert select_malicious(10, PoisonSpec(malicious_fraction=0.0), 0) == []
    assert select_malicious(10, PoisonSpec(), 3) == select_malicious(10, PoisonSpec(), 3)


def test_dataset_validation():
    with pytest.raises(InvalidArgument):
        Dataset(np.zeros((2, 4, 4)), [0, 1], 2)
    with pytest.raises(InvalidArgument):
        Dataset(np.zeros((2, 1, 4, 4)), [0, 2], 2)
