import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from baatbench.dataset import (FAMILIES, CapacityError, Dataset, DatasetFormatError, DatasetPair, IntegrityError,
                               SyntheticSpec, generate_synthetic, load_cifar10, load_dataset, save_dataset, subset)


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(num_classes=4, per_class_train=50, per_class_test=10, image_size=32, seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for x, y in ((a.train, b.train), (a.test, b.test)):
        assert np.array_equal(x.images, y.images) and np.array_equal(x.labels, y.labels)
    c = generate_synthetic(SyntheticSpec(num_classes=4, per_class_train=50, per_class_test=10, seed=8))
    assert not np.array_equal(a.train.images, c.train.images)


@pytest.mark.parametrize("difficulty", ["easy", "natural"])
def test_synthetic_invariants(difficulty):
    pair = generate_synthetic(SyntheticSpec(num_classes=3, per_class_train=7, per_class_test=2, image_size=20,
                                            difficulty=difficulty))
    assert pair.train.images.shape == (21, 3, 20, 20) and pair.test.images.shape == (6, 3, 20, 20)
    assert pair.train.images.dtype == np.uint8
    assert np.bincount(pair.train.labels).tolist() == [7, 7, 7]
    assert pair.train.split == "train" and pair.test.split == "test"
    # classes are interleaved, not sorted
    assert not np.all(np.diff(pair.train.labels) >= 0)


def test_two_classes_two_families():
    pair = generate_synthetic(SyntheticSpec(num_classes=2, per_class_train=5, per_class_test=1))
    assert sorted(set(pair.train.labels.tolist())) == [0, 1]
    assert FAMILIES[0] != FAMILIES[1]
    means = [pair.train.images[pair.train.labels == k].astype(float).mean(0) for k in (0, 1)]
    assert not np.allclose(means[0], means[1])


@pytest.mark.parametrize("kw", [dict(num_classes=1), dict(num_classes=len(FAMILIES) + 1), dict(image_size=8),
                                dict(difficulty="hard")])
def test_synthetic_preconditions(kw):
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(**kw))


def _spectral_features(images):
    gray = images.astype(np.float64).mean(axis=1)
    gray -= gray.mean(axis=(1, 2), keepdims=True)
    mag = np.abs(np.fft.rfft2(gray))
    f = mag.reshape(len(images), -1)
    return f / (np.linalg.norm(f, axis=1, keepdims=True) + 1e-12)


def test_easy_classes_linearly_recoverable():
    """Logistic probe on translation-invariant |FFT| features exceeds 95%."""
    pair = generate_synthetic(SyntheticSpec(num_classes=4, per_class_train=200, per_class_test=50))
    xtr, xte = _spectral_features(pair.train.images), _spectral_features(pair.test.images)
    mu, sd = xtr.mean(0), xtr.std(0) + 1e-9
    xtr, xte = torch.tensor((xtr - mu) / sd), torch.tensor((xte - mu) / sd)
    ytr = torch.tensor(pair.train.labels)
    torch.manual_seed(0)
    lin = torch.nn.Linear(xtr.shape[1], 4).double()
    opt = torch.optim.LBFGS(lin.parameters(), max_iter=300)

    def closure():
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(lin(xtr), ytr) + 1e-2 * lin.weight.pow(2).sum()
        loss.backward()
        return loss

    opt.step(closure)
    acc = float((lin(xte).argmax(1).numpy() == pair.test.labels).mean())
    assert acc > 0.95


def test_dataset_validation():
    img = np.zeros((2, 3, 4, 4), np.uint8)
    with pytest.raises(ValueError):
        Dataset("x", img.astype(np.float32), [0, 1], 2)
    with pytest.raises(ValueError):
        Dataset("x", img, [0, 2], 2)
    with pytest.raises(ValueError):
        Dataset("x", np.zeros((2, 2, 4, 4), np.uint8), [0, 1], 2)
    with pytest.raises(ValueError):
        Dataset("x", img, [0], 2)
    ds = Dataset("x", img, [0, 1], 2)
    assert ds[1].label == 1 and ds[1].pixels.shape == (3, 4, 4)
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1  # read-only


# --- CIFAR-10 binary reader on a fabricated batch directory


def _write_batches(d, n_train_per_file=3, n_test=2, seed=0):
    r = np.random.default_rng(seed)
    recs = {}
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        n = n_test if name.startswith("test") else n_train_per_file
        rec = np.concatenate([r.integers(0, 10, size=(n, 1)), r.integers(0, 256, size=(n, 3072))], 1)
        rec = rec.astype(np.uint8)
        rec.tofile(d / name)
        recs[name] = rec
    return recs


def test_cifar10_reader_bit_exact(tmp_path):
    recs = _write_batches(tmp_path)
    pair = load_cifar10(tmp_path)
    first = recs["data_batch_1.bin"][0]
    assert pair.train.labels[0] == first[0]
    assert np.array_equal(pair.train.images[0].reshape(-1), first[1:])
    # R, G, B planes, each 32x32 row-major
    assert pair.train.images[0, 1, 0, 0] == first[1 + 1024]
    assert len(pair.train) == 15 and len(pair.test) == 2 and pair.num_classes == 10


def test_cifar10_truncated_names_file(tmp_path):
    _write_batches(tmp_path)
    p = tmp_path / "data_batch_3.bin"
    p.write_bytes(p.read_bytes()[:-100])
    with pytest.raises(DatasetFormatError, match="data_batch_3.bin.*offset 6146"):
        load_cifar10(tmp_path)


def test_cifar10_missing_file(tmp_path):
    _write_batches(tmp_path)
    (tmp_path / "test_batch.bin").unlink()
    with pytest.raises(DatasetFormatError, match="test_batch.bin"):
        load_cifar10(tmp_path)


# --- subsetting


def test_subset_relabels_and_preserves_order(easy4):
    sub = subset(easy4, [2, 0], 10, 5, seed=3)
    assert sub.num_classes == 2 and len(sub.train) == 20 and len(sub.test) == 10
    assert set(sub.train.labels.tolist()) == {0, 1}
    # each retained image appears in the parent in the same relative order
    pos = [int(np.flatnonzero((easy4.train.images == x).all(axis=(1, 2, 3)))[0]) for x in sub.train.images]
    assert pos == sorted(pos)
    orig = easy4.train.labels[pos]
    assert np.array_equal(np.where(orig == 2, 0, 1), sub.train.labels)
    assert np.array_equal(subset(easy4, [2, 0], 10, 5, seed=3).train.images, sub.train.images)


def test_subset_single_class(easy4):
    sub = subset(easy4, [3], 5, 2)
    assert sub.num_classes == 1 and set(sub.train.labels.tolist()) == {0}


def test_subset_capacity_error(easy4):
    with pytest.raises(CapacityError, match="class 0 "):
        subset(easy4, [0, 1], 10, 600)


# --- persistence

small_sets = st.builds(
    lambda imgs, k, seed: (imgs, np.random.default_rng(seed).integers(0, k, size=len(imgs)), k),
    arrays(np.uint8, st.tuples(st.integers(1, 4), st.sampled_from([1, 3]), st.just(5), st.just(6))),
    st.integers(1, 5), st.integers(0, 100))


@settings(max_examples=15, deadline=None)
@given(data=small_sets)
def test_save_load_roundtrip(tmp_path_factory, data):
    imgs, labels, k = data
    ds = Dataset("rt", imgs, labels, k, "test", {"origin": "hypothesis"})
    d = tmp_path_factory.mktemp("rt")
    save_dataset(ds, d)
    back = load_dataset(d)
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == k and back.split == "test" and back.notes == {"origin": "hypothesis"}


def _saved(tmp_path, easy4):
    ds = easy4.test.take(range(4))
    save_dataset(ds, tmp_path)
    return json.loads((tmp_path / "manifest.json").read_text())


def test_load_missing_file(tmp_path, easy4):
    _saved(tmp_path, easy4)
    (tmp_path / "images" / "000002.png").unlink()
    with pytest.raises(IntegrityError, match="missing file"):
        load_dataset(tmp_path)


def test_load_bad_label(tmp_path, easy4):
    m = _saved(tmp_path, easy4)
    m["labels"][1] = 9
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(IntegrityError, match="outside"):
        load_dataset(tmp_path)


def test_load_no_manifest(tmp_path):
    with pytest.raises(IntegrityError):
        load_dataset(tmp_path)


def test_pair_num_classes(easy4):
    assert isinstance(easy4, DatasetPair) and easy4.num_classes == 4
