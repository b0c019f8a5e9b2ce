"""IDX / CIFAR-10 binary parsing and evaluation-set sampling."""

import struct

import numpy as np
import pytest

from causadv import datasets, synth


def write_small_idx(tmp_path, n=20, rows=28, cols=28, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((n, rows, cols))
    labels = rng.integers(0, 10, size=n)
    ip = tmp_path / "imgs"
    lp = tmp_path / "lbls"
    synth.write_idx(images, labels, ip, lp)
    return images, labels, ip, lp


def test_mnist_round_trip_values_and_ids(tmp_path):
    images, labels, ip, lp = write_small_idx(tmp_path)
    loaded = datasets.load_mnist(ip, lp)
    assert len(loaded) == 20
    for i, img in enumerate(loaded):
        assert img.label == labels[i]
        assert img.id == f"imgs:{i}"
        assert img.pixels.shape == (1, 28, 28)
        assert img.pixels.dtype == np.float32
        # writer quantizes to uint8; round trip is exact at that resolution
        np.testing.assert_allclose(img.pixels[0],
                                   np.round(images[i] * 255) / 255, atol=1e-7)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0


def test_mnist_bad_magic(tmp_path):
    _, _, ip, lp = write_small_idx(tmp_path)
    data = bytearray(ip.read_bytes())
    data[3] = 0x42
    ip.write_bytes(bytes(data))
    with pytest.raises(datasets.BadMagic):
        datasets.load_mnist(ip, lp)


def test_mnist_truncated_and_count_mismatch(tmp_path):
    _, _, ip, lp = write_small_idx(tmp_path)
    short = tmp_path / "short"
    short.write_bytes(ip.read_bytes()[:100])
    with pytest.raises(datasets.DatasetError):
        datasets.load_mnist(short, lp)
    # label header claims a different count
    lbl = bytearray(lp.read_bytes())
    lbl[4:8] = struct.pack(">I", 19)
    bad = tmp_path / "badlbl"
    bad.write_bytes(bytes(lbl))
    with pytest.raises(datasets.DatasetError):
        datasets.load_mnist(ip, bad)


def test_cifar10_parsing(tmp_path):
    rng = np.random.default_rng(1)
    n = 5
    records = []
    labels = rng.integers(0, 10, size=n)
    planes = rng.integers(0, 256, size=(n, 3072), dtype=np.uint8)
    for i in range(n):
        records.append(bytes([labels[i]]) + planes[i].tobytes())
    path = tmp_path / "batch.bin"
    path.write_bytes(b"".join(records))
    loaded = datasets.load_cifar10(path)
    assert len(loaded) == n
    for i, img in enumerate(loaded):
        assert img.label == labels[i]
        assert img.pixels.shape == (3, 32, 32)
        np.testing.assert_allclose(img.pixels.reshape(-1) * 255.0, planes[i], atol=1e-5)


def test_cifar10_error_cases(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 100)  # not a multiple of the record size
    with pytest.raises(datasets.DatasetError):
        datasets.load_cifar10(path)
    path.write_bytes(bytes([11]) + b"\x00" * 3072)  # label out of range
    with pytest.raises(datasets.DatasetError):
        datasets.load_cifar10(path)


def make_images(per_class, classes=4):
    out = []
    for c in range(classes):
        for i in range(per_class):
            out.append(datasets.LabeledImage(
                pixels=np.zeros((1, 2, 2), dtype=np.float32), label=c, id=f"{c}:{i}"))
    return out


def test_eval_set_sampling_is_seeded_and_balanced():
    images = make_images(9)
    a = datasets.build_eval_set(images, classes=4, per_class=3, seed=5)
    b = datasets.build_eval_set(images, classes=4, per_class=3, seed=5)
    c = datasets.build_eval_set(images, classes=4, per_class=3, seed=6)
    ids = [img.id for img in a.all()]
    assert ids == [img.id for img in b.all()]
    assert ids != [img.id for img in c.all()]
    assert len(ids) == 12 and len(set(ids)) == 12
    for cls, group in a.by_class.items():
        assert all(img.label == cls for img in group)


def test_eval_set_insufficient_class_raises():
    images = make_images(2)
    with pytest.raises(datasets.DatasetError):
        datasets.build_eval_set(images, classes=4, per_class=3, seed=0)


def test_synthetic_corpus_properties():
    images, labels = synth.make_corpus(5, seed=3)
    assert images.shape == (50, 28, 28)
    assert images.dtype == np.float32
    assert images.min() >= 0.0 and images.max() <= 1.0
    counts = np.bincount(labels, minlength=10)
    assert (counts == 5).all()
    again, _ = synth.make_corpus(5, seed=3)
    assert images.tobytes() == again.tobytes()
    other, _ = synth.make_corpus(5, seed=4)
    assert images.tobytes() != other.tobytes()


def test_write_corpus_loads_back_through_idx(tmp_path):
    paths = synth.write_corpus(tmp_path, train_per_class=3, test_per_class=2, seed=0)
    train = datasets.load_mnist(*paths["train"])
    test = datasets.load_mnist(*paths["t10k"])
    assert len(train) == 30 and len(test) == 20
    assert {img.label for img in train} == set(range(10))
