from __future__ import annotations

import struct

import numpy as np
import pytest

from autodiff import RngStream
from data import Dataset, generate, load_idx, placeholder, sample_batches, split_sizes, write_idx
from errors import ConfigError, DataFormatError


@pytest.mark.parametrize(
    ("n", "expected"),
    [(100, (70, 15, 15)), (10, (7, 1, 2)), (5, (3, 1, 1)), (4, (2, 1, 1))],
)
def test_split_sizes(n, expected) -> None:
    assert split_sizes(n) == expected


@pytest.mark.parametrize("kind", ["two-moons", "spirals", "gaussian-blobs", "stripes"])
def test_generators_are_deterministic_and_partitioned(kind) -> None:
    first = generate(kind, 60, noise=0.1, seed=4, side=5)
    again = generate(kind, 60, noise=0.1, seed=4, side=5)
    other = generate(kind, 60, noise=0.1, seed=5, side=5)
    np.testing.assert_array_equal(first.inputs, again.inputs)
    assert first.fingerprint() == again.fingerprint()
    assert first.fingerprint() != other.fingerprint()
    covered = np.sort(np.concatenate([first.split_indices(s) for s in ("train", "val", "test")]))
    np.testing.assert_array_equal(covered, np.arange(60))
    assert first.split_indices("train").size == 42


def test_two_moons_lie_on_their_arcs() -> None:
    data = generate("two-moons", 50, noise=0.0, seed=1)
    outer = data.inputs[data.labels == 0]
    inner = data.inputs[data.labels == 1]
    assert len(outer) == 25 and len(inner) == 25
    np.testing.assert_allclose(np.hypot(outer[:, 0], outer[:, 1]), 1.0, atol=1e-12)
    assert np.all(outer[:, 1] >= -1e-12)
    np.testing.assert_allclose(np.hypot(inner[:, 0] - 1.0, inner[:, 1] - 0.5), 1.0, atol=1e-12)
    assert np.all(inner[:, 1] <= 0.5 + 1e-12)


def test_gaussian_blobs_are_separable_by_nearest_center() -> None:
    data = generate("gaussian-blobs", 90, noise=0.5, seed=3, classes=3)
    angles = 2.0 * np.pi * np.arange(3) / 3
    centers = 4.0 * np.column_stack([np.cos(angles), np.sin(angles)])
    distances = np.linalg.norm(data.inputs[:, None, :] - centers[None, :, :], axis=2)
    assert np.array_equal(distances.argmin(axis=1), data.labels)


def test_stripes_are_row_or_column_images(stripes) -> None:
    clean = generate("stripes", 20, noise=0.0, seed=0, side=5)
    assert clean.image_side == 5 and clean.dim == 25
    for image, label in zip(clean.inputs.reshape(-1, 5, 5), clean.labels):
        axis = 1 if label == 0 else 0
        assert sorted(image.sum(axis=axis)) == [0.0] * 4 + [5.0]
    assert stripes.num_classes == 2


def test_generate_rejects_bad_arguments() -> None:
    with pytest.raises(ConfigError):
        generate("circles", 20)
    with pytest.raises(ConfigError):
        generate("two-moons", 3)
    with pytest.raises(ConfigError):
        generate("two-moons", 20, noise=-0.1)


def test_placeholder_has_one_val_and_test_row() -> None:
    data = placeholder(5)
    assert data.n == 7
    assert data.split_indices("train").size == 5
    assert list(data.split_indices("val")) == [5]
    assert list(data.split_indices("test")) == [6]
    np.testing.assert_array_equal(data.inputs, np.zeros((7, 1)))


def test_batches_cover_the_split_once_with_a_short_tail() -> None:
    data = placeholder(10)
    batches = sample_batches(data, "train", 3, RngStream(0), epoch=0)
    assert [batch.size for batch in batches] == [3, 3, 3, 1]
    seen = np.concatenate([batch.indices for batch in batches])
    np.testing.assert_array_equal(np.sort(seen), np.arange(10))


def test_batches_depend_on_seed_and_epoch(moons) -> None:
    def order(seed, epoch):
        batches = sample_batches(moons, "train", 8, RngStream(seed), epoch)
        return np.concatenate([b.indices for b in batches])

    np.testing.assert_array_equal(order(1, 2), order(1, 2))
    assert not np.array_equal(order(1, 2), order(1, 3))
    assert not np.array_equal(order(1, 2), order(2, 2))


def test_batches_follow_the_stream_not_just_the_seed(moons) -> None:
    def order(rng):
        return np.concatenate([b.indices for b in sample_batches(moons, "train", 8, rng, 0)])

    np.testing.assert_array_equal(order(RngStream(1, 5)), order(RngStream(1, 5)))
    assert not np.array_equal(order(RngStream(1, 5)), order(RngStream(1, 6)))
    assert not np.array_equal(order(RngStream(1).child("sgd")), order(RngStream(1).child("sam")))


def test_batch_size_must_fit_the_split(moons) -> None:
    with pytest.raises(ConfigError):
        sample_batches(moons, "train", 0, RngStream(0), epoch=0)
    with pytest.raises(ConfigError):
        sample_batches(moons, "val", 10, RngStream(0), epoch=0)


def test_empty_and_unknown_splits() -> None:
    data = Dataset(np.zeros((2, 1)), np.zeros(2, dtype=np.int64),
                   {"train": [0, 1], "val": []}, provenance="two rows")
    with pytest.raises(DataFormatError):
        sample_batches(data, "val", 1, RngStream(0), epoch=0)
    with pytest.raises(ConfigError):
        data.split_indices("test")


def test_splits_must_partition_the_rows() -> None:
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((3, 1)), np.zeros(3, dtype=np.int64),
                {"train": [0, 1], "test": [1, 2]}, provenance="overlap")
    with pytest.raises(DataFormatError):
        Dataset(np.zeros((3, 1)), np.zeros(2, dtype=np.int64), {"train": [0, 1, 2]}, provenance="short")


def _write_idx_files(tmp_path, labels=(1, 0)):
    images = tmp_path / "images.idx"
    label_file = tmp_path / "labels.idx"
    pixels = bytes([0, 255, 51, 102, 255, 0, 0, 255])
    images.write_bytes(struct.pack(">4I", 0x00000803, 2, 2, 2) + pixels)
    label_file.write_bytes(struct.pack(">2I", 0x00000801, len(labels)) + bytes(labels))
    return images, label_file


def test_load_idx_scales_pixels(tmp_path) -> None:
    images, labels = _write_idx_files(tmp_path)
    data = load_idx(images, labels)
    assert data.n == 2 and data.dim == 4 and data.image_side == 2
    np.testing.assert_allclose(data.inputs[0], [0.0, 1.0, 0.2, 0.4])
    assert list(data.labels) == [1, 0]
    assert data.num_classes == 2


def test_load_idx_rejects_count_mismatch_and_bad_magic(tmp_path) -> None:
    images, labels = _write_idx_files(tmp_path, labels=(1, 0, 1))
    with pytest.raises(DataFormatError):
        load_idx(images, labels)
    with pytest.raises(DataFormatError):
        load_idx(labels, images)
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "missing.idx", labels)


def test_stripes_survive_an_idx_round_trip(tmp_path) -> None:
    data = generate("stripes", 12, noise=0.0, seed=2, side=4)
    write_idx(data, tmp_path / "x.idx", tmp_path / "y.idx")
    loaded = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    np.testing.assert_array_equal(loaded.inputs, data.inputs)
    np.testing.assert_array_equal(loaded.labels, data.labels)


def test_write_idx_needs_images(tmp_path, moons) -> None:
    with pytest.raises(DataFormatError):
        write_idx(moons, tmp_path / "x.idx", tmp_path / "y.idx")


@pytest.mark.parametrize("label", [256, -1, 1.5])
def test_write_idx_rejects_labels_that_do_not_fit_a_byte(tmp_path, label) -> None:
    data = Dataset(np.zeros((2, 4)), np.array([0, label]), {"train": [0], "test": [1]},
                   provenance="wide labels", image_side=2)
    with pytest.raises(DataFormatError):
        write_idx(data, tmp_path / "x.idx", tmp_path / "y.idx")
    assert not (tmp_path / "x.idx").exists()
    assert not (tmp_path / "y.idx").exists()
