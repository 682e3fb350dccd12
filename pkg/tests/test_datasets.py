import json

import numpy as np
import pytest

from conftest import SHAPE, random_images
from src.data.datasets import (
    dataset_info,
    expand_channels,
    images_to_tensor,
    limit_dataset,
    load_dataset,
    resize_images,
    sample_surrogate,
)
from src.utils.errors import ConfigurationError, DatasetLoadError, PreconditionError


def test_load_returns_canonical_shape_and_labels(data_root):
    train = load_dataset("GTSRB", "train", data_root, SHAPE)
    assert len(train) == 24
    assert train.shape == SHAPE
    assert train.images.dtype == np.float32
    assert train.num_classes == 2
    assert set(np.unique(train.labels)) == {0, 1}


def test_grayscale_is_expanded_to_identical_channels(data_root):
    mnist = load_dataset("MNIST", "test", data_root, SHAPE)
    assert mnist.shape == SHAPE
    assert np.array_equal(mnist.images[..., 0], mnist.images[..., 1])
    assert np.array_equal(mnist.images[..., 0], mnist.images[..., 2])


def test_expand_channels_rejects_color_input():
    with pytest.raises(PreconditionError):
        expand_channels(np.zeros((4, 4, 3), dtype=np.float32))


def test_resize_to_larger_canonical_shape(data_root):
    bigger = load_dataset("GTSRB", "test", data_root, (16, 16, 3))
    assert bigger.shape == (16, 16, 3)
    assert bigger.images.min() >= 0.0 and bigger.images.max() <= 1.0


def test_resize_is_noop_at_target_size():
    images = random_images(3)
    assert resize_images(images, 8, 8) is images


def test_unlabeled_split_has_no_labels(data_root):
    stl = load_dataset("STL10", "unlabeled", data_root, SHAPE)
    assert stl.labels is None
    assert not stl.is_labeled


def test_uint8_images_are_scaled(tmp_path):
    directory = tmp_path / "SVHN"
    directory.mkdir()
    (directory / "manifest.json").write_text(json.dumps({"name": "SVHN", "format_version": 1, "num_classes": 10}))
    np.savez(directory / "test.npz", images=np.full((2, 8, 8, 3), 255, dtype=np.uint8), labels=np.array([0, 1]))
    loaded = load_dataset("SVHN", "test", tmp_path, SHAPE)
    assert loaded.images.dtype == np.float32
    assert np.allclose(loaded.images, 1.0)
    assert loaded.labels.tolist() == [0, 1]


def test_missing_files_raise_dataset_load_error(tmp_path):
    with pytest.raises(DatasetLoadError):
        load_dataset("CIFAR10", "train", tmp_path, SHAPE)


def test_unknown_dataset_name_is_a_configuration_error(tmp_path):
    with pytest.raises(ConfigurationError):
        load_dataset("NotADataset", "train", tmp_path, SHAPE)
    with pytest.raises(ConfigurationError):
        dataset_info("NotADataset")


def test_sample_surrogate_without_replacement(data_root):
    source = load_dataset("CIFAR10", "train", data_root, SHAPE)
    sample = sample_surrogate(source, 15, seed=7)
    indices = sample.provenance["indices"]
    assert len(sample) == 15
    assert len(set(indices)) == 15
    assert sample.labels is None
    assert sample.split == "unlabeled"
    assert np.array_equal(sample.images, source.images[indices])


def test_sample_surrogate_is_deterministic(data_root):
    source = load_dataset("CIFAR10", "train", data_root, SHAPE)
    first = sample_surrogate(source, 10, seed=3)
    second = sample_surrogate(source, 10, seed=3)
    other = sample_surrogate(source, 10, seed=4)
    assert first.provenance["indices"] == second.provenance["indices"]
    assert first.provenance["indices"] != other.provenance["indices"]


def test_sample_surrogate_bounds(data_root):
    source = load_dataset("CIFAR10", "train", data_root, SHAPE)
    assert len(sample_surrogate(source, 0, seed=0)) == 0
    assert len(sample_surrogate(source, len(source), seed=0)) == len(source)
    with pytest.raises(PreconditionError):
        sample_surrogate(source, len(source) + 1, seed=0)


def test_images_to_tensor_is_channels_first():
    tensor = images_to_tensor(random_images(2))
    assert tuple(tensor.shape) == (2, 3, 8, 8)


def test_limit_dataset_picks_a_seeded_ordered_subset(data_root):
    train = load_dataset("GTSRB", "train", data_root, SHAPE)
    limited = limit_dataset(train, 6, seed=0, key="downstream")
    indices = limited.provenance["indices"]
    assert len(limited) == 6
    assert indices == sorted(indices) and len(set(indices)) == 6
    assert np.array_equal(limited.labels, train.labels[indices])
    assert limit_dataset(train, 6, seed=0, key="downstream").provenance["indices"] == indices
    assert limit_dataset(train, 6, seed=1, key="downstream").provenance["indices"] != indices


def test_limit_dataset_without_a_smaller_limit_is_identity(data_root):
    train = load_dataset("GTSRB", "train", data_root, SHAPE)
    assert limit_dataset(train, None, seed=0) is train
    assert limit_dataset(train, len(train), seed=0) is train
    with pytest.raises(PreconditionError):
        limit_dataset(train, 0, seed=0)
