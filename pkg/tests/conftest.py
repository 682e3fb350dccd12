"""Shared fixtures: tiny images, tiny encoders, an in-process service and an on-disk data root."""

import numpy as np
import pytest
import torch

from src.data.datasets import save_dataset
from src.encoders.encoder import init_encoder
from src.handlers.service import EaaSService
from src.managers.ledger_manager import QueryLedger
from src.models.image_set import ImageSet

SHAPE = (8, 8, 3)
FEATURE_DIM = 16
WIDTH = 4


def random_images(n, seed=0, shape=SHAPE):
    rng = np.random.default_rng(seed)
    return rng.random((n, *shape), dtype=np.float32)


def two_class_set(name, split, n, seed=0, channels=3):
    """Dark images are class 0, bright images class 1."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 1, 0.8, 0.2).astype(np.float32)
    noise = rng.uniform(-0.1, 0.1, size=(n, 8, 8, channels)).astype(np.float32)
    images = np.clip(base[:, None, None, None] + noise, 0.0, 1.0)
    return ImageSet(images=images, name=name, split=split, labels=labels.astype(np.int64), num_classes=2)


def tiny_encoder(seed=1, provenance="pretrained-target", arch="small-conv"):
    return init_encoder(arch, FEATURE_DIM, SHAPE, seed, provenance=provenance, width=WIDTH)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def target_encoder():
    return tiny_encoder(seed=1).eval()


@pytest.fixture
def surrogate_set():
    return ImageSet(images=random_images(12, seed=3), name="STL10", split="unlabeled")


@pytest.fixture
def ledger():
    return QueryLedger(price_per_1000=3.2)


@pytest.fixture
def service(target_encoder, ledger):
    eaas = EaaSService(target_encoder, ledger=ledger)
    eaas.open_account("attacker")
    return eaas


@pytest.fixture
def data_root(tmp_path):
    """Toy datasets in the on-disk layout, 8 x 8 images."""
    root = tmp_path / "data"
    save_dataset(ImageSet(random_images(40, seed=10), "CIFAR10", "train", labels=np.arange(40) % 10, num_classes=10), root)
    save_dataset(ImageSet(random_images(40, seed=11), "STL10", "unlabeled"), root)
    save_dataset(two_class_set("GTSRB", "train", 24, seed=12), root)
    save_dataset(two_class_set("GTSRB", "test", 12, seed=13), root)
    save_dataset(two_class_set("MNIST", "train", 24, seed=14, channels=1), root)
    save_dataset(two_class_set("MNIST", "test", 12, seed=15, channels=1), root)
    return root
