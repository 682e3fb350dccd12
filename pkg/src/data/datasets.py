"""Dataset loading, channel expansion and surrogate sampling.

On-disk layout, one directory per dataset:

    <root>/<NAME>/manifest.json     {"name", "format_version", "image_shape", "num_classes", "splits": {split: count}}
    <root>/<NAME>/<split>.npz       images: N x H x W x C (uint8 0-255 or float32 0-1), labels: N (optional)
"""

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from src.models.image_set import SPLITS, ImageSet
from src.utils.artifacts import atomic_write_bytes, write_json
from src.utils.errors import ConfigurationError, DatasetLoadError, PreconditionError
from src.utils.seeding import stage_numpy_rng

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
DEFAULT_IMAGE_SHAPE = (32, 32, 3)


@dataclass(frozen=True)
class DatasetInfo:
    """Registry entry: class count and reference split sizes."""

    num_classes: Optional[int]
    sizes: Dict[str, int]
    role: str


DATASET_REGISTRY: Dict[str, DatasetInfo] = {
    "CIFAR10": DatasetInfo(10, {"train": 50000, "test": 10000}, "pretrain"),
    "STL10": DatasetInfo(10, {"train": 5000, "test": 8000, "unlabeled": 100000}, "pretrain"),
    "Food101": DatasetInfo(101, {"train": 90900, "test": 10100}, "pretrain"),
    "ImageNet": DatasetInfo(1000, {"train": 1281167, "unlabeled": 1281167}, "surrogate"),
    "MNIST": DatasetInfo(10, {"train": 60000, "test": 10000}, "downstream"),
    "FashionMNIST": DatasetInfo(10, {"train": 60000, "test": 10000}, "downstream"),
    "SVHN": DatasetInfo(10, {"train": 73257, "test": 26032}, "downstream"),
    "GTSRB": DatasetInfo(43, {"train": 39209, "test": 12630}, "downstream"),
}


def dataset_info(name: str) -> DatasetInfo:
    try:
        return DATASET_REGISTRY[name]
    except KeyError:
        raise ConfigurationError(
            f"Unknown dataset '{name}', expected one of {sorted(DATASET_REGISTRY)}"
        ) from None


def expand_channels(image: np.ndarray) -> np.ndarray:
    """
    Turn an H x W x 1 grayscale image into H x W x 3 by copying the channel.

    Args:
        image: Array with a trailing channel axis of size 1 (a leading batch axis is allowed)

    Returns:
        Array with three channels, each identical to the input channel
    """
    if image.ndim < 3 or image.shape[-1] != 1:
        raise PreconditionError(f"expand_channels needs exactly one channel, got shape {image.shape}")
    return np.repeat(image, 3, axis=-1)


def resize_images(images: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear, antialiased resize of an N x H x W x C float batch."""
    if images.shape[1:3] == (height, width) or len(images) == 0:
        return images
    tensor = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)
    resized = F.interpolate(tensor, size=(height, width), mode="bilinear", align_corners=False, antialias=True)
    return resized.clamp_(0.0, 1.0).permute(0, 2, 3, 1).contiguous().numpy()


def _to_unit_float(images: np.ndarray) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    images = images.astype(np.float32)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise DatasetLoadError(f"float images must lie in [0, 1], found [{images.min()}, {images.max()}]")
    return images


def load_dataset(
    name: str,
    split: str,
    root: Union[str, Path],
    image_shape: Tuple[int, int, int] = DEFAULT_IMAGE_SHAPE,
) -> ImageSet:
    """
    Load one split of a dataset and normalise it to the canonical shape.

    Grayscale sources are channel-expanded, then every image is resized
    (before any augmentation happens downstream).

    Args:
        name: Registered dataset name
        split: 'train', 'test' or 'unlabeled'
        root: Data root holding one directory per dataset
        image_shape: Canonical H x W x C

    Returns:
        ImageSet in the canonical shape
    """
    info = dataset_info(name)
    if split not in SPLITS:
        raise ConfigurationError(f"Unknown split '{split}'")

    directory = Path(root) / name
    manifest_path = directory / "manifest.json"
    split_path = directory / f"{split}.npz"
    if not manifest_path.is_file():
        raise DatasetLoadError(f"Missing manifest for {name} at {manifest_path}")
    if not split_path.is_file():
        raise DatasetLoadError(f"Missing split file for {name}/{split} at {split_path}")

    try:
        with open(manifest_path, "r", encoding="utf-8") as handle:
            manifest = json.load(handle)
        with np.load(split_path, allow_pickle=False) as archive:
            raw_images = archive["images"]
            labels = archive["labels"].astype(np.int64) if "labels" in archive.files else None
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        raise DatasetLoadError(f"Cannot read {name}/{split}: {e}") from e

    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise DatasetLoadError(
            f"{name}: dataset format version {manifest.get('format_version')} != {DATASET_FORMAT_VERSION}"
        )

    if raw_images.ndim == 3:
        raw_images = raw_images[..., None]
    images = _to_unit_float(raw_images)

    height, width, channels = image_shape
    if images.shape[-1] == 1 and channels == 3:
        images = expand_channels(images)
    elif images.shape[-1] != channels:
        raise DatasetLoadError(f"{name}: cannot map {images.shape[-1]} channels to {channels}")
    images = resize_images(images, height, width)

    num_classes = manifest.get("num_classes", info.num_classes)
    if split == "unlabeled":
        labels = None

    logger.info(f"Loaded {name}/{split}: {len(images)} images, shape {images.shape[1:]}")
    return ImageSet(
        images=images,
        name=name,
        split=split,
        labels=labels,
        num_classes=num_classes,
        provenance={"source": name, "split": split, "root": str(root)},
    )


def save_dataset(image_set: ImageSet, root: Union[str, Path]) -> Path:
    """
    Write one split in the on-disk layout, merging it into the dataset manifest.

    Returns:
        Path of the written split file
    """
    directory = Path(root) / image_set.name
    manifest_path = directory / "manifest.json"
    manifest = {
        "name": image_set.name,
        "format_version": DATASET_FORMAT_VERSION,
        "image_shape": list(image_set.shape),
        "num_classes": image_set.num_classes,
        "splits": {},
    }
    if manifest_path.is_file():
        with open(manifest_path, "r", encoding="utf-8") as handle:
            manifest["splits"] = json.load(handle).get("splits", {})
    manifest["splits"][image_set.split] = len(image_set)

    arrays = {"images": image_set.images.astype(np.float32)}
    if image_set.labels is not None:
        arrays["labels"] = image_set.labels.astype(np.int64)
    buffer = io.BytesIO()
    np.savez(buffer, **arrays)

    split_path = directory / f"{image_set.split}.npz"
    atomic_write_bytes(split_path, buffer.getvalue())
    write_json(manifest_path, manifest)
    logger.info(f"Saved {image_set.name}/{image_set.split} ({len(image_set)} images) to {directory}")
    return split_path


def sample_surrogate(source: ImageSet, count: int, seed: int) -> ImageSet:
    """
    Sample `count` images uniformly at random without replacement.

    The result is unlabeled and carries the source name and chosen indices.
    """
    if count < 0 or count > len(source):
        raise PreconditionError(f"Cannot sample {count} images from {source.name} of size {len(source)}")

    rng = stage_numpy_rng(seed, "surrogate", source.name, source.split)
    indices = rng.choice(len(source), size=count, replace=False).astype(np.int64)

    surrogate = ImageSet(
        images=source.images[indices],
        name=source.name,
        split="unlabeled",
        labels=None,
        num_classes=None,
        provenance={
            "source": source.name,
            "split": source.split,
            "kind": "surrogate",
            "seed": seed,
            "indices": indices.tolist(),
        },
    )
    logger.info(f"Sampled surrogate of {count} images from {source.name}/{source.split} (seed={seed})")
    return surrogate


def limit_dataset(image_set: ImageSet, limit: Optional[int], seed: int, key: str = "limit") -> ImageSet:
    """
    Seeded random subset of `limit` rows, kept in their original order.

    The same (seed, key) picks the same rows wherever a limit is applied, so
    the CLI and manifest runs evaluate on identical subsets.
    """
    if limit is None or limit >= len(image_set):
        return image_set
    if limit < 1:
        raise PreconditionError(f"limit must be positive, got {limit}")
    rng = stage_numpy_rng(seed, "surrogate", key, image_set.name, image_set.split)
    indices = np.sort(rng.choice(len(image_set), size=limit, replace=False))
    return image_set.subset(indices.tolist(), suffix=key)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """N x H x W x C numpy batch -> N x C x H x W float32 tensor."""
    if images.ndim != 4:
        raise PreconditionError(f"expected an N x H x W x C batch, got shape {images.shape}")
    return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()
