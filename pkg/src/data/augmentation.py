"""Stochastic augmentation composition.

Random parameters are drawn from an explicit torch.Generator so that one
image's augmentation depends only on (seed, epoch, image index); the
pixel operations themselves come from torchvision.
"""

import logging
import math
from typing import Sequence

import torch
import torchvision.transforms.functional as TF

from config.schemas import AugmentationSpec
from src.utils.errors import PreconditionError
from src.utils.seeding import stage_generator

logger = logging.getLogger(__name__)


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * torch.rand(1, generator=generator).item()


def _randint(generator: torch.Generator, high: int) -> int:
    """Integer in [0, high)."""
    return int(torch.randint(0, high, (1,), generator=generator).item())


def _crop_params(height: int, width: int, spec: AugmentationSpec, generator: torch.Generator):
    area = height * width
    log_low, log_high = math.log(spec.crop_ratio[0]), math.log(spec.crop_ratio[1])
    for _ in range(10):
        target_area = area * _uniform(generator, *spec.crop_scale)
        aspect = math.exp(_uniform(generator, log_low, log_high))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        if 0 < w <= width and 0 < h <= height:
            top = _randint(generator, height - h + 1)
            left = _randint(generator, width - w + 1)
            return top, left, h, w

    # Fallback: central crop at the clamped ratio
    ratio = width / height
    if ratio < spec.crop_ratio[0]:
        w, h = width, int(round(width / spec.crop_ratio[0]))
    elif ratio > spec.crop_ratio[1]:
        h, w = height, int(round(height * spec.crop_ratio[1]))
    else:
        w, h = width, height
    return (height - h) // 2, (width - w) // 2, h, w


def _color_jitter(image: torch.Tensor, spec: AugmentationSpec, generator: torch.Generator) -> torch.Tensor:
    adjustments = []
    if spec.brightness > 0:
        factor = _uniform(generator, max(0.0, 1 - spec.brightness), 1 + spec.brightness)
        adjustments.append(lambda img, f=factor: TF.adjust_brightness(img, f))
    if spec.contrast > 0:
        factor = _uniform(generator, max(0.0, 1 - spec.contrast), 1 + spec.contrast)
        adjustments.append(lambda img, f=factor: TF.adjust_contrast(img, f))
    if spec.saturation > 0:
        factor = _uniform(generator, max(0.0, 1 - spec.saturation), 1 + spec.saturation)
        adjustments.append(lambda img, f=factor: TF.adjust_saturation(img, f))
    if spec.hue > 0:
        factor = _uniform(generator, -spec.hue, spec.hue)
        adjustments.append(lambda img, f=factor: TF.adjust_hue(img, f))

    order = torch.randperm(len(adjustments), generator=generator).tolist()
    for position in order:
        image = adjustments[position](image)
    return image


def augment(image: torch.Tensor, spec: AugmentationSpec, generator: torch.Generator) -> torch.Tensor:
    """
    Apply the configured operations, in order, to one C x H x W image in [0, 1].

    Args:
        image: Image tensor
        spec: Augmentation composition
        generator: RNG state; a fresh generator gives a fresh augmentation

    Returns:
        Augmented image of the same shape, clamped to [0, 1]
    """
    if image.ndim != 3:
        raise PreconditionError(f"augment expects C x H x W, got {tuple(image.shape)}")
    channels, height, width = image.shape
    needs_rgb = {"ColorJitter", "RandomGrayScale"} & set(spec.ops)
    if needs_rgb and channels != 3:
        raise PreconditionError(f"{sorted(needs_rgb)} need 3 channels, got {channels}")

    out = image
    for op in spec.ops:
        if op == "RandomResizedCrop":
            top, left, h, w = _crop_params(height, width, spec, generator)
            out = TF.resized_crop(out, top, left, h, w, [height, width], antialias=True)
        elif op == "RandomHorizontalFlip":
            if torch.rand(1, generator=generator).item() < spec.flip_p:
                out = TF.hflip(out)
        elif op == "ColorJitter":
            if torch.rand(1, generator=generator).item() < spec.jitter_p:
                out = _color_jitter(out, spec, generator)
        elif op == "RandomGrayScale":
            if torch.rand(1, generator=generator).item() < spec.gray_p:
                out = TF.rgb_to_grayscale(out, num_output_channels=3)
    return out.clamp(0.0, 1.0)


def augment_batch(
    images: torch.Tensor,
    spec: AugmentationSpec,
    seed: int,
    epoch: int,
    indices: Sequence[int],
) -> torch.Tensor:
    """
    Augment an N x C x H x W batch with one RNG stream per (epoch, image index).

    Args:
        images: Batch tensor
        spec: Augmentation composition
        seed: Experiment seed
        epoch: Epoch number (a new epoch gives new augmentations)
        indices: Dataset index of each row, used to partition the RNG

    Returns:
        Augmented batch of the same shape
    """
    if len(indices) != images.shape[0]:
        raise PreconditionError(f"{len(indices)} indices for a batch of {images.shape[0]}")
    if not spec.ops:
        return images.clone()
    views = [
        augment(image, spec, stage_generator(seed, "augment", epoch, int(index)))
        for image, index in zip(images, indices)
    ]
    return torch.stack(views)
