"""Architecture registry.

Maps architecture ids onto desk-scale networks. Families follow the usual
ones (plain conv, VGG, ResNet, MobileNet, ShuffleNet, DenseNet); stems are
adjusted for 32 x 32 inputs and widths are reduced.
"""

import logging
from typing import Callable, Dict, Optional, Tuple

import torch.nn as nn
from torchvision import models

from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)

Builder = Callable[[int, Tuple[int, int, int], Optional[int]], nn.Module]


def _conv_block(in_channels: int, out_channels: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=True),
    )


def _small_conv(feature_dim: int, input_shape: Tuple[int, int, int], width: Optional[int]) -> nn.Module:
    w = width or 32
    channels = input_shape[2]
    return nn.Sequential(
        _conv_block(channels, w),
        nn.MaxPool2d(2),
        _conv_block(w, 2 * w),
        nn.MaxPool2d(2),
        _conv_block(2 * w, 4 * w),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(4 * w, feature_dim),
    )


def _small_conv_wide(feature_dim: int, input_shape: Tuple[int, int, int], width: Optional[int]) -> nn.Module:
    return _small_conv(feature_dim, input_shape, width or 64)


def _vgg_small(feature_dim: int, input_shape: Tuple[int, int, int], width: Optional[int]) -> nn.Module:
    w = width or 32
    channels = input_shape[2]
    return nn.Sequential(
        _conv_block(channels, w),
        nn.MaxPool2d(2),
        _conv_block(w, 2 * w),
        nn.MaxPool2d(2),
        _conv_block(2 * w, 4 * w),
        _conv_block(4 * w, 4 * w),
        nn.MaxPool2d(2),
        _conv_block(4 * w, 8 * w),
        _conv_block(8 * w, 8 * w),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(8 * w, feature_dim),
    )


def _cifar_stem(network: nn.Module, channels: int) -> nn.Module:
    network.conv1 = nn.Conv2d(channels, 64, kernel_size=3, stride=1, padding=1, bias=False)
    network.maxpool = nn.Identity()
    return network


def _fixed_width(arch_id: str, width: Optional[int]):
    if width is not None:
        raise ConfigurationError(f"{arch_id} has fixed stage widths; width={width} is not supported")


def _resnet18(feature_dim: int, input_shape: Tuple[int, int, int], width: Optional[int]) -> nn.Module:
    _fixed_width("resnet18", width)
    return _cifar_stem(models.resnet18(weights=None, num_classes=feature_dim), input_shape[2])


def _resnet34(feature_dim: int, input_shape: Tuple[int, int, int], width: Optional[int]) -> nn.Module:
    _fixed_width("resnet34", width)
    return _cifar_stem(models.resnet34(weights=None, num_classes=feature_dim), input_shape[2])


def _mobilenet(feature_dim: int, input_shape: Tuple[int, int, int], width: Optional[int]) -> nn.Module:
    # width is the stem channel count; torchvision's stem is 32 * width_mult
    network = models.mobilenet_v2(weights=None, num_classes=feature_dim, width_mult=(width or 16) / 32)
    stem = network.features[0][0]
    network.features[0][0] = nn.Conv2d(
        input_shape[2], stem.out_channels, kernel_size=3, stride=stem.stride, padding=1, bias=False
    )
    return network


def _shufflenet(feature_dim: int, input_shape: Tuple[int, int, int], width: Optional[int]) -> nn.Module:
    # width 24 reproduces shufflenet_v2_x0_5
    w = width or 24
    network = models.ShuffleNetV2(
        stages_repeats=[4, 8, 4],
        stages_out_channels=[24, 2 * w, 4 * w, 8 * w, 1024],
        num_classes=feature_dim,
    )
    network.conv1[0] = nn.Conv2d(input_shape[2], 24, kernel_size=3, stride=2, padding=1, bias=False)
    return network


def _densenet_small(feature_dim: int, input_shape: Tuple[int, int, int], width: Optional[int]) -> nn.Module:
    network = models.DenseNet(
        growth_rate=width or 12,
        block_config=(4, 8, 12, 8),
        num_init_features=24,
        num_classes=feature_dim,
    )
    network.features.conv0 = nn.Conv2d(input_shape[2], 24, kernel_size=7, stride=2, padding=3, bias=False)
    return network


ARCHITECTURES: Dict[str, Builder] = {
    "small-conv": _small_conv,
    "small-conv-wide": _small_conv_wide,
    "vgg-s": _vgg_small,
    "resnet18": _resnet18,
    "resnet34": _resnet34,
    "mobilenet": _mobilenet,
    "shufflenet": _shufflenet,
    "densenet-s": _densenet_small,
}

# Least to most expressive within the families that form a chain
EXPRESSIVENESS_ORDER = ("small-conv", "small-conv-wide", "vgg-s", "resnet18", "resnet34")


def get_builder(arch_id: str) -> Builder:
    try:
        return ARCHITECTURES[arch_id]
    except KeyError:
        raise ConfigurationError(
            f"Unknown architecture '{arch_id}', expected one of {sorted(ARCHITECTURES)}"
        ) from None


def next_more_expressive(arch_id: str) -> str:
    """Default stolen architecture: one step up the chain from the target."""
    get_builder(arch_id)
    if arch_id not in EXPRESSIVENESS_ORDER:
        return "resnet34"
    position = EXPRESSIVENESS_ORDER.index(arch_id)
    return EXPRESSIVENESS_ORDER[min(position + 1, len(EXPRESSIVENESS_ORDER) - 1)]
