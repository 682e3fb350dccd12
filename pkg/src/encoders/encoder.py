"""Encoder abstraction: image -> feature vector."""

import logging
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from src.data.datasets import images_to_tensor
from src.encoders.registry import get_builder
from src.models.features import FeatureBatch
from src.utils.artifacts import digest_state_dict
from src.utils.errors import ConfigurationError, PreconditionError
from src.utils.seeding import stage_seed

logger = logging.getLogger(__name__)

PROVENANCES = ("pretrained-target", "stolen", "defender-surrogate", "local-baseline")


class Encoder(nn.Module):
    """A registered backbone plus the metadata needed to rebuild it."""

    def __init__(
        self,
        arch_id: str,
        feature_dim: int,
        input_shape: Tuple[int, int, int],
        init_seed: int,
        provenance: str = "stolen",
        width: Optional[int] = None,
    ):
        super().__init__()
        if feature_dim <= 0:
            raise ConfigurationError(f"feature_dim must be positive, got {feature_dim}")
        if provenance not in PROVENANCES:
            raise ConfigurationError(f"Unknown provenance '{provenance}'")
        builder = get_builder(arch_id)

        self.arch_id = arch_id
        self.feature_dim = int(feature_dim)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.init_seed = int(init_seed)
        self.provenance = provenance
        self.width = width
        self.config_digest = ""

        # Seed only the construction, leaving the caller's global RNG untouched
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(stage_seed(init_seed, "init", arch_id, feature_dim))
            self.backbone = builder(self.feature_dim, self.input_shape, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def metadata(self) -> Dict:
        return {
            "arch_id": self.arch_id,
            "feature_dim": self.feature_dim,
            "input_shape": list(self.input_shape),
            "init_seed": self.init_seed,
            "provenance": self.provenance,
            "width": self.width,
        }


def init_encoder(
    arch_id: str,
    feature_dim: int,
    input_shape: Tuple[int, int, int],
    seed: int,
    provenance: str = "stolen",
    width: Optional[int] = None,
) -> Encoder:
    """
    Build a randomly initialised encoder; equal arguments give equal weights.

    Args:
        arch_id: Registered architecture id
        feature_dim: Output dimension
        input_shape: H x W x C accepted by the encoder
        seed: Initialisation seed
        provenance: Role of the encoder

    Returns:
        Encoder in training mode
    """
    encoder = Encoder(arch_id, feature_dim, input_shape, seed, provenance=provenance, width=width)
    logger.debug(f"Initialised {arch_id} encoder (dim={feature_dim}, seed={seed}, provenance={provenance})")
    return encoder


def to_input_tensor(encoder: Encoder, images: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """Accept N x H x W x C numpy or N x C x H x W tensors and check the shape."""
    if isinstance(images, np.ndarray):
        if images.ndim != 4:
            raise PreconditionError(f"expected an image batch, got shape {images.shape}")
        images = images_to_tensor(images)
    height, width, channels = encoder.input_shape
    if images.ndim != 4 or tuple(images.shape[1:]) != (channels, height, width):
        raise PreconditionError(
            f"batch shape {tuple(images.shape)} does not match encoder input {encoder.input_shape}"
        )
    return images


def encode(
    encoder: Encoder,
    images: Union[np.ndarray, torch.Tensor],
    batch_size: int = 256,
) -> FeatureBatch:
    """
    Evaluate the encoder in eval mode on a batch.

    Returns:
        FeatureBatch with one row per image (CPU tensor)
    """
    tensor = to_input_tensor(encoder, images)
    if tensor.shape[0] == 0:
        return FeatureBatch(vectors=torch.zeros(0, encoder.feature_dim), source="direct")

    was_training = encoder.training
    encoder.eval()
    rows = []
    try:
        with torch.no_grad():
            for start in range(0, tensor.shape[0], batch_size):
                chunk = tensor[start:start + batch_size].to(encoder.device)
                rows.append(encoder(chunk).float().cpu())
    finally:
        encoder.train(was_training)
    return FeatureBatch(vectors=torch.cat(rows), source="direct")


def encoder_digest(encoder: Encoder) -> str:
    """Content digest of the weights, used as a cache key."""
    return digest_state_dict(encoder.state_dict())
