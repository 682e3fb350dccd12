"""Named, independently seedable RNG streams."""

import hashlib
import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)

STAGES = ("surrogate", "augment", "init", "shuffle", "poison", "classifier", "pretrain")


def stage_seed(seed: int, stage: str, *keys) -> int:
    """
    Derive a 63-bit seed for one pipeline stage.

    Args:
        seed: Experiment seed
        stage: Stage name, one of STAGES
        keys: Extra partition keys (epoch, image index, ...)

    Returns:
        Non-negative integer seed
    """
    if stage not in STAGES:
        raise ValueError(f"Unknown RNG stage: {stage}")
    material = ":".join([str(int(seed)), stage] + [str(k) for k in keys])
    digest = hashlib.sha256(material.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def stage_generator(seed: int, stage: str, *keys) -> torch.Generator:
    """Return a CPU torch generator seeded for (seed, stage, keys)."""
    generator = torch.Generator()
    generator.manual_seed(stage_seed(seed, stage, *keys))
    return generator


def stage_numpy_rng(seed: int, stage: str, *keys) -> np.random.Generator:
    """Return a numpy generator seeded for (seed, stage, keys)."""
    return np.random.default_rng(stage_seed(seed, stage, *keys))


def enable_deterministic():
    """Force reproducible kernels."""
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False
    logger.info("Deterministic mode enabled")
