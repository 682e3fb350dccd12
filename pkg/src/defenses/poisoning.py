"""Feature poisoning defense.

For every query the service adds a bounded perturbation delta to the target
feature so that it moves away from what the defender's own stolen copy f_s'
produces for the image and for a random augmented view of it:

    maximise  d(f + delta, f_s'(x)) + lambda * d(f + delta, f_s'(A(x)))
    subject to ||delta||_p <= epsilon
"""

import logging
from typing import Optional, Tuple

import torch

from config.schemas import PoisoningConfig
from src.data.augmentation import augment
from src.defenses.base import DefenseAdapter
from src.encoders.encoder import Encoder, encode
from src.training.attack import feature_distance
from src.utils.artifacts import digest_array
from src.utils.errors import ConfigurationError, PreconditionError
from src.utils.seeding import stage_generator

logger = logging.getLogger(__name__)


def project_l2(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Scale each row back onto the l2 ball of radius epsilon."""
    if epsilon < 0:
        raise PreconditionError(f"epsilon must be non-negative, got {epsilon}")
    if epsilon == 0:
        return torch.zeros_like(delta)
    norms = torch.linalg.vector_norm(delta, dim=-1, keepdim=True)
    scale = torch.where(norms > epsilon, epsilon / norms.clamp_min(torch.finfo(delta.dtype).tiny), torch.ones_like(norms))
    projected = delta * scale
    # rounding in the division can leave a row a hair outside the ball
    over = torch.linalg.vector_norm(projected, dim=-1, keepdim=True) > epsilon
    while bool(over.any()):
        projected = torch.where(over, projected * (1.0 - 4 * torch.finfo(delta.dtype).eps), projected)
        over = torch.linalg.vector_norm(projected, dim=-1, keepdim=True) > epsilon
    return projected


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clip every entry to [-epsilon, epsilon]."""
    if epsilon < 0:
        raise PreconditionError(f"epsilon must be non-negative, got {epsilon}")
    return delta.clamp(-epsilon, epsilon)


def _delta_norm(delta: torch.Tensor, norm: str) -> torch.Tensor:
    if norm == "linf":
        return delta.abs().amax(dim=-1)
    return torch.linalg.vector_norm(delta, dim=-1)


def augmented_views(images: torch.Tensor, config: PoisoningConfig) -> torch.Tensor:
    """One augmented view per image, seeded by the image content."""
    if not config.augmentation.ops:
        return images.clone()
    views = [
        augment(image, config.augmentation, stage_generator(config.seed, "poison", digest_array(image)))
        for image in images
    ]
    return torch.stack(views)


def poisoning_objective(
    poisoned: torch.Tensor,
    clean_anchor: torch.Tensor,
    augmented_anchor: torch.Tensor,
    config: PoisoningConfig,
) -> torch.Tensor:
    """Per-row objective for already-computed surrogate features."""
    value = feature_distance(config.metric, poisoned, clean_anchor)
    if config.lam > 0:
        value = value + config.lam * feature_distance(config.metric, poisoned, augmented_anchor)
    return value


def poison_with_delta(
    images: torch.Tensor,
    clean: torch.Tensor,
    config: PoisoningConfig,
    surrogate: Optional[Encoder],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Run projected gradient ascent on delta for a batch.

    Args:
        images: N x C x H x W queried images
        clean: N x d target features
        config: Poisoning parameters
        surrogate: Defender's stolen encoder f_s'

    Returns:
        (poisoned features in the dtype of `clean`, float64 delta)
    """
    if surrogate is None:
        raise ConfigurationError("feature poisoning needs a defender surrogate encoder")
    if config.epsilon < 0:
        raise PreconditionError(f"epsilon must be non-negative, got {config.epsilon}")
    if images.shape[0] != clean.shape[0]:
        raise PreconditionError(f"{images.shape[0]} images for {clean.shape[0]} feature rows")

    base = clean.detach().to(torch.float64)
    best_delta = torch.zeros_like(base)
    if config.epsilon == 0 or config.steps == 0 or base.shape[0] == 0:
        return clean.clone(), best_delta

    anchor = encode(surrogate, images).vectors.to(torch.float64)
    augmented_anchor = encode(surrogate, augmented_views(images, config)).vectors.to(torch.float64)
    if anchor.shape != base.shape:
        raise ConfigurationError(
            f"surrogate feature dim {anchor.shape[1]} does not match target feature dim {base.shape[1]}"
        )

    project = project_linf if config.norm == "linf" else project_l2
    step_size = config.effective_step_size

    with torch.no_grad():
        best_value = poisoning_objective(base, anchor, augmented_anchor, config)

    delta = torch.zeros_like(base)
    for _ in range(config.steps):
        delta.requires_grad_(True)
        objective = poisoning_objective(base + delta, anchor, augmented_anchor, config)
        (grad,) = torch.autograd.grad(objective.sum(), delta)
        grad = torch.nan_to_num(grad)

        with torch.no_grad():
            if config.norm == "linf":
                step = step_size * grad.sign()
            else:
                norms = torch.linalg.vector_norm(grad, dim=-1, keepdim=True)
                step = torch.where(norms > 0, step_size * grad / norms.clamp_min(1e-300), torch.zeros_like(grad))
            delta = project(delta.detach() + step, config.epsilon)

            value = poisoning_objective(base + delta, anchor, augmented_anchor, config)
            improved = value > best_value
            best_value = torch.where(improved, value, best_value)
            best_delta = torch.where(improved.unsqueeze(-1), delta, best_delta)

    assert bool((_delta_norm(best_delta, config.norm) <= config.epsilon).all())
    poisoned = (base + best_delta).to(clean.dtype)
    return poisoned, best_delta


def poison(
    images: torch.Tensor,
    clean: torch.Tensor,
    config: PoisoningConfig,
    surrogate: Optional[Encoder],
) -> torch.Tensor:
    """Poisoned features f_t(x) + delta for a batch."""
    poisoned, _ = poison_with_delta(images, clean, config, surrogate)
    return poisoned


class PoisoningDefense(DefenseAdapter):
    kind = "poisoning"

    def __init__(self, config: PoisoningConfig, surrogate: Optional[Encoder]):
        if surrogate is None:
            raise ConfigurationError("feature poisoning needs a defender surrogate encoder")
        self.config = config
        self.surrogate = surrogate.eval()
        self.logger = logger

    def apply(self, images: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        poisoned = poison(images, features, self.config, self.surrogate)
        self.logger.debug(f"Poisoned {features.shape[0]} feature vectors (eps={self.config.epsilon})")
        return poisoned

    def describe(self) -> str:
        return f"poison:eps={self.config.epsilon},norm={self.config.norm}"
