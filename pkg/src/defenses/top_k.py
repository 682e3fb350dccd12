"""Top-k features defense."""

import logging

import torch

from src.defenses.base import DefenseAdapter
from src.utils.errors import PreconditionError

logger = logging.getLogger(__name__)


def top_k(vectors: torch.Tensor, k: int) -> torch.Tensor:
    """
    Keep the k entries with the largest absolute value, zero the rest.

    Ties are broken in favour of the lower index. Works on a single vector
    or row-wise on a batch.
    """
    dim = vectors.shape[-1]
    if not 1 <= k <= dim:
        raise PreconditionError(f"k must lie in [1, {dim}], got {k}")
    # stable descending sort keeps equal magnitudes in index order
    order = torch.sort(vectors.abs(), dim=-1, descending=True, stable=True).indices
    keep = torch.zeros_like(vectors, dtype=torch.bool).scatter(-1, order[..., :k], True)
    return torch.where(keep, vectors, torch.zeros_like(vectors))


class TopKDefense(DefenseAdapter):
    kind = "top_k"

    def __init__(self, k: int, feature_dim: int):
        if not 1 <= k <= feature_dim:
            raise PreconditionError(f"k must lie in [1, {feature_dim}], got {k}")
        self.k = k

    def apply(self, images: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        return top_k(features, self.k)

    def describe(self) -> str:
        return f"top_k:k={self.k}"
