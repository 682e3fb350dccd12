"""Feature rounding defense."""

import torch

from src.defenses.base import DefenseAdapter
from src.utils.errors import PreconditionError


def round_features(vectors: torch.Tensor, m: int) -> torch.Tensor:
    """Round every entry to m decimals, half away from zero."""
    if m < 1:
        raise PreconditionError(f"m must be at least 1, got {m}")
    scale = 10.0 ** m
    wide = vectors.to(torch.float64)
    rounded = torch.sign(wide) * torch.floor(wide.abs() * scale + 0.5) / scale
    return rounded.to(vectors.dtype)


class RoundingDefense(DefenseAdapter):
    kind = "rounding"

    def __init__(self, m: int):
        if m < 1:
            raise PreconditionError(f"m must be at least 1, got {m}")
        self.m = m

    def apply(self, images: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        return round_features(features, self.m)

    def describe(self) -> str:
        return f"round:m={self.m}"
