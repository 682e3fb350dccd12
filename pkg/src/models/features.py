"""Feature batch model."""

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import torch

from src.utils.errors import InvariantViolation

if TYPE_CHECKING:
    from src.managers.ledger_manager import LedgerSnapshot


@dataclass
class FeatureBatch:
    """Feature vectors returned by an encoder ('direct') or by the service ('eaas')."""

    vectors: torch.Tensor
    source: str = "direct"
    defense_applied: Optional[str] = None
    # ledger state right after this batch was charged
    billing: Optional["LedgerSnapshot"] = None

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise InvariantViolation(f"feature batch must be 2-D, got {tuple(self.vectors.shape)}")
        if not torch.isfinite(self.vectors).all():
            raise InvariantViolation("feature batch contains NaN or Inf")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]
