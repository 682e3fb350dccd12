"""Base interface for anything that serves encoder features by account."""

from abc import ABC, abstractmethod
from typing import Union

import numpy as np
import torch

from src.managers.ledger_manager import LedgerSnapshot
from src.models.features import FeatureBatch

ImageBatch = Union[np.ndarray, torch.Tensor]


class EncoderAPI(ABC):
    """
    Account-scoped feature service.

    Implemented in-process by EaaSService and remotely by HttpEncoderAPI,
    so attack and evaluation code never needs to know which one it talks to.
    """

    @abstractmethod
    def query(self, account: str, images: ImageBatch) -> FeatureBatch:
        """Return one feature row per image (N x H x W x C numpy or N x C x H x W tensor)."""
        pass

    @abstractmethod
    def ledger_report(self, account: str) -> LedgerSnapshot:
        """Current query count and cost of an account."""
        pass
