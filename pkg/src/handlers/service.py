"""In-process EaaS provider."""

import logging
from typing import Optional

import torch

from config.schemas import ServiceConfig
from src.adapters.base import EncoderAPI, ImageBatch
from src.defenses.base import DefenseAdapter, NoDefense
from src.defenses.router import DefenseRouter
from src.encoders.checkpoint import load_checkpoint
from src.encoders.encoder import Encoder, encode, to_input_tensor
from src.managers.ledger_manager import LedgerSnapshot, QueryLedger
from src.models.features import FeatureBatch
from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)


class EaaSService(EncoderAPI):
    """
    Serves target-encoder features by account.

    Every response passes through the configured defense and is billed one
    query per image. The target's weights are held privately and never
    returned by any method.
    """

    def __init__(
        self,
        target: Encoder,
        defense: Optional[DefenseAdapter] = None,
        ledger: Optional[QueryLedger] = None,
    ):
        self._target = target.eval()
        self.defense = defense or NoDefense()
        self.ledger = ledger or QueryLedger()
        self.logger = logger

    @classmethod
    def from_config(
        cls,
        config: ServiceConfig,
        target: Optional[Encoder] = None,
        surrogate: Optional[Encoder] = None,
    ) -> "EaaSService":
        """Build the service, its defense and its accounts from a ServiceConfig."""
        if target is None:
            if config.target_checkpoint is None:
                raise ConfigurationError("service needs a target encoder or target_checkpoint")
            target = load_checkpoint(config.target_checkpoint)
        defense = DefenseRouter().build(config.defense, target.feature_dim, surrogate)
        service = cls(target, defense, QueryLedger(config.price_per_1000))
        for account in config.accounts:
            service.open_account(account.token, account.budget_cap)
        return service

    @property
    def feature_dim(self) -> int:
        return self._target.feature_dim

    @property
    def input_shape(self):
        return self._target.input_shape

    def open_account(self, token: str, budget_cap: Optional[int] = None):
        self.ledger.open_account(token, budget_cap)

    def query(self, account: str, images: ImageBatch) -> FeatureBatch:
        """
        Return defended target features for a batch.

        Raises:
            AuthError: unknown account
            QuotaError: the batch would exceed the account's cap; nothing is billed
            PreconditionError: images do not match the target's input shape
        """
        tensor = to_input_tensor(self._target, images)
        count = tensor.shape[0]
        self.ledger.check(account, count)

        clean = encode(self._target, tensor).vectors
        defended = self.defense.apply(tensor, clean) if count else clean

        # charge re-checks the cap under the ledger lock
        snapshot = self.ledger.charge(account, count)
        self.logger.debug(f"Served {count} queries to {account} (total={snapshot.query_count})")
        return FeatureBatch(
            vectors=defended.detach().to(torch.float32),
            source="eaas",
            defense_applied=self.defense.describe(),
            billing=snapshot,
        )

    def ledger_report(self, account: str) -> LedgerSnapshot:
        return self.ledger.report(account)
