"""Defense selection and construction."""

import logging
from typing import Optional, Union

from config.schemas import DefenseConfig
from src.defenses.base import DefenseAdapter, NoDefense
from src.defenses.poisoning import PoisoningDefense
from src.defenses.rounding import RoundingDefense
from src.defenses.top_k import TopKDefense
from src.encoders.checkpoint import load_checkpoint
from src.encoders.encoder import Encoder
from src.utils.errors import ConfigurationError

logger = logging.getLogger(__name__)


class DefenseRouter:
    """
    Builds the defense adapter a service config asks for.

    Accepts either a DefenseConfig or the CLI form ('top_k:k=50', 'round:m=1',
    'poison:eps=5,norm=l2', 'none').
    """

    def __init__(self):
        self.builders = {
            "none": self._build_none,
            "top_k": self._build_top_k,
            "rounding": self._build_rounding,
            "poisoning": self._build_poisoning,
        }
        self.logger = logger

    def build(
        self,
        config: Union[DefenseConfig, str],
        feature_dim: int,
        surrogate: Optional[Encoder] = None,
    ) -> DefenseAdapter:
        """
        Args:
            config: Defense config or CLI string
            feature_dim: Output dimension of the protected encoder
            surrogate: Defender surrogate; if absent for poisoning, the
                config's surrogate_checkpoint is loaded

        Returns:
            Defense adapter
        """
        if isinstance(config, str):
            config = DefenseConfig.parse(config)
        builder = self.builders.get(config.kind)
        if builder is None:
            raise ConfigurationError(f"No defense registered for kind '{config.kind}'")
        defense = builder(config, feature_dim, surrogate)
        self.logger.info(f"Defense configured: {defense.describe()}")
        return defense

    def _build_none(self, config: DefenseConfig, feature_dim: int, surrogate: Optional[Encoder]) -> DefenseAdapter:
        return NoDefense()

    def _build_top_k(self, config: DefenseConfig, feature_dim: int, surrogate: Optional[Encoder]) -> DefenseAdapter:
        if config.k > feature_dim:
            raise ConfigurationError(f"top_k k={config.k} exceeds feature dimension {feature_dim}")
        return TopKDefense(config.k, feature_dim)

    def _build_rounding(self, config: DefenseConfig, feature_dim: int, surrogate: Optional[Encoder]) -> DefenseAdapter:
        return RoundingDefense(config.m)

    def _build_poisoning(self, config: DefenseConfig, feature_dim: int, surrogate: Optional[Encoder]) -> DefenseAdapter:
        if surrogate is None and config.poisoning.surrogate_checkpoint is not None:
            surrogate = load_checkpoint(config.poisoning.surrogate_checkpoint)
        if surrogate is None:
            raise ConfigurationError("poisoning defense needs a defender surrogate (pass one or set surrogate_checkpoint)")
        if surrogate.feature_dim != feature_dim:
            raise ConfigurationError(
                f"defender surrogate outputs {surrogate.feature_dim} features, target outputs {feature_dim}"
            )
        return PoisoningDefense(config.poisoning, surrogate)


def build_defense(
    config: Union[DefenseConfig, str],
    feature_dim: int,
    surrogate: Optional[Encoder] = None,
) -> DefenseAdapter:
    return DefenseRouter().build(config, feature_dim, surrogate)
