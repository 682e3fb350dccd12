"""Base defense adapter interface."""

from abc import ABC, abstractmethod

import torch


class DefenseAdapter(ABC):
    """A response-perturbation applied by the service to every feature batch."""

    kind = "none"

    @abstractmethod
    def apply(self, images: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        """
        Perturb clean target features.

        Args:
            images: N x C x H x W queried images
            features: N x d clean target features

        Returns:
            N x d features to return to the client
        """
        pass

    @abstractmethod
    def describe(self) -> str:
        """Short descriptor recorded on every FeatureBatch."""
        pass


class NoDefense(DefenseAdapter):
    """Identity: features are returned as computed."""

    def apply(self, images: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
        return features

    def describe(self) -> str:
        return "none"
