"""Minibatch partitioning and device selection shared by the training loops."""

from typing import List, Optional

import torch

from src.utils.errors import PreconditionError


def partition_minibatches(size: int, batch_size: int, generator: torch.Generator) -> List[torch.Tensor]:
    """
    Shuffle range(size) and cut it into floor(size / batch_size) minibatches.

    The remainder joins the last minibatch, so every index appears exactly
    once per epoch and no minibatch is smaller than batch_size.
    """
    if batch_size < 1:
        raise PreconditionError(f"batch_size must be positive, got {batch_size}")
    if size < batch_size:
        raise PreconditionError(f"dataset of {size} images is smaller than batch size {batch_size}")
    order = torch.randperm(size, generator=generator)
    count = size // batch_size
    batches = [order[i * batch_size:(i + 1) * batch_size] for i in range(count)]
    if count * batch_size < size:
        batches[-1] = torch.cat([batches[-1], order[count * batch_size:]])
    return batches


def resolve_device(device: Optional[str] = None) -> torch.device:
    if device:
        return torch.device(device)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def build_optimizer(params, name: str, lr: float) -> torch.optim.Optimizer:
    """'adam' (default) or plain gradient descent ('sgd')."""
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    return torch.optim.Adam(params, lr=lr)
