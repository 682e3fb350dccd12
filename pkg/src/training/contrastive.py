"""Contrastive pre-training of target encoders (SimCLR and MoCo)."""

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config.schemas import PretrainConfig
from src.data.augmentation import augment_batch
from src.data.datasets import images_to_tensor
from src.encoders.encoder import Encoder, init_encoder
from src.models.image_set import ImageSet
from src.training.batching import build_optimizer, partition_minibatches, resolve_device
from src.utils.artifacts import write_csv
from src.utils.errors import PreconditionError, TrainingDivergedError
from src.utils.seeding import stage_generator

logger = logging.getLogger(__name__)


class ProjectionHead(nn.Module):
    """One-hidden-layer perceptron used only while pre-training."""

    def __init__(self, feature_dim: int, proj_dim: int = 128, hidden_dim: Optional[int] = None):
        super().__init__()
        hidden_dim = hidden_dim or feature_dim
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden_dim),
            nn.ReLU(inplace=True),
            nn.Linear(hidden_dim, proj_dim),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def default_pairing(n: int) -> torch.Tensor:
    """Partner map for views laid out as [x_1..x_N, x'_1..x'_N]."""
    return torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])


def _check_pairing(pairing: torch.Tensor, rows: int):
    if pairing.ndim != 1 or pairing.numel() != rows:
        raise PreconditionError(f"pairing must map each of the {rows} views to a partner")
    if pairing.min() < 0 or pairing.max() >= rows:
        raise PreconditionError("pairing refers to views outside the batch")
    positions = torch.arange(rows)
    if (pairing == positions).any() or not torch.equal(pairing[pairing], positions):
        raise PreconditionError("pairing is not a perfect matching of the views")


def simclr_loss(projected: torch.Tensor, pairing: Optional[torch.Tensor], temperature: float) -> torch.Tensor:
    """
    NT-Xent loss summed over all ordered positive pairs.

    For each view i with partner j:
        -log( exp(sim(z_i, z_j) / t) / sum_{k != i} exp(sim(z_i, z_k) / t) )
    with sim the cosine similarity.

    Args:
        projected: 2N x proj_dim projected views
        pairing: Partner index per row; None means default_pairing
        temperature: t > 0

    Returns:
        Scalar loss (sum, not mean)
    """
    if temperature <= 0:
        raise PreconditionError(f"temperature must be positive, got {temperature}")
    rows = projected.shape[0]
    if rows < 2 or rows % 2:
        raise PreconditionError(f"simclr_loss needs 2N views, got {rows}")
    if pairing is None:
        pairing = default_pairing(rows // 2)
    pairing = pairing.to(torch.long).cpu()
    _check_pairing(pairing, rows)
    pairing = pairing.to(projected.device)

    z = F.normalize(projected, dim=1)
    logits = z @ z.T / temperature
    self_mask = torch.eye(rows, dtype=torch.bool, device=projected.device)
    logits = logits.masked_fill(self_mask, float("-inf"))

    positives = logits.gather(1, pairing.unsqueeze(1)).squeeze(1)
    return -(positives - torch.logsumexp(logits, dim=1)).sum()


def moco_loss(
    query_feats: torch.Tensor,
    key_feats: torch.Tensor,
    dictionary: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """
    InfoNCE loss of queries against their momentum keys, summed over the batch.

    The denominator runs over the dictionary. Callers enqueue the current
    keys first, so each positive key is part of it; an empty dictionary
    falls back to the current keys.

    Args:
        query_feats: N x d query embeddings
        key_feats: N x d positive keys from the momentum encoder
        dictionary: M x d key queue
        temperature: t > 0

    Returns:
        Scalar loss (sum over the N pairs)
    """
    if temperature <= 0:
        raise PreconditionError(f"temperature must be positive, got {temperature}")
    if query_feats.shape != key_feats.shape:
        raise PreconditionError(
            f"queries {tuple(query_feats.shape)} and keys {tuple(key_feats.shape)} differ in shape"
        )
    denominator_keys = dictionary if dictionary.numel() else key_feats
    if denominator_keys.shape[0] == 0:
        raise PreconditionError("moco_loss needs a non-empty dictionary or current keys")
    if denominator_keys.shape[1] != query_feats.shape[1]:
        raise PreconditionError("dictionary dimension differs from query dimension")

    q = F.normalize(query_feats, dim=1)
    k = F.normalize(key_feats, dim=1)
    d = F.normalize(denominator_keys, dim=1)
    positives = (q * k).sum(dim=1) / temperature
    logits = q @ d.T / temperature
    return -(positives - torch.logsumexp(logits, dim=1)).sum()


@torch.no_grad()
def momentum_update(query: nn.Module, momentum: nn.Module, m: float) -> nn.Module:
    """
    momentum <- m * momentum + (1 - m) * query, parameter by parameter.

    Returns:
        The updated momentum module
    """
    if not 0.0 <= m <= 1.0:
        raise PreconditionError(f"momentum coefficient must lie in [0, 1], got {m}")
    query_params = dict(query.named_parameters())
    momentum_params = dict(momentum.named_parameters())
    if query_params.keys() != momentum_params.keys() or any(
        query_params[name].shape != momentum_params[name].shape for name in query_params
    ):
        raise PreconditionError("query and momentum encoders have different architectures")
    for name, param in momentum_params.items():
        param.mul_(m).add_(query_params[name].detach(), alpha=1.0 - m)
    return momentum


class MoCoState:
    """Momentum network plus the FIFO key dictionary."""

    def __init__(self, query_network: nn.Module, capacity: int, momentum: float, temperature: float):
        if capacity < 1:
            raise PreconditionError(f"dictionary capacity must be positive, got {capacity}")
        self.momentum_network = copy.deepcopy(query_network)
        for param in self.momentum_network.parameters():
            param.requires_grad_(False)
        self.capacity = capacity
        self.momentum = momentum
        self.temperature = temperature
        self.dictionary: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return 0 if self.dictionary is None else self.dictionary.shape[0]

    def enqueue(self, keys: torch.Tensor):
        """Append keys; the oldest entries are evicted beyond capacity."""
        keys = keys.detach()
        merged = keys if self.dictionary is None else torch.cat([self.dictionary, keys])
        self.dictionary = merged[-self.capacity:]


@dataclass
class PretrainResult:
    encoder: Encoder
    losses: List[float] = field(default_factory=list)


def pretrain(
    dataset: ImageSet,
    config: PretrainConfig,
    provenance: str = "pretrained-target",
    log_path: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
) -> PretrainResult:
    """
    Pre-train an encoder with SimCLR or MoCo.

    Run on a surrogate dataset with provenance='local-baseline' this is the
    Pre-training-encoder baseline.

    Args:
        dataset: Unlabeled training images
        config: Pre-training hyperparameters
        provenance: Recorded on the returned encoder
        log_path: Optional CSV destination for the per-epoch loss curve
        device: Torch device name; defaults to CUDA when available

    Returns:
        PretrainResult with the encoder (eval mode) and per-epoch mean losses
    """
    if len(dataset) == 0:
        raise PreconditionError("cannot pre-train on an empty dataset")
    if tuple(dataset.shape) != tuple(config.input_shape):
        raise PreconditionError(f"dataset shape {dataset.shape} != configured input {config.input_shape}")

    torch_device = resolve_device(device)
    batch_size = min(config.batch_size, len(dataset))
    if batch_size < 2:
        raise PreconditionError("contrastive pre-training needs at least two images")

    encoder = init_encoder(config.arch, config.feature_dim, config.input_shape, config.seed, provenance=provenance)
    head = ProjectionHead(config.feature_dim, config.proj_dim)
    network = nn.Sequential(encoder, head).to(torch_device)
    optimizer = build_optimizer(network.parameters(), config.optimizer, config.lr)

    moco = None
    if config.algo == "moco":
        moco = MoCoState(network, config.moco_queue, config.moco_momentum, config.tau)

    images = images_to_tensor(dataset.images)
    losses: List[float] = []
    logger.info(
        f"Pre-training {config.arch} with {config.algo} on {dataset.name} "
        f"({len(dataset)} images, {config.epochs} epochs, tau={config.tau})"
    )

    network.train()
    for epoch in range(config.epochs):
        generator = stage_generator(config.seed, "shuffle", "pretrain", epoch)
        epoch_loss, steps = 0.0, 0
        for batch_indices in partition_minibatches(len(dataset), batch_size, generator):
            batch = images[batch_indices]
            indices = batch_indices.tolist()
            view_a = augment_batch(batch, config.augmentation, config.seed, 2 * epoch, indices).to(torch_device)
            view_b = augment_batch(batch, config.augmentation, config.seed, 2 * epoch + 1, indices).to(torch_device)

            if moco is None:
                projected = network(torch.cat([view_a, view_b]))
                loss = simclr_loss(projected, None, config.tau) / projected.shape[0]
            else:
                queries = network(view_a)
                with torch.no_grad():
                    momentum_update(network, moco.momentum_network, moco.momentum)
                    keys = moco.momentum_network(view_b)
                moco.enqueue(keys)
                loss = moco_loss(queries, keys, moco.dictionary, moco.temperature) / queries.shape[0]

            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{config.algo} loss became {loss.item()} at epoch {epoch + 1}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            steps += 1

        mean_loss = epoch_loss / max(steps, 1)
        losses.append(mean_loss)
        logger.info(f"[pretrain] epoch {epoch + 1}/{config.epochs} loss={mean_loss:.4f}")

    encoder = encoder.cpu().eval()
    encoder.config_digest = config.digest()
    if log_path is not None:
        write_csv(log_path, [{"epoch": i + 1, "loss": v} for i, v in enumerate(losses)], ["epoch", "loss"])
    return PretrainResult(encoder=encoder, losses=losses)
