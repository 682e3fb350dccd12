"""Encoder stealing attack and its variants.

The stolen encoder f_s is trained so that f_s(x) and f_s(A(x)) both land
close to the target's feature v(x) of the clean image, which the attacker
obtains with one API query per surrogate image and caches.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from config.schemas import AttackConfig, AugmentationSpec, PretrainConfig
from src.adapters.base import EncoderAPI
from src.data.augmentation import augment_batch
from src.data.datasets import images_to_tensor
from src.encoders.checkpoint import save_checkpoint
from src.encoders.encoder import Encoder, init_encoder
from src.encoders.registry import next_more_expressive
from src.models.image_set import ImageSet
from src.training.batching import build_optimizer, partition_minibatches, resolve_device
from src.training.contrastive import pretrain
from src.utils.artifacts import write_csv, write_json
from src.utils.errors import (
    AttackAborted,
    ConfigurationError,
    DomainError,
    InvariantViolation,
    PreconditionError,
    QuotaError,
    TrainingDivergedError,
)
from src.utils.seeding import stage_generator

logger = logging.getLogger(__name__)

METRICS = ("l2", "l1", "cosine")


def feature_distance(metric: str, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """
    Row-wise distance between feature vectors.

    l2 is the Euclidean distance, l1 the sum of absolute differences and
    cosine the negated cosine similarity (so it lies in [-1, 1]).

    Args:
        metric: 'l2', 'l1' or 'cosine'
        u: (..., d) tensor
        v: (..., d) tensor of the same shape

    Returns:
        (...) tensor of distances
    """
    if u.shape != v.shape:
        raise PreconditionError(f"feature shapes differ: {tuple(u.shape)} vs {tuple(v.shape)}")
    if metric == "l2":
        return torch.linalg.vector_norm(u - v, dim=-1)
    if metric == "l1":
        return (u - v).abs().sum(dim=-1)
    if metric == "cosine":
        u_norm = torch.linalg.vector_norm(u, dim=-1)
        v_norm = torch.linalg.vector_norm(v, dim=-1)
        if (u_norm == 0).any() or (v_norm == 0).any():
            raise DomainError("cosine distance is undefined for an all-zero vector")
        return -(u * v).sum(dim=-1) / (u_norm * v_norm)
    raise ConfigurationError(f"Unknown distance metric '{metric}', expected one of {METRICS}")


class FeatureCache:
    """
    v(x) for every surrogate image, filled by a single pass over the API.

    Stores whatever the API returned, defense perturbation included.
    """

    def __init__(self, size: int, feature_dim: int):
        self.vectors = torch.zeros(size, feature_dim)
        self.filled = torch.zeros(size, dtype=torch.bool)
        self.frozen = False

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]

    def store(self, indices: Sequence[int], vectors: torch.Tensor):
        if self.frozen:
            raise InvariantViolation("feature cache is immutable once built")
        index = torch.as_tensor(list(indices), dtype=torch.long)
        self.vectors[index] = vectors.detach().cpu().float()
        self.filled[index] = True

    def lookup(self, indices) -> torch.Tensor:
        index = torch.as_tensor(indices, dtype=torch.long).cpu()
        if not bool(self.filled[index].all()):
            missing = index[~self.filled[index]].tolist()
            raise InvariantViolation(f"feature cache has no entry for indices {missing[:10]}")
        return self.vectors[index]

    @classmethod
    def build(cls, api: EncoderAPI, account: str, images: torch.Tensor, batch_size: int = 256) -> "FeatureCache":
        """Query the API once per image, in index order."""
        if images.shape[0] == 0:
            raise PreconditionError("cannot build a feature cache for an empty surrogate set")
        cache = None
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start:start + batch_size]
            batch = api.query(account, chunk)
            if cache is None:
                cache = cls(images.shape[0], batch.feature_dim)
            cache.store(range(start, start + chunk.shape[0]), batch.vectors)
        cache.frozen = True
        logger.info(f"Cached {len(cache)} target feature vectors (dim={cache.feature_dim})")
        return cache


def loss_l1(
    cache: FeatureCache,
    stolen: nn.Module,
    images: torch.Tensor,
    indices: Sequence[int],
    metric: str,
) -> torch.Tensor:
    """Mean distance between cached v(x) and f_s(x) over the minibatch."""
    targets = cache.lookup(indices)
    outputs = stolen(images)
    return feature_distance(metric, targets.to(outputs.device), outputs).mean()


def loss_l2(
    cache: FeatureCache,
    stolen: nn.Module,
    images: torch.Tensor,
    indices: Sequence[int],
    metric: str,
    augmentation: AugmentationSpec,
    seed: int,
    epoch: int,
) -> torch.Tensor:
    """Mean distance between cached v(x) and f_s(A(x)); issues no queries."""
    targets = cache.lookup(indices)
    views = augment_batch(images, augmentation, seed, epoch, indices)
    outputs = stolen(views)
    return feature_distance(metric, targets.to(outputs.device), outputs).mean()


def loss_l2_prime(
    api: EncoderAPI,
    account: str,
    stolen: nn.Module,
    images: torch.Tensor,
    indices: Sequence[int],
    metric: str,
    augmentation: AugmentationSpec,
    seed: int,
    epoch: int,
) -> torch.Tensor:
    """Mean distance between API(A(x)) and f_s(A(x)); one query per image."""
    views = augment_batch(images, augmentation, seed, epoch, indices)
    targets = api.query(account, views.detach().cpu()).vectors
    outputs = stolen(views)
    return feature_distance(metric, targets.to(outputs.device), outputs).mean()


def distillation_loss(cached: torch.Tensor, outputs: torch.Tensor, temperature: float) -> torch.Tensor:
    """Cross-entropy between softmax(v/T) and softmax(f_s/T), averaged over the batch."""
    soft_targets = F.softmax(cached.to(outputs.device) / temperature, dim=-1)
    log_probs = F.log_softmax(outputs / temperature, dim=-1)
    return -(soft_targets * log_probs).sum(dim=-1).mean()


@dataclass
class StealResult:
    """Stolen encoder plus what it cost and how training went."""

    encoder: Encoder
    variant: str
    losses: List[Dict] = field(default_factory=list)
    queries: int = 0
    ledger: Optional[Dict] = None
    config_digest: str = ""
    optimizer: str = "adam"

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "queries": self.queries,
            "ledger": self.ledger,
            "config_digest": self.config_digest,
            "optimizer": self.optimizer,
            "arch_id": self.encoder.arch_id,
            "epochs_completed": len(self.losses),
        }


def resolve_stolen_arch(config: AttackConfig, reference_arch: Optional[str]) -> str:
    if config.stolen_arch:
        return config.stolen_arch
    if reference_arch is None:
        raise ConfigurationError("stolen_arch is not set and there is no reference architecture to step up from")
    return next_more_expressive(reference_arch)


def _write_artifacts(result: StealResult, out_path: Union[str, Path]):
    out_path = Path(out_path)
    save_checkpoint(result.encoder, out_path, config_digest=result.config_digest)
    write_csv(out_path.with_suffix(".losses.csv"), result.losses, ["epoch", "loss", "l1", "l2"])
    write_json(out_path.with_suffix(".ledger.json"), result.to_dict())


def _steal_locally(
    surrogate: ImageSet,
    config: AttackConfig,
    stolen_arch: str,
    feature_dim: int,
    pretrain_config: Optional[PretrainConfig],
    device: Optional[str],
) -> StealResult:
    if pretrain_config is None:
        pretrain_config = PretrainConfig(
            algo="simclr",
            arch=stolen_arch,
            feature_dim=feature_dim,
            input_shape=surrogate.shape,
            epochs=config.epochs,
            batch_size=config.batch_size,
            lr=config.lr,
            optimizer=config.optimizer,
            seed=config.seed,
        )
    result = pretrain(surrogate, pretrain_config, provenance="local-baseline", device=device)
    losses = [{"epoch": i + 1, "loss": v} for i, v in enumerate(result.losses)]
    return StealResult(
        encoder=result.encoder,
        variant="local_pretrain",
        losses=losses,
        queries=0,
        config_digest=config.digest(),
        optimizer=pretrain_config.optimizer,
    )


def steal(
    api: Optional[EncoderAPI],
    account: Optional[str],
    surrogate: ImageSet,
    config: AttackConfig,
    reference_arch: Optional[str] = None,
    feature_dim: int = 512,
    provenance: str = "stolen",
    pretrain_config: Optional[PretrainConfig] = None,
    out_path: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
) -> StealResult:
    """
    Train a stolen encoder against an EaaS API.

    One pass over the surrogate set fills the feature cache, then every
    epoch walks the (shuffled) surrogate set in minibatches minimising
    L1 + lambda * L2. Variants: no_aug drops L2, query_aug replaces L2 with
    the query-backed L2', distillation swaps the loss for soft-label
    cross-entropy, local_pretrain ignores the API and pre-trains on the
    surrogate set.

    Args:
        api: Feature service (unused by local_pretrain)
        account: Account to bill
        surrogate: Attacker's unlabeled images
        config: Attack hyperparameters
        reference_arch: Target architecture, used when config.stolen_arch is unset
        feature_dim: Output dimension for local_pretrain (otherwise taken from the API)
        provenance: Recorded on the encoder
        pretrain_config: Overrides the derived config for local_pretrain
        out_path: If given, checkpoint, loss CSV and ledger JSON are written there
        device: Torch device name

    Returns:
        StealResult

    Raises:
        AttackAborted: the API refused a query mid-run; `partial` holds the result so far
    """
    stolen_arch = resolve_stolen_arch(config, reference_arch)
    if config.variant == "local_pretrain":
        result = _steal_locally(surrogate, config, stolen_arch, feature_dim, pretrain_config, device)
        if out_path is not None:
            _write_artifacts(result, out_path)
        return result

    if api is None or account is None:
        raise ConfigurationError(f"variant '{config.variant}' needs an API and an account")
    if len(surrogate) < config.batch_size:
        raise PreconditionError(f"surrogate set of {len(surrogate)} images is smaller than batch size {config.batch_size}")

    torch_device = resolve_device(device)
    queries_before = api.ledger_report(account).query_count
    images = images_to_tensor(surrogate.images)
    lam = config.effective_lam

    logger.info(
        f"Stealing with variant={config.variant} arch={stolen_arch} lambda={lam} "
        f"epochs={config.epochs} |D|={len(surrogate)} metric={config.metric}"
    )
    try:
        cache = FeatureCache.build(api, account, images, config.query_batch_size)
    except QuotaError as e:
        raise AttackAborted(f"quota exhausted while building the feature cache: {e}") from e

    encoder = init_encoder(stolen_arch, cache.feature_dim, surrogate.shape, config.seed, provenance=provenance)
    encoder.to(torch_device).train()
    optimizer = build_optimizer(encoder.parameters(), config.optimizer, config.lr)
    losses: List[Dict] = []

    def _partial() -> StealResult:
        return StealResult(
            encoder=encoder.cpu().eval(),
            variant=config.variant,
            losses=losses,
            queries=api.ledger_report(account).query_count - queries_before,
            ledger=api.ledger_report(account).to_dict(),
            config_digest=config.digest(),
            optimizer=config.optimizer,
        )

    for epoch in range(config.epochs):
        generator = stage_generator(config.seed, "shuffle", "steal", epoch)
        totals = {"loss": 0.0, "l1": 0.0, "l2": 0.0}
        steps = 0
        for batch_indices in partition_minibatches(len(surrogate), config.batch_size, generator):
            indices = batch_indices.tolist()
            batch = images[batch_indices].to(torch_device)

            l2 = None
            if config.variant == "distillation":
                l1 = distillation_loss(cache.lookup(indices), encoder(batch), config.kd_temperature)
                loss = l1
            else:
                l1 = loss_l1(cache, encoder, batch, indices, config.metric)
                loss = l1
                if config.variant == "query_aug":
                    try:
                        l2 = loss_l2_prime(
                            api, account, encoder, batch, indices, config.metric,
                            config.augmentation, config.seed, epoch,
                        )
                    except QuotaError as e:
                        raise AttackAborted(f"quota exhausted at epoch {epoch + 1}: {e}", partial=_partial()) from e
                    loss = l1 + lam * l2
                elif lam > 0:
                    l2 = loss_l2(cache, encoder, batch, indices, config.metric, config.augmentation, config.seed, epoch)
                    loss = l1 + lam * l2

            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"attack loss became {loss.item()} at epoch {epoch + 1}")

            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            totals["loss"] += loss.item()
            totals["l1"] += l1.item()
            totals["l2"] += l2.item() if l2 is not None else 0.0
            steps += 1

        row = {"epoch": epoch + 1, **{key: value / steps for key, value in totals.items()}}
        losses.append(row)
        logger.info(
            f"[steal:{config.variant}] epoch {epoch + 1}/{config.epochs} "
            f"loss={row['loss']:.4f} l1={row['l1']:.4f} l2={row['l2']:.4f}"
        )

    result = _partial()
    logger.info(f"Steal finished: {result.queries} queries, ${result.ledger['cost_dollars']:.4f}")
    if out_path is not None:
        _write_artifacts(result, out_path)
    return result
