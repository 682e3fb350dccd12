"""Downstream classifiers on frozen encoder features: TA, SA and their ratio."""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config.schemas import DownstreamConfig
from src.adapters.base import EncoderAPI
from src.data.datasets import images_to_tensor
from src.encoders.encoder import Encoder, encode, encoder_digest
from src.models.features import FeatureBatch
from src.models.image_set import ImageSet
from src.models.reports import EvalReport, TaskResult
from src.utils.artifacts import (
    atomic_torch_save,
    digest_array,
    digest_payload,
    read_json,
    write_csv,
    write_json,
)
from src.utils.errors import AttackAborted, PreconditionError, QuotaError
from src.utils.seeding import stage_generator, stage_seed

logger = logging.getLogger(__name__)

REPORT_CSV_FIELDS = [
    "label", "task", "ta", "sa", "ratio_percent", "queries_attack", "queries_downstream", "cost_dollars", "manifest_digest",
]


class Classifier(nn.Module):
    """Fully connected net: feature_dim -> hidden... -> num_classes, ReLU between layers."""

    def __init__(self, feature_dim: int, num_classes: int, hidden: Sequence[int] = (512, 256)):
        super().__init__()
        widths = [feature_dim, *hidden]
        layers: List[nn.Module] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(fan_in, fan_out), nn.ReLU()]
        layers.append(nn.Linear(widths[-1], num_classes))
        self.net = nn.Sequential(*layers)
        self.feature_dim = feature_dim
        self.num_classes = num_classes

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Logits; softmax of these are the class probabilities."""
        return self.net(features)

    def probabilities(self, features: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(features), dim=-1)

    def predict(self, features: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.forward(features).argmax(dim=-1)


class FeatureSource(ABC):
    """Where downstream features come from: an encoder directly, or the EaaS API."""

    @abstractmethod
    def extract(self, images: torch.Tensor) -> FeatureBatch:
        pass

    @property
    @abstractmethod
    def cache_key(self) -> Optional[str]:
        """Identity of the features this source produces; None disables disk caching."""
        pass


class DirectSource(FeatureSource):
    def __init__(self, encoder: Encoder):
        self.encoder = encoder
        self._key = None

    def extract(self, images: torch.Tensor) -> FeatureBatch:
        return encode(self.encoder, images)

    @property
    def cache_key(self) -> str:
        if self._key is None:
            self._key = digest_payload({"source": "direct", "encoder": encoder_digest(self.encoder)})
        return self._key


class ApiSource(FeatureSource):
    """
    Features fetched through an EncoderAPI, billed to `account`.

    The API cannot reveal which target or defense sits behind it, so disk
    caching is only enabled when the caller supplies `cache_tag`.
    """

    def __init__(self, api: EncoderAPI, account: str, cache_tag: Optional[str] = None, batch_size: int = 256):
        self.api = api
        self.account = account
        self.cache_tag = cache_tag
        self.batch_size = batch_size

    def extract(self, images: torch.Tensor) -> FeatureBatch:
        rows: List[torch.Tensor] = []
        defense = None
        for start in range(0, images.shape[0], self.batch_size):
            try:
                batch = self.api.query(self.account, images[start:start + self.batch_size])
            except QuotaError as e:
                partial = FeatureBatch(torch.cat(rows), source="eaas", defense_applied=defense) if rows else None
                raise AttackAborted(f"quota exhausted after {start} downstream queries: {e}", partial=partial) from e
            rows.append(batch.vectors)
            defense = batch.defense_applied
        return FeatureBatch(torch.cat(rows), source="eaas", defense_applied=defense)

    @property
    def cache_key(self) -> Optional[str]:
        if self.cache_tag is None:
            return None
        return digest_payload({"source": "eaas", "tag": self.cache_tag})


def extract_features(
    source: FeatureSource,
    dataset: ImageSet,
    cache_dir: Optional[Union[str, Path]] = None,
) -> FeatureBatch:
    """
    One feature row per image, in dataset order.

    With a cache directory, features are stored under a key built from the
    source identity and the image content, and reused on later calls.
    """
    if len(dataset) == 0:
        raise PreconditionError(f"cannot extract features from empty dataset {dataset.name}")

    cache_path = None
    if cache_dir is not None and source.cache_key is not None:
        key = digest_payload({"source": source.cache_key, "images": digest_array(dataset.images)})
        cache_path = Path(cache_dir) / f"{key}.pt"
        if cache_path.is_file():
            cached = torch.load(cache_path, map_location="cpu", weights_only=True)
            logger.debug(f"Feature cache hit for {dataset.name}/{dataset.split}: {cache_path.name}")
            return FeatureBatch(cached["vectors"], source=cached["source"], defense_applied=cached["defense_applied"])

    batch = source.extract(images_to_tensor(dataset.images))
    if cache_path is not None:
        atomic_torch_save(
            {"vectors": batch.vectors, "source": batch.source, "defense_applied": batch.defense_applied},
            cache_path,
        )
    logger.info(f"Extracted {len(batch)} feature vectors from {dataset.name}/{dataset.split} ({batch.source})")
    return batch


@dataclass
class TrainedClassifier:
    classifier: Classifier
    accuracy_curve: List[float] = field(default_factory=list)
    loss_curve: List[float] = field(default_factory=list)


def _as_labels(labels: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(labels)
    return labels.to(torch.long)


def train_classifier(
    features: torch.Tensor,
    labels: Union[np.ndarray, torch.Tensor],
    num_classes: int,
    config: DownstreamConfig,
    log_path: Optional[Union[str, Path]] = None,
    log_tags: Optional[Dict] = None,
) -> TrainedClassifier:
    """
    Train a classifier on fixed features with Adam and cross-entropy.

    Args:
        features: N x d feature matrix
        labels: N class ids
        num_classes: Output width
        config: Widths, lr, batch size, epochs, seed
        log_path: Optional CSV for the per-epoch training accuracy
        log_tags: Constant columns appended to every CSV row (e.g. the manifest digest)

    Returns:
        TrainedClassifier with the per-epoch training accuracy
    """
    labels = _as_labels(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise PreconditionError(f"{features.shape[0]} feature rows for {labels.shape[0]} labels")
    if torch.unique(labels).numel() < 2:
        raise PreconditionError("downstream training needs at least two classes")

    features = features.detach().float()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(stage_seed(config.seed, "classifier", "init"))
        classifier = Classifier(features.shape[1], num_classes, config.hidden)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=config.lr)

    result = TrainedClassifier(classifier=classifier)
    for epoch in range(config.epochs):
        classifier.train()
        order = torch.randperm(features.shape[0], generator=stage_generator(config.seed, "classifier", epoch))
        total_loss = 0.0
        for start in range(0, features.shape[0], config.batch_size):
            index = order[start:start + config.batch_size]
            loss = F.cross_entropy(classifier(features[index]), labels[index])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * index.numel()

        accuracy = accuracy_from_features(classifier, features, labels)
        result.accuracy_curve.append(accuracy)
        result.loss_curve.append(total_loss / features.shape[0])
        logger.debug(f"[classifier] epoch {epoch + 1}/{config.epochs} loss={result.loss_curve[-1]:.4f} acc={accuracy:.4f}")

    classifier.eval()
    if log_path is not None:
        tags = dict(log_tags or {})
        rows = [
            {"epoch": i + 1, "loss": loss, "train_accuracy": acc, **tags}
            for i, (loss, acc) in enumerate(zip(result.loss_curve, result.accuracy_curve))
        ]
        write_csv(log_path, rows, ["epoch", "loss", "train_accuracy", *tags])
    return result


def accuracy_from_features(classifier: Classifier, features: torch.Tensor, labels: Union[np.ndarray, torch.Tensor]) -> float:
    """Fraction of rows whose argmax prediction equals the label."""
    labels = _as_labels(labels)
    if labels.numel() == 0:
        raise PreconditionError("accuracy of an empty set is undefined")
    was_training = classifier.training
    classifier.eval()
    predictions = classifier.predict(features.float())
    classifier.train(was_training)
    return (predictions == labels).sum().item() / labels.numel()


def evaluate(
    classifier: Classifier,
    source: FeatureSource,
    test_set: ImageSet,
    cache_dir: Optional[Union[str, Path]] = None,
) -> float:
    """Accuracy of classifier(source(x)) on a labeled test set."""
    if not test_set.is_labeled:
        raise PreconditionError(f"{test_set.name}/{test_set.split} has no labels to evaluate against")
    features = extract_features(source, test_set, cache_dir).vectors
    return accuracy_from_features(classifier, features, test_set.labels)


def downstream_accuracy(
    source: FeatureSource,
    train_set: ImageSet,
    test_set: ImageSet,
    config: DownstreamConfig,
    cache_dir: Optional[Union[str, Path]] = None,
    log_path: Optional[Union[str, Path]] = None,
    log_tags: Optional[Dict] = None,
) -> Tuple[float, TrainedClassifier]:
    """
    Train on train_set features, test on test_set features.

    Called with the target (through the API) this gives TA; with a stolen
    encoder it gives SA.
    """
    if not train_set.is_labeled:
        raise PreconditionError(f"{train_set.name}/{train_set.split} has no labels to train on")
    num_classes = train_set.num_classes or int(train_set.labels.max()) + 1
    train_features = extract_features(source, train_set, cache_dir).vectors
    trained = train_classifier(train_features, train_set.labels, num_classes, config, log_path, log_tags)
    accuracy = evaluate(trained.classifier, source, test_set, cache_dir)
    logger.info(f"{train_set.name}: accuracy {accuracy:.4f} over {len(test_set)} test images")
    return accuracy, trained


def report(
    label: str,
    tasks: Iterable[TaskResult],
    config_digest: str = "",
    manifest_digest: str = "",
    axis: Optional[str] = None,
    axis_value=None,
    extra: Optional[Dict] = None,
    out_path: Optional[Union[str, Path]] = None,
) -> EvalReport:
    """
    Assemble an EvalReport; with out_path, write it as JSON plus a CSV beside it.
    """
    result = EvalReport(
        label=label,
        tasks=list(tasks),
        config_digest=config_digest,
        manifest_digest=manifest_digest,
        axis=axis,
        axis_value=axis_value,
        extra=extra or {},
    )
    if out_path is not None:
        write_report(result, out_path)
    return result


def report_rows(report_: EvalReport) -> List[Dict]:
    return [
        {"label": report_.label, **task.to_dict(), "manifest_digest": report_.manifest_digest}
        for task in report_.tasks
    ]


def write_report(report_: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    write_json(path, report_.to_dict())
    write_csv(path.with_suffix(".csv"), report_rows(report_), REPORT_CSV_FIELDS)
    logger.info(f"Wrote report '{report_.label}' to {path}")
    return path


def load_report(path: Union[str, Path]) -> EvalReport:
    return EvalReport.from_dict(read_json(path))


def compare_reports(
    paths: Sequence[Union[str, Path]],
    out_path: Optional[Union[str, Path]] = None,
) -> List[Dict]:
    """
    Side-by-side rows (one per report and task) for `report --compare`.
    """
    rows: List[Dict] = []
    for path in paths:
        rows.extend(report_rows(load_report(path)))
    if out_path is not None:
        write_csv(out_path, rows, REPORT_CSV_FIELDS)
    return rows
