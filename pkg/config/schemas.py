"""Experiment configuration models.

Every model rejects unknown keys so a typo in a manifest fails loudly instead
of silently falling back to a default halfway through a sweep.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.utils.errors import ConfigurationError

AUGMENTATION_OPS = ("RandomResizedCrop", "RandomHorizontalFlip", "ColorJitter", "RandomGrayScale")

# Short names accepted on the command line
AUGMENTATION_ALIASES = {
    "crop": "RandomResizedCrop",
    "hflip": "RandomHorizontalFlip",
    "jitter": "ColorJitter",
    "gray": "RandomGrayScale",
}

Metric = Literal["l2", "l1", "cosine"]
Variant = Literal["stolen_encoder", "no_aug", "query_aug", "local_pretrain", "distillation"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=False)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON dump."""
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class AugmentationSpec(StrictModel):
    """Ordered composition of the four augmentation operations."""

    ops: List[str] = Field(default_factory=list)
    crop_scale: Tuple[float, float] = (0.2, 1.0)
    crop_ratio: Tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    flip_p: float = Field(default=0.5, ge=0.0, le=1.0)
    brightness: float = Field(default=0.4, ge=0.0)
    contrast: float = Field(default=0.4, ge=0.0)
    saturation: float = Field(default=0.4, ge=0.0)
    hue: float = Field(default=0.1, ge=0.0, le=0.5)
    jitter_p: float = Field(default=0.8, ge=0.0, le=1.0)
    gray_p: float = Field(default=0.2, ge=0.0, le=1.0)

    @field_validator("ops")
    @classmethod
    def _check_ops(cls, ops: List[str]) -> List[str]:
        resolved = [AUGMENTATION_ALIASES.get(op, op) for op in ops]
        unknown = [op for op in resolved if op not in AUGMENTATION_OPS]
        if unknown:
            raise ValueError(f"unknown augmentation ops: {unknown}")
        if len(set(resolved)) != len(resolved):
            raise ValueError(f"duplicate augmentation ops: {resolved}")
        return resolved

    @field_validator("crop_scale")
    @classmethod
    def _check_scale(cls, scale):
        low, high = scale
        if not 0.0 < low <= high <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < low <= high <= 1, got {scale}")
        return scale

    @classmethod
    def from_aliases(cls, text: str, **overrides) -> "AugmentationSpec":
        """Build from a comma list such as 'hflip,jitter,gray' ('' or 'none' is identity)."""
        text = text.strip()
        ops = [] if text in ("", "none") else [part.strip() for part in text.split(",") if part.strip()]
        return cls(ops=ops, **overrides)

    @classmethod
    def attack_default(cls) -> "AugmentationSpec":
        return cls(ops=["RandomHorizontalFlip", "ColorJitter", "RandomGrayScale"])

    @classmethod
    def pretrain_default(cls) -> "AugmentationSpec":
        return cls(ops=list(AUGMENTATION_OPS))


class PretrainConfig(StrictModel):
    algo: Literal["simclr", "moco"] = "simclr"
    arch: str = "small-conv"
    feature_dim: int = Field(default=512, gt=0)
    input_shape: Tuple[int, int, int] = (32, 32, 3)
    epochs: int = Field(default=200, ge=0)
    batch_size: int = Field(default=128, ge=2)
    lr: float = Field(default=1e-3, gt=0.0)
    optimizer: Literal["adam", "sgd"] = "adam"
    temperature: Optional[float] = Field(default=None, gt=0.0)
    proj_dim: int = Field(default=128, gt=0)
    moco_momentum: float = Field(default=0.999, ge=0.0, le=1.0)
    moco_queue: int = Field(default=4096, gt=0)
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec.pretrain_default)
    seed: int = 0

    @property
    def tau(self) -> float:
        if self.temperature is not None:
            return self.temperature
        return 0.5 if self.algo == "simclr" else 0.07


class PoisoningConfig(StrictModel):
    epsilon: float = Field(default=1.0, ge=0.0)
    norm: Literal["l2", "linf"] = "l2"
    lam: float = Field(default=20.0, ge=0.0, alias="lambda")
    metric: Metric = "l2"
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec.attack_default)
    surrogate_checkpoint: Optional[Path] = None
    steps: int = Field(default=20, ge=0)
    step_size: Optional[float] = Field(default=None, gt=0.0)
    seed: int = 0

    @property
    def effective_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 10.0


class DefenseConfig(StrictModel):
    kind: Literal["none", "top_k", "rounding", "poisoning"] = "none"
    k: Optional[int] = None
    m: Optional[int] = None
    poisoning: Optional[PoisoningConfig] = None

    @model_validator(mode="after")
    def _check_kind(self):
        if self.kind == "top_k" and (self.k is None or self.k < 1):
            raise ValueError("top_k defense needs k >= 1")
        if self.kind == "rounding" and (self.m is None or self.m < 1):
            raise ValueError("rounding defense needs m >= 1")
        if self.kind == "poisoning" and self.poisoning is None:
            raise ValueError("poisoning defense needs a poisoning block")
        return self

    @classmethod
    def parse(cls, text: str) -> "DefenseConfig":
        """
        Parse a CLI defense string.

        Accepted forms: 'none', 'top_k:k=50', 'round:m=1', 'poison:eps=5,norm=l2'.
        """
        text = text.strip()
        kind, _, arg_text = text.partition(":")
        args: Dict[str, str] = {}
        for part in filter(None, (p.strip() for p in arg_text.split(","))):
            key, sep, value = part.partition("=")
            if not sep:
                raise ConfigurationError(f"Malformed defense argument '{part}' in '{text}'")
            args[key.strip()] = value.strip()

        try:
            if kind == "none":
                return cls(kind="none")
            if kind == "top_k":
                return cls(kind="top_k", k=int(args["k"]))
            if kind in ("round", "rounding"):
                return cls(kind="rounding", m=int(args["m"]))
            if kind in ("poison", "poisoning"):
                poisoning: Dict[str, Any] = {}
                if "eps" in args:
                    poisoning["epsilon"] = float(args["eps"])
                if "norm" in args:
                    poisoning["norm"] = {"inf": "linf", "linf": "linf", "l2": "l2"}[args["norm"]]
                if "lambda" in args:
                    poisoning["lam"] = float(args["lambda"])
                if "metric" in args:
                    poisoning["metric"] = args["metric"]
                if "steps" in args:
                    poisoning["steps"] = int(args["steps"])
                if "surrogate" in args:
                    poisoning["surrogate_checkpoint"] = Path(args["surrogate"])
                return cls(kind="poisoning", poisoning=PoisoningConfig(**poisoning))
        except (KeyError, ValueError, ValidationError) as e:
            raise ConfigurationError(f"Invalid defense '{text}': {e}") from e
        raise ConfigurationError(f"Unknown defense kind '{kind}'")

    def describe(self) -> str:
        if self.kind == "top_k":
            return f"top_k:k={self.k}"
        if self.kind == "rounding":
            return f"round:m={self.m}"
        if self.kind == "poisoning":
            return f"poison:eps={self.poisoning.epsilon},norm={self.poisoning.norm}"
        return "none"


class AccountConfig(StrictModel):
    token: str
    budget_cap: Optional[int] = Field(default=None, ge=0)


class ServiceConfig(StrictModel):
    defense: DefenseConfig = Field(default_factory=DefenseConfig)
    price_per_1000: float = Field(default=3.2, ge=0.0)
    accounts: List[AccountConfig] = Field(default_factory=lambda: [AccountConfig(token="attacker")])
    target_checkpoint: Optional[Path] = None


class AttackConfig(StrictModel):
    variant: Variant = "stolen_encoder"
    lam: float = Field(default=20.0, ge=0.0, alias="lambda")
    epochs: int = Field(default=100, ge=0)
    lr: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=64, ge=2)
    metric: Metric = "l2"
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec.attack_default)
    stolen_arch: Optional[str] = None
    optimizer: Literal["adam", "sgd"] = "adam"
    kd_temperature: float = Field(default=1.0, gt=0.0)
    query_batch_size: int = Field(default=256, ge=1)
    seed: int = 0

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.variant == "no_aug" else self.lam


class DownstreamConfig(StrictModel):
    datasets: List[str] = Field(default_factory=lambda: ["MNIST", "GTSRB"])
    hidden: Tuple[int, ...] = (512, 256)
    lr: float = Field(default=1e-4, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    epochs: int = Field(default=100, ge=0)
    train_limit: Optional[int] = Field(default=None, ge=1)
    test_limit: Optional[int] = Field(default=None, ge=1)
    seed: int = 0


class TargetConfig(StrictModel):
    dataset: str = "CIFAR10"
    split: Literal["train", "test", "unlabeled"] = "train"
    limit: Optional[int] = Field(default=None, ge=1)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    checkpoint: Optional[Path] = None


class SurrogateConfig(StrictModel):
    dataset: str = "STL10"
    split: Literal["train", "test", "unlabeled"] = "unlabeled"
    size: Optional[int] = Field(default=None, ge=0)
    fraction: float = Field(default=0.05, gt=0.0, le=1.0)
    seed: int = 0


SweepAxis = Literal[
    "lambda", "surrogate_size", "top_k", "rounding", "poison_eps",
    "metric", "augmentation", "stolen_arch", "algo",
]


class SweepConfig(StrictModel):
    axis: SweepAxis
    values: List[Union[float, int, str]]

    @field_validator("values")
    @classmethod
    def _non_empty(cls, values):
        if not values:
            raise ValueError("sweep needs at least one value")
        return values


class ExperimentManifest(StrictModel):
    name: str = "experiment"
    seed: int = 0
    output_dir: Path = Path("runs/experiment")
    data_root: Optional[Path] = None
    image_shape: Tuple[int, int, int] = (32, 32, 3)
    target: TargetConfig = Field(default_factory=TargetConfig)
    service: ServiceConfig = Field(default_factory=ServiceConfig)
    surrogate: SurrogateConfig = Field(default_factory=SurrogateConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    variants: List[Variant] = Field(default_factory=lambda: ["stolen_encoder"])
    downstream: DownstreamConfig = Field(default_factory=DownstreamConfig)
    sweep: Optional[SweepConfig] = None

    @model_validator(mode="after")
    def _check_shapes(self):
        if tuple(self.target.pretrain.input_shape) != tuple(self.image_shape):
            raise ValueError(
                f"target.pretrain.input_shape {self.target.pretrain.input_shape} "
                f"differs from image_shape {self.image_shape}"
            )
        return self


def load_manifest(path: Union[str, Path]) -> ExperimentManifest:
    """Read a YAML manifest, rejecting unknown keys."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = yaml.safe_load(handle) or {}
    except OSError as e:
        raise ConfigurationError(f"Cannot read manifest {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Malformed manifest {path}: {e}") from e
    return parse_manifest(raw)


def parse_manifest(raw: Dict[str, Any]) -> ExperimentManifest:
    try:
        return ExperimentManifest.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid manifest: {e}") from e
