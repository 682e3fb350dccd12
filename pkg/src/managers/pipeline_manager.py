"""Experiment orchestration: pretrain -> serve -> steal -> eval, plus sweeps."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from config.schemas import (
    AugmentationSpec,
    DefenseConfig,
    ExperimentManifest,
    PoisoningConfig,
    parse_manifest,
)
from config.settings import get_settings
from src.data.datasets import limit_dataset, load_dataset, sample_surrogate
from src.defenses.surrogate import train_defender_surrogate
from src.encoders.checkpoint import load_checkpoint, save_checkpoint
from src.encoders.encoder import Encoder, encoder_digest
from src.handlers.service import EaaSService
from src.models.image_set import ImageSet
from src.models.reports import EvalReport, TaskResult
from src.training.attack import steal
from src.training.contrastive import pretrain
from src.training.downstream import (
    ApiSource,
    DirectSource,
    downstream_accuracy,
    report,
    report_rows,
    REPORT_CSV_FIELDS,
)
from src.utils.artifacts import digest_array, digest_payload, read_json, write_csv, write_json
from src.utils.errors import AttackAborted, ConfigurationError, EaaSError, PipelineError

logger = logging.getLogger(__name__)

EVALUATOR_ACCOUNT = "evaluator"
DOWNSTREAM_LIMIT_KEY = "downstream"


@dataclass
class TaskData:
    train: ImageSet
    test: ImageSet


@dataclass
class PipelineContext:
    """State shared between stages of one run."""

    manifest: ExperimentManifest
    data_root: Path
    output_dir: Path
    cache_dir: Path
    device: Optional[str] = None
    target: Optional[Encoder] = None
    target_set: Optional[ImageSet] = None
    surrogate: Optional[ImageSet] = None
    service: Optional[EaaSService] = None
    defender_surrogate: Optional[Encoder] = None
    tasks: Dict[str, TaskData] = field(default_factory=dict)
    ta: Dict[str, TaskResult] = field(default_factory=dict)

    @property
    def manifest_digest(self) -> str:
        return self.manifest.digest()


class PipelineManager:
    """
    Runs one manifest end to end.

    Every trained artifact is stored under <output_dir>/cache keyed by the
    digest of its own config and the digests of its inputs, so reruns and
    sweep points that share a stage reuse it instead of retraining.
    """

    def __init__(
        self,
        manifest: ExperimentManifest,
        data_root: Optional[Union[str, Path]] = None,
        device: Optional[str] = None,
        cache_dir: Optional[Union[str, Path]] = None,
        axis: Optional[str] = None,
        axis_value: Any = None,
    ):
        settings = get_settings()
        root = Path(data_root) if data_root else (manifest.data_root or settings.data_root)
        output_dir = Path(manifest.output_dir)
        self.ctx = PipelineContext(
            manifest=manifest,
            data_root=root,
            output_dir=output_dir,
            cache_dir=Path(cache_dir) if cache_dir else output_dir / "cache",
            device=device,
        )
        self.axis = axis
        self.axis_value = axis_value
        self.logger = logger

    def _stage(self, name: str, fn, *args, **kwargs):
        self.logger.info(f"[{self.ctx.manifest.name}] stage {name}")
        try:
            return fn(*args, **kwargs)
        except PipelineError:
            raise
        except EaaSError as e:
            self.logger.error(f"Stage {name} failed: {e}")
            raise PipelineError(name, str(e)) from e

    def run(self) -> List[EvalReport]:
        """
        Execute every stage and write reports, loss curves and ledger snapshots.

        Returns:
            One EvalReport per requested variant
        """
        self._stage("pretrain", self.prepare_target)
        self._stage("surrogate", self.prepare_surrogate)
        self._stage("serve", self.prepare_service)
        self._stage("data", self.prepare_tasks)
        self._stage("eval", self.evaluate_target)

        reports = []
        for variant in self.ctx.manifest.variants:
            encoder, steal_info = self._stage("steal", self.steal_variant, variant)
            reports.append(self._stage("eval", self.evaluate_variant, variant, encoder, steal_info))

        self._write_summary(reports)
        return reports

    # --- pretrain -------------------------------------------------------

    def prepare_target(self) -> Encoder:
        ctx = self.ctx
        target_cfg = ctx.manifest.target
        if target_cfg.checkpoint is not None:
            ctx.target = load_checkpoint(target_cfg.checkpoint)
            return ctx.target

        ctx.target_set = self._load(target_cfg.dataset, target_cfg.split, target_cfg.limit)
        key = digest_payload({
            "pretrain": target_cfg.pretrain.model_dump(mode="json"),
            "data": digest_array(ctx.target_set.images),
        })
        path = ctx.cache_dir / f"target-{key[:16]}.ckpt"
        if path.is_file():
            self.logger.info(f"Reusing pre-trained target {path.name}")
            ctx.target = load_checkpoint(path)
            return ctx.target

        result = pretrain(
            ctx.target_set,
            target_cfg.pretrain,
            provenance="pretrained-target",
            log_path=path.with_suffix(".losses.csv"),
            device=ctx.device,
        )
        save_checkpoint(result.encoder, path, config_digest=target_cfg.pretrain.digest())
        ctx.target = result.encoder
        return ctx.target

    def _load(self, name: str, split: str, limit: Optional[int] = None, seed_key: str = "limit") -> ImageSet:
        image_set = load_dataset(name, split, self.ctx.data_root, self.ctx.manifest.image_shape)
        return limit_dataset(image_set, limit, self.ctx.manifest.seed, seed_key)

    def _pretraining_set(self) -> ImageSet:
        ctx = self.ctx
        if ctx.target_set is None:
            target_cfg = ctx.manifest.target
            ctx.target_set = self._load(target_cfg.dataset, target_cfg.split, target_cfg.limit)
        return ctx.target_set

    # --- surrogate ------------------------------------------------------

    def prepare_surrogate(self) -> ImageSet:
        ctx = self.ctx
        cfg = ctx.manifest.surrogate
        source = load_dataset(cfg.dataset, cfg.split, ctx.data_root, ctx.manifest.image_shape)
        size = cfg.size
        if size is None:
            size = max(1, math.floor(cfg.fraction * len(self._pretraining_set())))
        ctx.surrogate = sample_surrogate(source, size, cfg.seed)
        return ctx.surrogate

    # --- serve ----------------------------------------------------------

    def prepare_service(self) -> EaaSService:
        ctx = self.ctx
        service_cfg = ctx.manifest.service
        if service_cfg.defense.kind == "poisoning":
            ctx.defender_surrogate = self._defender_surrogate(service_cfg.defense.poisoning)
        ctx.service = EaaSService.from_config(service_cfg, target=ctx.target, surrogate=ctx.defender_surrogate)
        ctx.service.open_account(EVALUATOR_ACCOUNT)
        return ctx.service

    def _defender_surrogate(self, poisoning: PoisoningConfig) -> Encoder:
        ctx = self.ctx
        if poisoning.surrogate_checkpoint is not None:
            return load_checkpoint(poisoning.surrogate_checkpoint)
        mirrored = ctx.manifest.attack
        key = digest_payload({"target": encoder_digest(ctx.target), "attack": mirrored.model_dump(mode="json")})
        path = ctx.cache_dir / f"defender-{key[:16]}.ckpt"
        if path.is_file():
            return load_checkpoint(path)
        return train_defender_surrogate(self._pretraining_set(), ctx.target, mirrored, out_path=path, device=ctx.device).encoder

    # --- downstream data ------------------------------------------------

    def prepare_tasks(self):
        ctx = self.ctx
        cfg = ctx.manifest.downstream
        for name in cfg.datasets:
            ctx.tasks[name] = TaskData(
                train=self._load(name, "train", cfg.train_limit, DOWNSTREAM_LIMIT_KEY),
                test=self._load(name, "test", cfg.test_limit, DOWNSTREAM_LIMIT_KEY),
            )

    def target_tag(self) -> str:
        """
        Identity of what the API returns: target weights, defense config and,
        under poisoning, the defender surrogate the perturbation is computed with.
        """
        ctx = self.ctx
        payload = {
            "target": encoder_digest(ctx.target),
            "defense": ctx.manifest.service.defense.model_dump(mode="json"),
        }
        if ctx.manifest.service.defense.kind == "poisoning":
            if ctx.defender_surrogate is None:
                raise PipelineError("serve", "poisoning defense has no defender surrogate yet")
            payload["defender_surrogate"] = encoder_digest(ctx.defender_surrogate)
        return digest_payload(payload)

    def evaluate_target(self):
        """TA per task, through the API so defenses apply and queries are billed."""
        ctx = self.ctx
        for name, data in ctx.tasks.items():
            before = ctx.service.ledger_report(EVALUATOR_ACCOUNT).query_count
            source = ApiSource(ctx.service, EVALUATOR_ACCOUNT, cache_tag=self.target_tag())
            accuracy, _ = downstream_accuracy(
                source, data.train, data.test, ctx.manifest.downstream,
                cache_dir=ctx.cache_dir / "features",
                log_path=ctx.output_dir / "curves" / f"target-{name}.csv",
                log_tags={"manifest_digest": ctx.manifest_digest},
            )
            # one query per image, also on a feature-cache hit
            queries = len(data.train) + len(data.test)
            billed = ctx.service.ledger_report(EVALUATOR_ACCOUNT).query_count - before
            if billed not in (0, queries):
                self.logger.warning(f"{name}: ledger billed {billed} downstream queries, expected {queries}")
            ctx.ta[name] = TaskResult(task=name, ta=accuracy, queries_downstream=queries)

    # --- steal ----------------------------------------------------------

    def _attack_key(self, variant: str) -> str:
        ctx = self.ctx
        attack = ctx.manifest.attack.model_copy(update={"variant": variant})
        return digest_payload({
            "target": self.target_tag(),
            "surrogate": digest_array(ctx.surrogate.images),
            "attack": attack.model_dump(mode="json"),
        })

    def steal_variant(self, variant: str):
        ctx = self.ctx
        attack = ctx.manifest.attack.model_copy(update={"variant": variant})
        path = ctx.cache_dir / f"stolen-{variant}-{self._attack_key(variant)[:16]}.ckpt"
        ledger_path = path.with_suffix(".ledger.json")
        if path.is_file() and ledger_path.is_file():
            self.logger.info(f"Reusing stolen encoder {path.name}")
            return load_checkpoint(path), read_json(ledger_path)

        account = ctx.manifest.service.accounts[0].token
        try:
            result = steal(
                ctx.service,
                account,
                ctx.surrogate,
                attack,
                reference_arch=ctx.target.arch_id,
                feature_dim=ctx.target.feature_dim,
                out_path=path,
                device=ctx.device,
            )
        except AttackAborted as e:
            if e.partial is not None:
                save_checkpoint(e.partial.encoder, ctx.output_dir / f"partial-{variant}.ckpt")
                write_json(
                    ctx.output_dir / f"partial-{variant}.ledger.json",
                    {**e.partial.to_dict(), "manifest_digest": ctx.manifest_digest},
                )
            raise
        steal_info = {**result.to_dict(), "manifest_digest": ctx.manifest_digest}
        write_json(ledger_path, steal_info)
        return result.encoder, steal_info

    # --- eval -----------------------------------------------------------

    def evaluate_variant(self, variant: str, encoder: Encoder, steal_info: Dict) -> EvalReport:
        ctx = self.ctx
        price = ctx.manifest.service.price_per_1000
        queries_attack = int(steal_info.get("queries", 0))
        tasks = []
        for name, data in ctx.tasks.items():
            accuracy, _ = downstream_accuracy(
                DirectSource(encoder), data.train, data.test, ctx.manifest.downstream,
                cache_dir=ctx.cache_dir / "features",
                log_path=ctx.output_dir / "curves" / f"{variant}-{name}.csv",
                log_tags={"manifest_digest": ctx.manifest_digest},
            )
            ta = ctx.ta[name]
            tasks.append(TaskResult(
                task=name,
                ta=ta.ta,
                sa=accuracy,
                queries_attack=queries_attack,
                queries_downstream=ta.queries_downstream,
                cost_dollars=queries_attack * price / 1000,
            ))

        return report(
            label=variant,
            tasks=tasks,
            config_digest=self._attack_key(variant),
            manifest_digest=ctx.manifest_digest,
            axis=self.axis,
            axis_value=self.axis_value,
            extra={"steal": steal_info, "defense": ctx.manifest.service.defense.describe()},
            out_path=ctx.output_dir / "reports" / f"{variant}.json",
        )

    def _write_summary(self, reports: List[EvalReport]):
        ctx = self.ctx
        rows = [row for item in reports for row in report_rows(item)]
        write_csv(ctx.output_dir / "variants.csv", rows, REPORT_CSV_FIELDS)
        write_json(ctx.output_dir / "ledger.json", {
            "manifest_digest": ctx.manifest_digest,
            "accounts": ctx.service.ledger.snapshot(),
        })


def run_pipeline(
    manifest: ExperimentManifest,
    data_root: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
) -> List[EvalReport]:
    """Run one manifest; see PipelineManager."""
    return PipelineManager(manifest, data_root=data_root, device=device).run()


def apply_axis(manifest: ExperimentManifest, axis: str, value: Any) -> ExperimentManifest:
    """
    Copy of the manifest with one sweep axis set to `value`.

    Raises:
        ConfigurationError: unknown axis or a value the axis cannot take
    """
    data = manifest.model_dump()
    data["sweep"] = None
    if axis == "lambda":
        data["attack"]["lam"] = float(value)
    elif axis == "surrogate_size":
        data["surrogate"]["size"] = int(value)
    elif axis == "top_k":
        data["service"]["defense"] = DefenseConfig(kind="top_k", k=int(value)).model_dump()
    elif axis == "rounding":
        data["service"]["defense"] = DefenseConfig(kind="rounding", m=int(value)).model_dump()
    elif axis == "poison_eps":
        current = manifest.service.defense.poisoning or PoisoningConfig()
        poisoning = current.model_copy(update={"epsilon": float(value)})
        data["service"]["defense"] = DefenseConfig(kind="poisoning", poisoning=poisoning).model_dump()
    elif axis == "metric":
        data["attack"]["metric"] = str(value)
    elif axis == "augmentation":
        data["attack"]["augmentation"] = AugmentationSpec.from_aliases(str(value)).model_dump()
    elif axis == "stolen_arch":
        data["attack"]["stolen_arch"] = str(value)
    elif axis == "algo":
        data["target"]["pretrain"]["algo"] = str(value)
    else:
        raise ConfigurationError(f"Unknown sweep axis '{axis}'")
    return parse_manifest(data)


def run_sweep(
    manifest: ExperimentManifest,
    data_root: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
) -> List[EvalReport]:
    """
    Run the pipeline once per sweep value.

    Points share one artifact cache, so a sweep over an attack parameter
    pre-trains the target only once. Each point writes into its own
    <output_dir>/<axis>=<value> directory.
    """
    if manifest.sweep is None:
        raise ConfigurationError("manifest has no sweep block")
    axis = manifest.sweep.axis
    cache_dir = Path(manifest.output_dir) / "cache"
    reports: List[EvalReport] = []
    for value in manifest.sweep.values:
        point = apply_axis(manifest, axis, value)
        point = point.model_copy(update={"output_dir": Path(manifest.output_dir) / f"{axis}={value}"})
        logger.info(f"Sweep {manifest.name}: {axis}={value}")
        manager = PipelineManager(point, data_root=data_root, device=device, cache_dir=cache_dir, axis=axis, axis_value=value)
        reports.extend(manager.run())
    return reports
