"""Encoder-stealing workbench - command line entry point.

    python3 -m src.main <subcommand> [options]
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import uvicorn

from config.schemas import (
    AttackConfig,
    AugmentationSpec,
    DownstreamConfig,
    PretrainConfig,
    load_manifest,
)
from config.settings import get_settings
from src.adapters.http_client import HttpEncoderAPI
from src.api.server import create_app
from src.data.datasets import limit_dataset, load_dataset, sample_surrogate
from src.defenses.router import DefenseRouter
from src.encoders.checkpoint import load_checkpoint, save_checkpoint
from src.handlers.connection_handler import start_tcp_server
from src.handlers.service import EaaSService
from src.managers.ledger_manager import QueryLedger
from src.managers.pipeline_manager import DOWNSTREAM_LIMIT_KEY, run_pipeline, run_sweep
from src.models.reports import TaskResult
from src.training.attack import steal
from src.training.contrastive import pretrain
from src.training.downstream import (
    ApiSource,
    DirectSource,
    compare_reports,
    downstream_accuracy,
    load_report,
    report,
)
from src.utils.errors import EaaSError
from src.utils.plotting import PLOT_KINDS, emit_plots, kind_for_axis
from src.utils.seeding import enable_deterministic

logger = logging.getLogger(__name__)

DEFAULT_ACCOUNT = "attacker"


def _parse_account(text: str):
    """'token' or 'token:cap'."""
    token, _, cap = text.partition(":")
    return token, int(cap) if cap else None


def _build_local_service(checkpoint: Path, defense: str, price: float, accounts: List[str],
                         surrogate: Optional[Path] = None) -> EaaSService:
    target = load_checkpoint(checkpoint)
    defender = load_checkpoint(surrogate) if surrogate else None
    service = EaaSService(
        target,
        DefenseRouter().build(defense, target.feature_dim, defender),
        QueryLedger(price),
    )
    for text in accounts:
        service.open_account(*_parse_account(text))
    return service


def cmd_pretrain(args, settings) -> int:
    dataset = load_dataset(args.dataset, args.split, args.data_root, tuple(args.image_shape))
    if args.limit and args.limit < len(dataset):
        dataset = sample_surrogate(dataset, args.limit, args.seed)
    config = PretrainConfig(
        algo=args.algo,
        arch=args.arch,
        feature_dim=args.feature_dim,
        input_shape=tuple(args.image_shape),
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        optimizer=args.optimizer,
        seed=args.seed,
    )
    out = Path(args.out)
    result = pretrain(dataset, config, log_path=out.with_suffix(".losses.csv"), device=args.device)
    save_checkpoint(result.encoder, out, config_digest=config.digest())
    return 0


async def _serve(service: EaaSService, args, settings):
    tasks = []
    if args.transport in ("tcp", "both"):
        server = await start_tcp_server(service, args.host or settings.tcp_host, args.tcp_port or settings.tcp_port)
        tasks.append(server.serve_forever())
    if args.transport in ("http", "both"):
        config = uvicorn.Config(
            create_app(service),
            host=args.host or settings.http_host,
            port=args.port or settings.http_port,
            log_level=settings.log_level.lower(),
        )
        tasks.append(uvicorn.Server(config).serve())
    logger.info(f"Serving {service.defense.describe()} target, ${service.ledger.price_per_1000} per 1000 queries")
    await asyncio.gather(*tasks)


def cmd_serve(args, settings) -> int:
    service = _build_local_service(
        Path(args.checkpoint), args.defense, args.price, args.account or [DEFAULT_ACCOUNT], args.surrogate,
    )
    try:
        asyncio.run(_serve(service, args, settings))
    except KeyboardInterrupt:
        logger.info("Server stopped by user")
    return 0


def _attack_config(args) -> AttackConfig:
    return AttackConfig(
        variant=args.variant,
        lam=args.lam,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch,
        metric=args.metric,
        augmentation=AugmentationSpec.from_aliases(args.aug),
        stolen_arch=args.stolen_arch,
        optimizer=args.optimizer,
        kd_temperature=args.kd_temperature,
        seed=args.seed,
    )


def cmd_steal(args, settings) -> int:
    if args.api:
        api = HttpEncoderAPI(args.api)
    elif args.target:
        api = _build_local_service(Path(args.target), args.defense, args.price, [args.account])
    elif args.variant != "local_pretrain":
        logger.error("steal needs --api or --target unless --variant local_pretrain")
        return 2
    else:
        api = None

    source = load_dataset(args.surrogate, args.surrogate_split, args.data_root, tuple(args.image_shape))
    size = args.surrogate_size or len(source)
    surrogate = sample_surrogate(source, min(size, len(source)), args.seed)

    reference_arch = None
    if args.target and not args.stolen_arch:
        reference_arch = load_checkpoint(args.target).arch_id
    result = steal(
        api,
        args.account,
        surrogate,
        _attack_config(args),
        reference_arch=reference_arch or args.reference_arch,
        feature_dim=args.feature_dim,
        out_path=Path(args.out),
        device=args.device,
    )
    print(json.dumps(result.to_dict(), indent=2, default=str))
    return 0


def cmd_eval(args, settings) -> int:
    if not (args.encoder or args.api or args.target):
        logger.error("eval needs --encoder and/or --api/--target")
        return 2
    config = DownstreamConfig(
        datasets=args.downstream,
        hidden=tuple(args.hidden),
        lr=args.lr,
        batch_size=args.batch,
        epochs=args.epochs,
        train_limit=args.train_limit,
        test_limit=args.test_limit,
        seed=args.seed,
    )
    target_source = None
    if args.api:
        target_source = ApiSource(HttpEncoderAPI(args.api), args.account)
    elif args.target:
        target_source = ApiSource(
            _build_local_service(Path(args.target), args.defense, settings.price_per_1000, [args.account]),
            args.account,
        )
    stolen_source = DirectSource(load_checkpoint(args.encoder)) if args.encoder else None

    tasks = []
    for name in config.datasets:
        train = load_dataset(name, "train", args.data_root, tuple(args.image_shape))
        test = load_dataset(name, "test", args.data_root, tuple(args.image_shape))
        train = limit_dataset(train, config.train_limit, config.seed, DOWNSTREAM_LIMIT_KEY)
        test = limit_dataset(test, config.test_limit, config.seed, DOWNSTREAM_LIMIT_KEY)
        result = TaskResult(task=name)
        if target_source is not None:
            result.ta, _ = downstream_accuracy(target_source, train, test, config)
            result.queries_downstream = len(train) + len(test)
        if stolen_source is not None:
            result.sa, _ = downstream_accuracy(stolen_source, train, test, config)
        tasks.append(result)

    item = report(args.label, tasks, config_digest=config.digest(), out_path=Path(args.out))
    print(json.dumps(item.to_dict(), indent=2, default=str))
    return 0


def cmd_report(args, settings) -> int:
    if args.compare:
        rows = compare_reports(args.compare, out_path=args.out)
        for row in rows:
            print(
                f"{row['label']:<20} {row['task']:<14} TA={row['ta']} SA={row['sa']} "
                f"SA/TA={row['ratio_percent']}% queries={row['queries_attack']}"
            )
        return 0
    for path in args.reports:
        print(json.dumps(load_report(path).to_dict(), indent=2, default=str))
    return 0


def cmd_sweep(args, settings) -> int:
    manifest = load_manifest(args.manifest)
    data_root = args.data_root if args.data_root_given else None
    if manifest.sweep is None:
        reports = run_pipeline(manifest, data_root=data_root, device=args.device)
        logger.info(f"Pipeline finished with {len(reports)} reports in {manifest.output_dir}")
        return 0
    reports = run_sweep(manifest, data_root=data_root, device=args.device)
    kind = kind_for_axis(manifest.sweep.axis)
    outputs = emit_plots(reports, kind, Path(manifest.output_dir) / "plots")
    logger.info(f"Sweep finished: {len(reports)} reports, outputs {sorted(str(p) for p in outputs.values())}")
    return 0


def cmd_plot(args, settings) -> int:
    reports = [load_report(path) for path in args.reports]
    emit_plots(reports, args.kind, Path(args.out), name=args.name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eaas", description="Encoder stealing and EaaS defense workbench")
    parser.add_argument("--data-root", type=Path, default=None, help="Dataset root (default: $EAAS_DATA_ROOT)")
    parser.add_argument("--log-level", default=None)
    parser.add_argument("--deterministic", action="store_true", help="Force reproducible kernels")
    parser.add_argument("--device", default=None)
    parser.add_argument("--image-shape", type=int, nargs=3, default=[32, 32, 3], metavar=("H", "W", "C"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="Pre-train a target encoder with SimCLR or MoCo")
    p.add_argument("--dataset", default="CIFAR10")
    p.add_argument("--split", default="train")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--algo", choices=["simclr", "moco"], default="simclr")
    p.add_argument("--arch", default="small-conv")
    p.add_argument("--feature-dim", type=int, default=512)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("serve", help="Serve a target encoder over HTTP and/or the line protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--defense", default="none", help="none | top_k:k=50 | round:m=1 | poison:eps=5,norm=l2")
    p.add_argument("--surrogate", type=Path, default=None, help="Defender surrogate checkpoint for poisoning")
    p.add_argument("--price", type=float, default=None)
    p.add_argument("--account", action="append", help="token or token:budget_cap (repeatable)")
    p.add_argument("--transport", choices=["http", "tcp", "both"], default="http")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--tcp-port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("steal", help="Steal an encoder through an EaaS API")
    p.add_argument("--api", default=None, help="Base URL of a running HTTP service")
    p.add_argument("--target", default=None, help="Target checkpoint to serve in-process instead")
    p.add_argument("--defense", default="none")
    p.add_argument("--price", type=float, default=None)
    p.add_argument("--account", default=DEFAULT_ACCOUNT)
    p.add_argument("--surrogate", default="STL10", help="Surrogate dataset name")
    p.add_argument("--surrogate-split", default="unlabeled")
    p.add_argument("--surrogate-size", type=int, default=None)
    p.add_argument("--variant", default="stolen_encoder",
                   choices=["stolen_encoder", "no_aug", "query_aug", "local_pretrain", "distillation"])
    p.add_argument("--lambda", dest="lam", type=float, default=20.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--metric", choices=["l2", "l1", "cosine"], default="l2")
    p.add_argument("--aug", default="hflip,jitter,gray")
    p.add_argument("--stolen-arch", default=None)
    p.add_argument("--reference-arch", default=None, help="Target architecture when only --api is known")
    p.add_argument("--feature-dim", type=int, default=512)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--kd-temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_steal)

    p = sub.add_parser("eval", help="Train downstream classifiers and report TA/SA")
    p.add_argument("--encoder", default=None, help="Stolen encoder checkpoint (gives SA)")
    p.add_argument("--api", default=None, help="Target service URL (gives TA)")
    p.add_argument("--target", default=None, help="Target checkpoint served in-process (gives TA)")
    p.add_argument("--defense", default="none")
    p.add_argument("--account", default="evaluator")
    p.add_argument("--downstream", action="append", default=None)
    p.add_argument("--hidden", type=int, nargs="+", default=[512, 256])
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--train-limit", type=int, default=None)
    p.add_argument("--test-limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--label", default="eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="Show or compare report JSON files")
    p.add_argument("reports", nargs="*")
    p.add_argument("--compare", nargs="+", default=None)
    p.add_argument("--out", default=None, help="CSV destination for --compare")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="Run a manifest (and its sweep, if any)")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="Plot reports that share a sweep axis")
    p.add_argument("reports", nargs="+")
    p.add_argument("--kind", choices=sorted(PLOT_KINDS), required=True)
    p.add_argument("--name", default=None)
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    args = build_parser().parse_args(argv)

    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    if args.deterministic or settings.deterministic:
        enable_deterministic()
    args.data_root_given = args.data_root is not None
    if args.data_root is None:
        args.data_root = settings.data_root
    if getattr(args, "price", "unset") is None:
        args.price = settings.price_per_1000
    if args.command == "eval" and not args.downstream:
        args.downstream = ["MNIST", "GTSRB"]

    try:
        return args.func(args, settings)
    except EaaSError as e:
        logger.error(f"{args.command} failed ({e.kind}): {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
