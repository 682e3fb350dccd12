"""Defender-side surrogate for feature poisoning."""

import logging
from pathlib import Path
from typing import Optional, Union

from config.schemas import AttackConfig
from src.encoders.encoder import Encoder
from src.handlers.service import EaaSService
from src.managers.ledger_manager import QueryLedger
from src.models.image_set import ImageSet
from src.training.attack import StealResult, steal

logger = logging.getLogger(__name__)

DEFENDER_ACCOUNT = "defender"


def train_defender_surrogate(
    pretraining_set: ImageSet,
    target: Encoder,
    attack_config: AttackConfig,
    out_path: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
) -> StealResult:
    """
    Steal the defender's own target, using its pre-training data as surrogate.

    Runs the attacker's training loop with the mirrored hyperparameters
    against the undefended target. Queries go to a private ledger, so the
    attacker's accounting is unaffected.

    Args:
        pretraining_set: The defender's pre-training images
        target: Undefended target encoder
        attack_config: Attacker hyperparameters to mirror
        out_path: Optional checkpoint path
        device: Torch device name

    Returns:
        StealResult whose encoder has provenance 'defender-surrogate'
    """
    service = EaaSService(target, ledger=QueryLedger(price_per_1000=0.0))
    service.open_account(DEFENDER_ACCOUNT)
    mirrored = attack_config
    if attack_config.variant in ("local_pretrain", "distillation"):
        mirrored = attack_config.model_copy(update={"variant": "stolen_encoder"})

    logger.info(f"Training defender surrogate on {len(pretraining_set)} images of {pretraining_set.name}")
    return steal(
        service,
        DEFENDER_ACCOUNT,
        pretraining_set,
        mirrored,
        reference_arch=target.arch_id,
        provenance="defender-surrogate",
        out_path=out_path,
        device=device,
    )
