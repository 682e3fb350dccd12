"""Encoder checkpoint persistence."""

import logging
import pickle
import zipfile
from pathlib import Path
from typing import Union

import torch

from src.encoders.encoder import Encoder
from src.utils.artifacts import atomic_torch_save
from src.utils.errors import CheckpointError, ConfigurationError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(encoder: Encoder, path: Union[str, Path], config_digest: str = "") -> Path:
    """
    Write weights plus a metadata block.

    Args:
        encoder: Encoder to persist
        path: Destination file
        config_digest: Digest of the training config that produced the weights

    Returns:
        The written path
    """
    path = Path(path)
    metadata = encoder.metadata()
    metadata["config_digest"] = config_digest
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "metadata": metadata,
        "state_dict": {key: value.detach().cpu() for key, value in encoder.state_dict().items()},
    }
    atomic_torch_save(payload, path)
    logger.info(f"Saved {encoder.arch_id} checkpoint ({encoder.provenance}) to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Encoder:
    """
    Rebuild an encoder from a checkpoint.

    Raises:
        CheckpointError: missing, truncated or corrupted file, version mismatch,
            or metadata that disagrees with the stored weights
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"Checkpoint not found: {path}")

    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (RuntimeError, EOFError, OSError, ValueError, pickle.UnpicklingError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"Corrupted checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or "metadata" not in payload or "state_dict" not in payload:
        raise CheckpointError(f"{path} is not an encoder checkpoint")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {CHECKPOINT_FORMAT_VERSION}")

    metadata = payload["metadata"]
    try:
        encoder = Encoder(
            arch_id=metadata["arch_id"],
            feature_dim=metadata["feature_dim"],
            input_shape=tuple(metadata["input_shape"]),
            init_seed=metadata["init_seed"],
            provenance=metadata["provenance"],
            width=metadata.get("width"),
        )
        encoder.load_state_dict(payload["state_dict"], strict=True)
    except KeyError as e:
        raise CheckpointError(f"{path}: metadata field {e} missing") from e
    except ConfigurationError as e:
        raise CheckpointError(f"{path}: {e}") from e
    except RuntimeError as e:
        raise CheckpointError(f"{path}: weights do not match metadata: {e}") from e

    encoder.config_digest = metadata.get("config_digest", "")
    encoder.eval()
    logger.info(f"Loaded {encoder.arch_id} checkpoint ({encoder.provenance}) from {path}")
    return encoder
