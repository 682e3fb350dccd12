"""JSON wire format for image batches and feature rows."""

import base64
from typing import Dict, List, Sequence, Union

import numpy as np
import torch

from src.utils.errors import PreconditionError

FLOAT_FORMAT = "%.8g"


def encode_images(images: Union[np.ndarray, torch.Tensor]) -> Dict:
    """
    Pack a batch as base64 little-endian float32 N x H x W x C plus its shape.

    Tensors are taken to be N x C x H x W and transposed first.
    """
    if isinstance(images, torch.Tensor):
        if images.ndim != 4:
            raise PreconditionError(f"expected an N x C x H x W tensor, got {tuple(images.shape)}")
        images = images.detach().cpu().permute(0, 2, 3, 1).numpy()
    array = np.ascontiguousarray(images, dtype="<f4")
    if array.ndim != 4:
        raise PreconditionError(f"expected an N x H x W x C batch, got shape {array.shape}")
    return {
        "shape": list(array.shape),
        "images": base64.b64encode(array.tobytes()).decode("ascii"),
    }


def decode_images(payload: Dict) -> np.ndarray:
    """Inverse of encode_images; returns float32 N x H x W x C."""
    try:
        shape = tuple(int(v) for v in payload["shape"])
        raw = base64.b64decode(payload["images"], validate=True)
    except (KeyError, TypeError, ValueError) as e:
        raise PreconditionError(f"malformed image payload: {e}") from e
    if len(shape) != 4:
        raise PreconditionError(f"image shape must have 4 dims, got {shape}")
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise PreconditionError(f"image payload has {len(raw)} bytes, shape {shape} needs {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def serialize_value(value: float) -> float:
    return float(FLOAT_FORMAT % value)


def encode_features(vectors: torch.Tensor) -> List[List[float]]:
    """Feature rows as lists of floats rounded to 8 significant digits."""
    return [[serialize_value(v) for v in row] for row in vectors.detach().cpu().tolist()]


def decode_features(rows: Sequence[Sequence[float]], feature_dim: int = 0) -> torch.Tensor:
    if len(rows) == 0:
        return torch.zeros(0, feature_dim)
    return torch.tensor(rows, dtype=torch.float32)
