"""Artifact writing and content digests."""

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Union

import numpy as np
import torch

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def canonical_json(payload) -> str:
    """Serialize with sorted keys and no whitespace so equal payloads hash equally."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)


def digest_payload(payload) -> str:
    """SHA-256 of the canonical JSON form of a payload."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def digest_array(array) -> str:
    """SHA-256 over an array's dtype, shape and raw bytes."""
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.ascontiguousarray(array)
    hasher = hashlib.sha256()
    hasher.update(str(array.dtype).encode("ascii"))
    hasher.update(str(array.shape).encode("ascii"))
    hasher.update(array.tobytes())
    return hasher.hexdigest()


def digest_state_dict(state: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over every tensor of a state dict, in key order."""
    hasher = hashlib.sha256()
    for key in sorted(state):
        hasher.update(key.encode("utf-8"))
        hasher.update(digest_array(state[key]).encode("ascii"))
    return hasher.hexdigest()


def atomic_write_bytes(path: PathLike, data: bytes):
    """Write to a temp file next to the target, then rename over it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except Exception:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def write_json(path: PathLike, payload):
    atomic_write_bytes(path, json.dumps(payload, indent=2, sort_keys=True, default=str).encode("utf-8"))


def read_json(path: PathLike):
    with open(path, "r", encoding="utf-8") as handle:
        return json.load(handle)


def write_csv(path: PathLike, rows: Iterable[Dict], fieldnames: List[str]):
    """Write dict rows as CSV atomically."""
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def atomic_torch_save(obj, path: PathLike):
    """torch.save through the atomic writer."""
    buffer = io.BytesIO()
    torch.save(obj, buffer)
    atomic_write_bytes(path, buffer.getvalue())
