"""Image set model."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from src.utils.errors import PreconditionError

SPLITS = ("train", "test", "unlabeled")


@dataclass
class ImageSet:
    """
    A set of images sharing one H x W x C shape, values in [0, 1].

    images is a float32 array of shape (N, H, W, C). labels, when present,
    is an int64 array of length N.
    """

    images: np.ndarray
    name: str
    split: str
    labels: Optional[np.ndarray] = None
    num_classes: Optional[int] = None
    provenance: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise PreconditionError(f"Unknown split '{self.split}'")
        if self.images.ndim != 4:
            raise PreconditionError(f"images must be N x H x W x C, got shape {self.images.shape}")
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise PreconditionError(
                    f"{len(self.labels)} labels for {len(self.images)} images in {self.name}"
                )
            if self.num_classes is not None and len(self.labels) and (
                self.labels.min() < 0 or self.labels.max() >= self.num_classes
            ):
                raise PreconditionError(f"class ids of {self.name} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def subset(self, indices: List[int], suffix: str = "subset") -> "ImageSet":
        """Select rows by index, recording them in provenance."""
        indices = np.asarray(indices, dtype=np.int64)
        return ImageSet(
            images=self.images[indices],
            name=self.name,
            split=self.split,
            labels=None if self.labels is None else self.labels[indices],
            num_classes=self.num_classes,
            provenance={
                "source": self.name,
                "split": self.split,
                "kind": suffix,
                "indices": indices.tolist(),
            },
        )
