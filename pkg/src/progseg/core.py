"""Domain types and small tensor helpers shared across the package."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

DEFAULT_CLASSES = ("Background", "NCR/NET", "Edema", "Enhancing")
MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
MIN_SPATIAL = 8


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


def _require_finite(x, what: str) -> None:
    finite = torch.isfinite(x).all() if torch.is_tensor(x) else np.isfinite(x).all()
    if not bool(finite):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class Volume:
    """A channels x H x W image with a role tag per channel."""

    data: np.ndarray
    channel_roles: tuple = MODALITIES
    spacing: Optional[tuple] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ShapeError(f"volume must be channels x H x W, got shape {data.shape}")
        if data.shape[1] < MIN_SPATIAL or data.shape[2] < MIN_SPATIAL:
            raise ShapeError(f"spatial size must be at least {MIN_SPATIAL}x{MIN_SPATIAL}, got {data.shape[1:]}")
        if len(self.channel_roles) != data.shape[0]:
            raise ShapeError(f"{len(self.channel_roles)} channel roles for {data.shape[0]} channels")
        _require_finite(data, "volume")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel_roles", tuple(self.channel_roles))

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(np.array(self.data))


@dataclass(frozen=True)
class LabelMask:
    """Integer class map of shape H x W."""

    classes: np.ndarray
    num_classes: int = len(DEFAULT_CLASSES)

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 2:
            raise ShapeError(f"label mask must be H x W, got shape {classes.shape}")
        if not np.issubdtype(classes.dtype, np.integer):
            raise TypeError(f"label mask must be integer typed, got {classes.dtype}")
        if classes.size and (classes.min() < 0 or classes.max() >= self.num_classes):
            raise ValueError(f"class ids must lie in [0, {self.num_classes - 1}]")
        classes = classes.astype(np.int64)
        classes.setflags(write=False)
        object.__setattr__(self, "classes", classes)

    @property
    def shape(self) -> tuple:
        return self.classes.shape

    def onehot(self) -> np.ndarray:
        return onehot(self.classes, self.num_classes)


@dataclass
class LabeledSet:
    volumes: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.volumes) != len(self.masks):
            raise ShapeError("volumes and masks differ in length")
        if not self.ids:
            self.ids = [f"l{i:05d}" for i in range(len(self.volumes))]
        _check_ids(self.ids, len(self.volumes))
        for v, m in zip(self.volumes, self.masks):
            if v.shape != m.shape:
                raise ShapeError(f"volume shape {v.shape} does not match mask shape {m.shape}")
        _check_consistent([v.shape for v in self.volumes])

    def __len__(self) -> int:
        return len(self.volumes)

    def arrays(self):
        """Stacked (images, labels) arrays, or None for an empty set."""
        if not self.volumes:
            return None
        x = np.stack([v.data for v in self.volumes])
        y = np.stack([m.classes for m in self.masks])
        return x, y


@dataclass
class UnlabeledSet:
    volumes: list = field(default_factory=list)
    ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"u{i:05d}" for i in range(len(self.volumes))]
        _check_ids(self.ids, len(self.volumes))
        _check_consistent([v.shape for v in self.volumes])

    def __len__(self) -> int:
        return len(self.volumes)


def _check_ids(ids: Sequence[str], n: int) -> None:
    if len(ids) != n:
        raise ShapeError(f"{len(ids)} ids for {n} samples")
    if len(set(ids)) != len(ids):
        raise ValueError("sample ids must be unique")


def _check_consistent(shapes: list) -> None:
    if len(set(shapes)) > 1:
        raise ShapeError(f"inconsistent spatial shapes within set: {sorted(set(shapes))}")


@dataclass
class ModelOutput:
    """Network output for one input or a batch.

    ``logits`` and ``probs`` are ``[..., C, H, W]``; ``logvar`` is ``[..., H, W]``.
    """

    logits: torch.Tensor
    probs: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.logits.shape != self.probs.shape:
            raise ShapeError("logits and probs differ in shape")
        if self.logvar.shape != self.logits.shape[:-3] + self.logits.shape[-2:]:
            raise ShapeError(f"logvar shape {tuple(self.logvar.shape)} does not match logits {tuple(self.logits.shape)}")

    def prediction(self) -> torch.Tensor:
        return self.probs.argmax(dim=-3)


def softmax_over_classes(logits: torch.Tensor) -> torch.Tensor:
    """Softmax along the class axis (third from last)."""
    if logits.dim() < 3:
        raise ShapeError("logits must be at least C x H x W")
    _require_finite(logits, "logits")
    return torch.softmax(logits, dim=-3)


def onehot(mask, num_classes: int):
    """One-hot encode an integer map ``[..., H, W]`` to ``[..., C, H, W]``.

    Works on numpy arrays and torch tensors; output type follows input.
    """
    if torch.is_tensor(mask):
        if mask.numel() and (mask.min() < 0 or mask.max() >= num_classes):
            raise ValueError(f"class ids must lie in [0, {num_classes - 1}]")
        out = torch.nn.functional.one_hot(mask.long(), num_classes)
        return out.movedim(-1, -3)
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        raise ValueError(f"class ids must lie in [0, {num_classes - 1}]")
    out = (mask[..., None, :, :] == np.arange(num_classes)[:, None, None]).astype(np.uint8)
    return out
