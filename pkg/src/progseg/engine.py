"""Training-loop plumbing shared by teacher and student training."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .core import LabeledSet, onehot
from .losses import LossConfig, supervised_loss
from .metrics import EvalResult, classwise_scores, pixel_accuracy

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("train_loss", "val_loss", "train_dice", "val_dice", "accuracy")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    aborted: bool = False

    def append(self, **record) -> None:
        epoch = len(self.records) + 1
        self.records.append({"epoch": epoch, **{k: record.get(k) for k in HISTORY_FIELDS}, **record})

    def __len__(self) -> int:
        return len(self.records)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]

    def to_jsonl(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrainHistory":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def snapshot(model) -> dict:
    return copy.deepcopy(model.state_dict())


@torch.no_grad()
def predict(model, images: np.ndarray, batch_size: int = 16):
    """Deterministic forward over an image stack; returns (probs, logvar) arrays."""
    probs, logvar = [], []
    for idx in batches(len(images), batch_size):
        out = model(torch.from_numpy(images[idx]), stochastic=False)
        probs.append(out.probs.numpy())
        logvar.append(out.logvar.numpy())
    return np.concatenate(probs), np.concatenate(logvar)


@torch.no_grad()
def evaluate_model(model, data: LabeledSet, loss_cfg: Optional[LossConfig] = None, batch_size: int = 16) -> EvalResult:
    """Supervised loss, foreground macro Dice and pixel accuracy under a deterministic pass."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty set")
    loss_cfg = loss_cfg or LossConfig()
    x, y = data.arrays()
    num_classes = model.config.num_classes
    total, preds = 0.0, []
    for idx in batches(len(x), batch_size):
        out = model(torch.from_numpy(x[idx]), stochastic=False)
        target = onehot(torch.from_numpy(y[idx]), num_classes)
        total += float(supervised_loss(out.probs, target, loss_cfg)) * len(idx)
        preds.append(out.prediction().numpy())
    pred = np.concatenate(preds)
    scores = classwise_scores(pred, y, num_classes)
    return EvalResult(total / len(x), scores.mean_dice, pixel_accuracy(pred, y), scores)
