"""Supervised teacher training with an uncertainty-distillation head."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import BackboneConfig, TransASPPUNet, build_model, squared_norm
from .core import LabeledSet, UnlabeledSet, onehot
from .engine import TrainHistory, batches, evaluate_model, generator, snapshot
from .losses import LossConfig, teacher_loss, uncertainty_regression_loss, uncertainty_target
from .metrics import classwise_scores, pixel_accuracy

log = logging.getLogger(__name__)

# Start the log-variance head near typical dropout variances instead of log(1) = 0.
LOGVAR_BIAS_INIT = -6.0


@dataclass
class TeacherTrainConfig:
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float = 2e-3
    K: int = 8
    seed: int = 0
    uncertainty_weight: float = 0.1
    logvar_lr_mult: float = 10.0
    detach_logvar: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.batch_size < 1 or self.learning_rate <= 0 or self.uncertainty_weight < 0:
            raise ValueError("batch_size, learning_rate must be positive and uncertainty_weight >= 0")


@torch.no_grad()
def stochastic_passes(model, x: torch.Tensor, K: int, gen: Optional[torch.Generator] = None) -> torch.Tensor:
    """Stack of K dropout-active probability maps, shape ``K x B x C x H x W``."""
    return torch.stack([model(x, stochastic=True, generator=gen).probs for _ in range(K)])


def train_teacher(
    labeled: LabeledSet,
    val: Optional[LabeledSet],
    backbone_cfg: BackboneConfig,
    train_cfg: TeacherTrainConfig,
    loss_cfg: Optional[LossConfig] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    unlabeled: Optional[UnlabeledSet] = None,
):
    """Train a teacher on ``labeled``; returns (best model, TrainHistory).

    The segmentation loss sees only ``labeled``. The log-variance head regresses
    K-pass dropout variance on each labelled batch and, when ``unlabeled`` is
    given, on an equally sized unlabelled batch as well. The best model is
    chosen by validation Dice, or train Dice when ``val`` is empty.
    """
    if len(labeled) == 0:
        raise ValueError("teacher training needs at least one labelled sample")
    loss_cfg = loss_cfg or LossConfig()
    model = build_model(backbone_cfg, train_cfg.seed)
    with torch.no_grad():
        last = model.logvar_head[-1] if isinstance(model.logvar_head, torch.nn.Sequential) else model.logvar_head
        last.bias.fill_(LOGVAR_BIAS_INIT)
    head = set(model.logvar_head.parameters())
    opt = torch.optim.Adam(
        [
            {"params": [p for p in model.parameters() if p not in head]},
            {"params": list(head), "lr": train_cfg.learning_rate * train_cfg.logvar_lr_mult},
        ],
        lr=train_cfg.learning_rate,
    )
    rng = np.random.default_rng(train_cfg.seed)
    drop_gen = generator(train_cfg.seed + 1)
    mc_gen = generator(train_cfg.seed + 2)
    x_all, y_all = labeled.arrays()
    x_unl = np.stack([v.data for v in unlabeled.volumes]) if unlabeled is not None and len(unlabeled) else None
    unl_rng = np.random.default_rng([train_cfg.seed, 1])
    unl_order, unl_pos = np.empty(0, dtype=np.int64), 0
    has_val = val is not None and len(val) > 0
    history = TrainHistory()
    best_state, best_dice = snapshot(model), -math.inf

    for epoch in range(train_cfg.epochs):
        model.train()
        losses, preds, order = [], [], []
        for idx in batches(len(x_all), train_cfg.batch_size, rng):
            x = torch.from_numpy(x_all[idx])
            n_lab = len(idx)
            use_unc = train_cfg.uncertainty_weight > 0
            if use_unc and x_unl is not None:
                if unl_pos + n_lab > len(unl_order):
                    unl_order, unl_pos = unl_rng.permutation(len(x_unl)), 0
                extra = x_unl[unl_order[unl_pos : unl_pos + n_lab]]
                unl_pos += n_lab
                x = torch.cat([x, torch.from_numpy(extra)])
            target = onehot(torch.from_numpy(y_all[idx]), backbone_cfg.num_classes)
            out = model(x, stochastic=True, generator=drop_gen, detach_logvar=train_cfg.detach_logvar)
            loss = teacher_loss(out.probs[:n_lab], target, squared_norm(model), loss_cfg)
            if use_unc:
                u_target = uncertainty_target(stochastic_passes(model, x, train_cfg.K, mc_gen), loss_cfg.var_floor)
                loss = loss + train_cfg.uncertainty_weight * uncertainty_regression_loss(out.logvar, u_target)
            if not torch.isfinite(loss):
                log.error("non-finite teacher loss at epoch %d; keeping last finite checkpoint", epoch + 1)
                history.aborted = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            preds.append(out.prediction()[:n_lab].numpy())
            order.append(idx)
        if history.aborted:
            break

        model.eval()
        pred = np.concatenate(preds)
        y_seen = y_all[np.concatenate(order)]
        train_dice = classwise_scores(pred, y_seen, backbone_cfg.num_classes).mean_dice
        record = {"train_loss": float(np.mean(losses)), "train_dice": train_dice, "train_accuracy": pixel_accuracy(pred, y_seen)}
        if has_val:
            ev = evaluate_model(model, val, loss_cfg)
            record.update(val_loss=ev.loss, val_dice=ev.dice, accuracy=ev.accuracy)
            score = ev.dice
        else:
            record.update(accuracy=record["train_accuracy"])
            score = train_dice
        history.append(**record)
        if on_epoch:
            on_epoch(history.records[-1])
        log.info("teacher epoch %d: %s", epoch + 1, {k: round(v, 4) for k, v in record.items() if v is not None})
        if score > best_dice:
            best_dice, best_state = score, snapshot(model)

    model.load_state_dict(best_state)
    model.eval()
    return model, history


@torch.no_grad()
def teacher_predict(model: TransASPPUNet, x, K: int = 8, seed: int = 0):
    """Pass-averaged probabilities and deterministic log-variance.

    ``x`` is ``[B x] C x H x W``. Returns (mean_probs, logvar) tensors.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not torch.is_tensor(x):
        x = torch.from_numpy(np.asarray(x, dtype=np.float32))
    gen = generator(seed)
    mean_probs = stochastic_passes(model, x, K, gen).mean(dim=0)
    logvar = model(x, stochastic=False).logvar
    return mean_probs, logvar
