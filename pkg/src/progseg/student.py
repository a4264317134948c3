"""Staged student training over a growing, confidence-ranked pseudo-label pool."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .backbone import BackboneConfig, TransASPPUNet, build_model, squared_norm, state_digest
from .core import LabeledSet, onehot
from .engine import TrainHistory, batches, evaluate_model, generator, snapshot
from .losses import (
    LossConfig,
    high_conf_loss,
    low_conf_loss,
    resolve_tau,
    student_total_loss,
    supervised_loss,
)
from .metrics import classwise_scores, pixel_accuracy
from .pseudolabel import refine_by_agreement, select_stage

log = logging.getLogger(__name__)

STAGE_FRACTIONS = (0.10, 0.20, 0.40, 0.60, 0.80, 1.00)


@dataclass
class CurriculumSchedule:
    fractions: tuple = STAGE_FRACTIONS
    epochs: tuple = (10,) * len(STAGE_FRACTIONS)

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if isinstance(self.epochs, int):
            self.epochs = (self.epochs,) * len(self.fractions)
        self.epochs = tuple(int(e) for e in self.epochs)
        if not self.fractions:
            raise ValueError("schedule needs at least one stage")
        if len(self.epochs) != len(self.fractions):
            raise ValueError("one epoch budget per stage is required")
        if any(b <= a for a, b in zip(self.fractions, self.fractions[1:])):
            raise ValueError("stage fractions must be strictly increasing")
        if self.fractions[0] <= 0 or self.fractions[-1] != 1.0:
            raise ValueError("stage fractions must lie in (0, 1] and end at 1.0")
        if min(self.epochs) < 1:
            raise ValueError("every stage needs at least one epoch")

    def __iter__(self):
        return iter(zip(self.fractions, self.epochs))

    def __len__(self) -> int:
        return len(self.fractions)


@dataclass
class StudentTrainConfig:
    batch_size: int = 4
    learning_rate: float = 2e-3
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must lie in (0, 1]")


@dataclass
class StageReport:
    stage: int
    fraction: float
    best_val_loss: float
    best_val_dice: float
    dice_gain: float
    samples_used: int
    pseudo_used: int
    tau: float
    start_digest: str = field(repr=False, default="")
    end_digest: str = field(repr=False, default="")

    def to_dict(self) -> dict:
        return asdict(self)


def write_stage_reports(path, reports) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_stage_reports(path) -> list:
    with open(path) as fh:
        return [StageReport(**json.loads(line)) for line in fh if line.strip()]


def _student_batch_loss(model, out, items, labeled_y, pseudo_by_id, tau, loss_cfg, num_classes):
    lab = [j for j, (kind, _) in enumerate(items) if kind == "l"]
    pse = [j for j, (kind, _) in enumerate(items) if kind == "u"]
    zero = out.probs.new_zeros(())
    sup = high = low = zero
    if lab:
        y = torch.from_numpy(np.stack([labeled_y[items[j][1]] for j in lab]))
        sup = supervised_loss(out.probs[lab], onehot(y, num_classes), loss_cfg)
    if pse:
        ps = [pseudo_by_id[items[j][1]] for j in pse]
        pseudo = torch.from_numpy(np.stack([s.pseudo for s in ps]))
        conf = torch.from_numpy(np.stack([s.conf for s in ps]))
        high = high_conf_loss(out.probs[pse], pseudo, conf, tau)
        low = low_conf_loss(out.probs[pse], pseudo, conf, tau, loss_cfg.low_cap)
    return student_total_loss(sup, high, low, squared_norm(model), loss_cfg)


def run_curriculum(
    labeled: LabeledSet,
    samples: list,
    val: LabeledSet,
    backbone_cfg: BackboneConfig,
    schedule: Optional[CurriculumSchedule] = None,
    loss_cfg: Optional[LossConfig] = None,
    train_cfg: Optional[StudentTrainConfig] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
):
    """Train a randomly initialised student through the staged curriculum.

    ``samples`` are PseudoLabeledSample objects from the frozen teacher. Each
    stage trains on the labelled set plus the top-ranked fraction of samples,
    then damps pseudo-label confidence where the student disagrees.

    Returns (best model, stage reports, history, refined samples).
    """
    if len(val) == 0:
        raise ValueError("curriculum training needs a non-empty validation set")
    schedule = schedule or CurriculumSchedule()
    loss_cfg = loss_cfg or LossConfig()
    train_cfg = train_cfg or StudentTrainConfig()
    num_classes = backbone_cfg.num_classes

    model = build_model(backbone_cfg, train_cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate)
    rng = np.random.default_rng(train_cfg.seed)
    drop_gen = generator(train_cfg.seed + 1)
    x_lab, y_lab = labeled.arrays() if len(labeled) else (None, None)
    history = TrainHistory()
    reports = []
    baseline = evaluate_model(model, val, loss_cfg).dice
    history.baseline_dice = baseline
    prev_best = baseline
    best_state, best_dice = snapshot(model), -math.inf
    samples = list(samples)

    for t, (fraction, epochs) in enumerate(schedule, start=1):
        by_id = {s.sample_id: s for s in samples}
        sel = select_stage(samples, fraction, t) if samples else None
        chosen = sel.ids if sel else []
        tau = resolve_tau([by_id[i].conf for i in chosen], loss_cfg)
        pool = [("l", i) for i in range(len(labeled))] + [("u", sid) for sid in chosen]
        start_digest = state_digest(model)
        stage_loss, stage_dice = math.inf, -math.inf
        aborted = False

        for _ in range(epochs):
            model.train()
            losses, preds, targets = [], [], []
            for idx in batches(len(pool), train_cfg.batch_size, rng):
                items = [pool[i] for i in idx]
                x = np.stack([x_lab[k] if kind == "l" else by_id[k].image for kind, k in items])
                out = model(torch.from_numpy(x), stochastic=True, generator=drop_gen)
                loss = _student_batch_loss(model, out, items, y_lab, by_id, tau, loss_cfg, num_classes)
                if not torch.isfinite(loss):
                    log.error("non-finite student loss in stage %d; stopping", t)
                    aborted = True
                    break
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
                preds.append(out.prediction().numpy())
                targets.append(np.stack([y_lab[k] if kind == "l" else by_id[k].pseudo for kind, k in items]))
            if aborted:
                break
            model.eval()
            pred, target = np.concatenate(preds), np.concatenate(targets)
            ev = evaluate_model(model, val, loss_cfg)
            history.append(
                stage=t,
                train_loss=float(np.mean(losses)),
                train_dice=classwise_scores(pred, target, num_classes).mean_dice,
                train_accuracy=pixel_accuracy(pred, target),
                val_loss=ev.loss,
                val_dice=ev.dice,
                accuracy=ev.accuracy,
            )
            if on_epoch:
                on_epoch(history.records[-1])
            stage_loss = min(stage_loss, ev.loss)
            if ev.dice > stage_dice:
                stage_dice = ev.dice
            if ev.dice > best_dice:
                best_dice, best_state = ev.dice, snapshot(model)

        if aborted:
            history.aborted = True
            break
        reports.append(
            StageReport(
                stage=t,
                fraction=fraction,
                best_val_loss=stage_loss,
                best_val_dice=stage_dice,
                dice_gain=stage_dice - prev_best,
                samples_used=len(pool),
                pseudo_used=len(chosen),
                tau=tau,
                start_digest=start_digest,
                end_digest=state_digest(model),
            )
        )
        log.info("stage %d: %s", t, reports[-1])
        prev_best = stage_dice
        if t < len(schedule) and samples:
            samples = refine_by_agreement(samples, model, train_cfg.alpha, stage=t)

    model.load_state_dict(best_state)
    model.eval()
    return model, reports, history, samples


def evaluate_student(model: TransASPPUNet, val: LabeledSet, loss_cfg: Optional[LossConfig] = None) -> dict:
    ev = evaluate_model(model, val, loss_cfg)
    return {
        "val_loss": ev.loss,
        "val_dice": ev.dice,
        "accuracy": ev.accuracy,
        "per_class_dice": dict(zip(ev.scores.names, ev.scores.dice)),
        "per_class_iou": dict(zip(ev.scores.names, ev.scores.iou)),
    }
