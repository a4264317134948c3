"""Segmentation objectives for teacher and student training.

All functions accept a single sample (``C x H x W`` probabilities) or a batch
(``B x C x H x W``). Batched losses are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import ShapeError

CLAMP_DELTA = 1e-7


@dataclass
class LossConfig:
    ce_weight: float = 1.0
    reg_weight: float = 1e-5
    high_weight: float = 0.5
    low_weight: float = 0.1
    eps: float = 1e-6
    tau: float = 0.9
    tau_mode: str = "fixed"  # or "percentile"
    tau_percentile: float = 60.0
    low_cap: float = 2.0
    var_floor: float = 1e-6

    def __post_init__(self):
        for name in ("ce_weight", "reg_weight", "high_weight", "low_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.eps <= 0 or self.low_cap <= 0 or self.var_floor <= 0:
            raise ValueError("eps, low_cap and var_floor must be > 0")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.tau_mode not in ("fixed", "percentile"):
            raise ValueError(f"unknown tau_mode {self.tau_mode!r}")
        if not 0.0 <= self.tau_percentile <= 100.0:
            raise ValueError("tau_percentile must lie in [0, 100]")


def _batched(t: torch.Tensor, spatial_dims: int) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == spatial_dims else t


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """1 - mean over classes of the soft Dice score, averaged over the batch."""
    _same_shape(probs, target, "dice_loss")
    p, y = _batched(probs, 3), _batched(target, 3).to(probs.dtype)
    inter = (p * y).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + y.sum(dim=(-2, -1))
    score = (2 * inter + eps) / (denom + eps)
    return (1 - score.mean(dim=-1)).mean()


def pixel_ce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-pixel cross-entropy ``-log P[label]`` with clamped probabilities."""
    if probs.shape[:-3] + probs.shape[-2:] != labels.shape:
        raise ShapeError(f"pixel_ce: probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    p = probs.clamp(CLAMP_DELTA, 1 - CLAMP_DELTA)
    return -torch.log(p.gather(-3, labels.long().unsqueeze(-3))).squeeze(-3)


def ce_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``-sum_c y log P`` (one-hot ``target``)."""
    _same_shape(probs, target, "ce_loss")
    p = probs.clamp(CLAMP_DELTA, 1 - CLAMP_DELTA)
    return -(target.to(probs.dtype) * torch.log(p)).sum(dim=-3).mean()


def supervised_loss(probs, target, cfg: LossConfig) -> torch.Tensor:
    """Dice + weighted CE, without the weight penalty."""
    return dice_loss(probs, target, cfg.eps) + cfg.ce_weight * ce_loss(probs, target)


def teacher_loss(probs, target, sq_norm, cfg: LossConfig) -> torch.Tensor:
    """Supervised loss plus ``reg_weight * ||theta||^2``.

    ``sq_norm`` is the squared parameter norm (see ``backbone.squared_norm``).
    """
    return supervised_loss(probs, target, cfg) + cfg.reg_weight * sq_norm


def uncertainty_target(passes: torch.Tensor, var_floor: float = 1e-6) -> torch.Tensor:
    """Log of the across-pass variance of the predicted-class probability.

    ``passes`` is ``K x [B x] C x H x W``. The tracked class per pixel is the
    argmax of the pass-averaged distribution. Population variance (ddof=0).
    """
    if passes.dim() < 4 or passes.shape[0] < 2:
        raise ValueError("uncertainty_target needs K >= 2 stacked probability maps")
    label = passes.mean(dim=0).argmax(dim=-3, keepdim=True)
    tracked = passes.gather(-3, label.unsqueeze(0).expand(passes.shape[0], *label.shape)).squeeze(-3)
    var = tracked.var(dim=0, unbiased=False)
    return torch.log(var.clamp_min(var_floor))


def uncertainty_regression_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(pred, target, "uncertainty_regression_loss")
    return ((pred - target) ** 2).mean()


def _partition_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-image mean of ``values`` over ``mask`` (0 for empty masks), batch-averaged."""
    values, mask = _batched(values, 2), _batched(mask, 2)
    m = mask.to(values.dtype)
    count = m.sum(dim=(-2, -1))
    total = (values * m).sum(dim=(-2, -1))
    per_image = torch.where(count > 0, total / count.clamp_min(1), torch.zeros_like(total))
    return per_image.mean()


def high_mask(conf: torch.Tensor, tau: float) -> torch.Tensor:
    return conf >= tau


def high_conf_loss(probs, pseudo, conf, tau: float) -> torch.Tensor:
    """Mean pixel CE over pixels with ``conf >= tau``."""
    return _partition_mean(pixel_ce(probs, pseudo), high_mask(conf, tau))


def low_conf_loss(probs, pseudo, conf, tau: float, cap: float) -> torch.Tensor:
    """Mean of ``min(pixel CE, cap)`` over pixels with ``conf < tau``."""
    return _partition_mean(pixel_ce(probs, pseudo).clamp_max(cap), ~high_mask(conf, tau))


def student_total_loss(sup, high, low, sq_norm, cfg: LossConfig) -> torch.Tensor:
    return sup + cfg.high_weight * high - cfg.low_weight * low + cfg.reg_weight * sq_norm


def resolve_tau(conf_maps, cfg: LossConfig) -> float:
    """Threshold for the high/low split: fixed, or a percentile of the pool's confidences."""
    if cfg.tau_mode == "fixed" or not len(conf_maps):
        return cfg.tau
    values = np.concatenate([np.asarray(c, dtype=np.float64).ravel() for c in conf_maps])
    return float(np.percentile(values, cfg.tau_percentile)) if values.size else cfg.tau
