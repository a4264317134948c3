"""Hard-mask overlap metrics, confidence summaries and teacher/student agreement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import DEFAULT_CLASSES, ShapeError


def _as_array(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    if hasattr(x, "classes"):
        return x.classes
    return np.asarray(x)


def _masks(pred, target, cls: int):
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred == cls, target == cls


def _ratio(num: float, den: float, a_empty: bool, b_empty: bool) -> float:
    if a_empty and b_empty:
        return 1.0
    if a_empty or b_empty:
        return 0.0
    return num / den


def dice_coefficient(pred, target, cls: int) -> float:
    """2|A&B| / (|A|+|B|); 1.0 when both masks are empty, 0.0 when only one is."""
    a, b = _masks(pred, target, cls)
    na, nb = int(a.sum()), int(b.sum())
    return _ratio(2.0 * np.logical_and(a, b).sum(), na + nb, na == 0, nb == 0)


def iou(pred, target, cls: int) -> float:
    a, b = _masks(pred, target, cls)
    na, nb = int(a.sum()), int(b.sum())
    return _ratio(float(np.logical_and(a, b).sum()), np.logical_or(a, b).sum(), na == 0, nb == 0)


def pixel_accuracy(pred, target) -> float:
    pred, target = _as_array(pred), _as_array(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return float((pred == target).mean())


@dataclass
class ClasswiseScores:
    names: tuple
    dice: list
    iou: list
    include_background: bool = False

    def _fg(self, values):
        start = 0 if self.include_background else 1
        vals = values[start:] or values
        return float(np.mean(vals))

    @property
    def mean_dice(self) -> float:
        return self._fg(self.dice)

    @property
    def mean_iou(self) -> float:
        return self._fg(self.iou)

    def inconsistencies(self, tol: float = 1e-3) -> list:
        """Classes whose (dice, iou) pair violates iou = dice / (2 - dice)."""
        return [
            n for n, d, j in zip(self.names, self.dice, self.iou) if abs(j - d / (2.0 - d)) > tol
        ]

    def to_records(self) -> dict:
        out = {n: {"dice": d, "iou": j} for n, d, j in zip(self.names, self.dice, self.iou)}
        out["macro"] = {"dice": self.mean_dice, "iou": self.mean_iou, "include_background": self.include_background}
        return out


def classwise_scores(pred, target, num_classes: int = 4, names=None, include_background: bool = False) -> ClasswiseScores:
    """Per-class Dice/IoU with pixels pooled across every sample in ``pred``."""
    names = tuple(names or (DEFAULT_CLASSES if num_classes == len(DEFAULT_CLASSES) else range(num_classes)))
    dice = [dice_coefficient(pred, target, c) for c in range(num_classes)]
    jac = [iou(pred, target, c) for c in range(num_classes)]
    return ClasswiseScores(tuple(str(n) for n in names), dice, jac, include_background)


def confidence_stats(samples, bins: int = 20) -> dict:
    """Summary, fixed-range histogram and sorted curve of image-level confidences.

    Accepts pseudo-labelled samples (anything with ``image_conf``) or floats.
    """
    values = np.array([getattr(s, "image_conf", s) for s in samples], dtype=np.float64)
    if values.size == 0:
        raise ValueError("confidence_stats needs at least one sample")
    lo, hi = float(values.min()), float(values.max())
    edges_range = (lo, hi) if hi > lo else (lo - 0.5 / bins, hi + 0.5 / bins)
    counts, edges = np.histogram(values, bins=bins, range=edges_range)
    return {
        "mean": float(values.mean()),
        "min": lo,
        "max": hi,
        "std": float(values.std()),
        "histogram": {"counts": counts.tolist(), "edges": edges.tolist()},
        "sorted": np.sort(values).tolist(),
    }


def agreement_map(teacher, student):
    """Per-pixel argmax agreement between two outputs; returns (map, fraction).

    Inputs may be ``ModelOutput`` objects or probability arrays ``[..., C, H, W]``.
    """
    pt = _as_array(getattr(teacher, "probs", teacher))
    ps = _as_array(getattr(student, "probs", student))
    if pt.shape != ps.shape:
        raise ShapeError(f"teacher shape {pt.shape} != student shape {ps.shape}")
    agree = pt.argmax(axis=-3) == ps.argmax(axis=-3)
    return agree, float(agree.mean())


@dataclass
class EvalResult:
    loss: float
    dice: float
    accuracy: float
    scores: ClasswiseScores = field(repr=False, default=None)
