"""Static figures for a finished run."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import agreement_map, confidence_stats  # noqa: E402

PLOT_FILES = (
    "teacher_curves.png",
    "student_curves.png",
    "confidence.png",
    "agreement.png",
    "cases.png",
)

# fixed metadata keeps reruns byte-identical
_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=80, metadata=_META)
    plt.close(fig)
    return path


def plot_teacher_curves(history, path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    ep = history.column("epoch")
    a.plot(ep, history.column("train_loss"), label="train")
    if any(v is not None for v in history.column("val_loss")):
        a.plot(ep, history.column("val_loss"), label="val")
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend()
    b.plot(ep, history.column("train_dice"), label="train")
    if any(v is not None for v in history.column("val_dice")):
        b.plot(ep, history.column("val_dice"), label="val")
    b.set_xlabel("epoch")
    b.set_ylabel("mean dice")
    b.legend()
    fig.suptitle("Teacher")
    return _save(fig, Path(path))


def plot_student_curves(history, reports, path) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    ep = np.arange(1, len(history) + 1)
    a.plot(ep, history.column("train_loss"), label="train")
    a.plot(ep, history.column("val_loss"), label="val")
    a.set_ylabel("loss")
    b.plot(ep, history.column("val_dice"), label="val dice")
    b.plot(ep, history.column("accuracy"), label="val accuracy")
    b.set_ylabel("score")
    stages = history.column("stage")
    bounds = [i + 0.5 for i in range(1, len(stages)) if stages[i] != stages[i - 1]]
    for ax in (a, b):
        for x in bounds:
            ax.axvline(x, color="grey", lw=0.8, ls="--")
        ax.set_xlabel("epoch")
        ax.legend()
    if reports:
        b.set_title(" ".join(f"S{r.stage}:{r.best_val_dice:.2f}" for r in reports), fontsize=8)
    fig.suptitle("Student curriculum")
    return _save(fig, Path(path))


def plot_confidence(samples, path, bins: int = 20) -> Path:
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    if samples:
        st = confidence_stats(samples, bins=bins)
        edges = np.asarray(st["histogram"]["edges"])
        a.bar(edges[:-1], st["histogram"]["counts"], width=np.diff(edges), align="edge", edgecolor="k")
        a.set_title(f"mean {st['mean']:.3f}  std {st['std']:.3f}")
        b.plot(np.arange(1, len(st["sorted"]) + 1), st["sorted"])
    a.set_xlabel("image confidence")
    a.set_ylabel("count")
    b.set_xlabel("rank")
    b.set_ylabel("image confidence (sorted)")
    return _save(fig, Path(path))


def plot_agreement(teacher_probs, student_probs, path) -> Path:
    """Agreement map of the first case and the per-case agreement histogram.

    Inputs are ``N x C x H x W`` probability stacks.
    """
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    if len(teacher_probs):
        amap, _ = agreement_map(teacher_probs[0], student_probs[0])
        a.imshow(amap, cmap="gray", vmin=0, vmax=1)
        fracs = [agreement_map(t, s)[1] for t, s in zip(teacher_probs, student_probs)]
        b.hist(fracs, bins=20, range=(min(fracs + [0.9]), 1.0), edgecolor="k")
    a.set_title("teacher/student agreement")
    a.axis("off")
    b.set_xlabel("agreement fraction")
    b.set_ylabel("cases")
    return _save(fig, Path(path))


def difference_outline(pred, target) -> np.ndarray:
    """Boolean map of pixels where prediction and ground truth disagree."""
    return np.asarray(pred) != np.asarray(target)


def plot_cases(images, truth, teacher_pred, student_pred, path, n_cases: int = 3, channel: int = -1) -> Path:
    n = max(1, min(n_cases, len(images)))
    fig, axes = plt.subplots(n, 5, figsize=(12, 2.6 * n), squeeze=False)
    titles = ("input", "ground truth", "teacher", "student", "difference")
    for i in range(n):
        if i >= len(images):
            break
        panels = (
            (images[i][channel], "gray", None),
            (truth[i], "viridis", 3),
            (teacher_pred[i], "viridis", 3),
            (student_pred[i], "viridis", 3),
            (difference_outline(student_pred[i], truth[i]), "Reds", 1),
        )
        for ax, (img, cmap, vmax), title in zip(axes[i], panels, titles):
            ax.imshow(img, cmap=cmap, vmin=0 if vmax else None, vmax=vmax, interpolation="nearest")
            ax.axis("off")
            if i == 0:
                ax.set_title(title)
    return _save(fig, Path(path))
