"""Teacher pseudo-labels, per-pixel / per-image confidence, curriculum selection
and teacher/student agreement refinement."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ._io import read_archive, read_header, write_archive
from .backbone import TransASPPUNet, state_digest
from .core import UnlabeledSet
from .engine import batches, generator

log = logging.getLogger(__name__)

CACHE_FORMAT = "progseg-pseudolabel/1"


@dataclass
class PseudoLabeledSample:
    sample_id: str
    image: np.ndarray  # C x H x W input
    pseudo: np.ndarray  # H x W hard labels (argmax of soft)
    soft: np.ndarray  # C x H x W pass-averaged teacher probabilities
    conf: np.ndarray  # H x W per-pixel confidence in [0, 1]
    image_conf: float = field(default=None)
    provenance: int = 0

    def __post_init__(self):
        if self.image_conf is None:
            self.image_conf = image_confidence(self.conf)

    def with_conf(self, conf: np.ndarray, stage: int) -> "PseudoLabeledSample":
        return replace(self, conf=conf, image_conf=image_confidence(conf), provenance=stage)


@dataclass
class StageSelection:
    stage: int
    fraction: float
    ids: list

    def __len__(self) -> int:
        return len(self.ids)


def pixel_confidence(mean_probs, logvar, logvar_ref: float = 0.0):
    """``max_c P * exp(-max(U - logvar_ref, 0))``, clamped to [0, 1].

    ``mean_probs`` is ``[..., C, H, W]``, ``logvar`` is ``[..., H, W]``; numpy or torch.
    """
    if torch.is_tensor(mean_probs):
        top = mean_probs.max(dim=-3).values
        return (top * torch.exp(-(logvar - logvar_ref).clamp_min(0))).clamp(0, 1)
    top = np.asarray(mean_probs).max(axis=-3)
    return np.clip(top * np.exp(-np.maximum(np.asarray(logvar) - logvar_ref, 0)), 0, 1)


def image_confidence(conf) -> float:
    conf = np.asarray(conf, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("confidence grid is empty")
    return float(conf.mean())


def _sample_seed(seed: int, sample_id: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{sample_id}".encode()).digest()[:8], "little") >> 1


@torch.no_grad()
def label_sample(model: TransASPPUNet, image: np.ndarray, K: int, seed: int, sample_id: str, logvar_ref: float = 0.0):
    """Pseudo-label one image: K dropout passes (one batched call) plus a deterministic pass."""
    x = torch.from_numpy(np.array(image, dtype=np.float32)).unsqueeze(0)
    gen = generator(_sample_seed(seed, sample_id))
    mean_probs = model(x.expand(K, *x.shape[1:]), stochastic=True, generator=gen).probs.mean(dim=0)
    logvar = model(x, stochastic=False).logvar[0]
    conf = pixel_confidence(mean_probs, logvar, logvar_ref)
    return PseudoLabeledSample(
        sample_id,
        np.asarray(image, dtype=np.float32),
        mean_probs.argmax(dim=0).numpy(),
        mean_probs.numpy(),
        conf.numpy().astype(np.float32),
    )


class PseudoLabelCache:
    """One archive per sample id; entries are only valid for the teacher digest they were made with."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, sample_id: str) -> Path:
        return self.root / f"{sample_id}.zip"

    def get(self, sample_id: str, image: np.ndarray, teacher_digest: str, K: int, seed: int):
        p = self.path(sample_id)
        if not p.exists():
            return None
        header, arrays = read_archive(p)
        if (header.get("format"), header.get("teacher_digest"), header.get("K"), header.get("seed")) != (
            CACHE_FORMAT, teacher_digest, K, seed
        ):
            return None
        return PseudoLabeledSample(
            sample_id, np.asarray(image, dtype=np.float32), arrays["pseudo"], arrays["soft"], arrays["conf"],
            header["image_conf"], header["provenance"],
        )

    def put(self, sample: PseudoLabeledSample, teacher_digest: str, K: int, seed: int) -> None:
        header = {
            "format": CACHE_FORMAT,
            "sample_id": sample.sample_id,
            "teacher_digest": teacher_digest,
            "K": K,
            "seed": seed,
            "image_conf": sample.image_conf,
            "provenance": sample.provenance,
        }
        write_archive(self.path(sample.sample_id), header, {"pseudo": sample.pseudo, "soft": sample.soft, "conf": sample.conf})

    def digests(self) -> set:
        return {read_header(p).get("teacher_digest") for p in sorted(self.root.glob("*.zip"))}


def generate_pseudolabels(
    unlabeled: UnlabeledSet,
    teacher: TransASPPUNet,
    K: int = 8,
    seed: int = 0,
    cache: Optional[PseudoLabelCache] = None,
    logvar_ref: float = 0.0,
):
    """One PseudoLabeledSample per unlabeled volume, reusing valid cache entries.

    Returns (samples, number of samples recomputed).
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    digest = state_digest(teacher)
    teacher.eval()
    samples, computed = [], 0
    for sid, vol in zip(unlabeled.ids, unlabeled.volumes):
        sample = cache.get(sid, vol.data, digest, K, seed) if cache else None
        if sample is None:
            sample = label_sample(teacher, vol.data, K, seed, sid, logvar_ref)
            computed += 1
            if cache:
                cache.put(sample, digest, K, seed)
        samples.append(sample)
    return samples, computed


def stage_size(fraction: float, n: int) -> int:
    """ceil(fraction * n) evaluated on the decimal value of ``fraction``."""
    return math.ceil(Fraction(fraction).limit_denominator(10**6) * n)


def rank_samples(samples) -> list:
    """Sample ids by image confidence descending, ties by id ascending."""
    return [s.sample_id for s in sorted(samples, key=lambda s: (-s.image_conf, s.sample_id))]


def select_stage(samples, fraction: float, stage: int = 0) -> StageSelection:
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"stage fraction must lie in (0, 1], got {fraction}")
    ranked = rank_samples(samples)
    return StageSelection(stage, fraction, ranked[: stage_size(fraction, len(ranked))])


@torch.no_grad()
def refine_by_agreement(samples, student: TransASPPUNet, alpha: float = 0.5, stage: int = 0, batch_size: int = 16):
    """Damp confidence by ``alpha`` wherever the student's argmax disagrees with the pseudo-label.

    The pseudo-label is the teacher's argmax, so agreement is checked against it
    directly. Labels are never rewritten.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    student.eval()
    out = list(samples)
    for idx in batches(len(out), batch_size):
        x = torch.from_numpy(np.stack([out[i].image for i in idx]))
        pred = student(x, stochastic=False).prediction().numpy()
        for j, i in enumerate(idx):
            s = out[i]
            agree = pred[j] == s.pseudo
            conf = np.where(agree, s.conf, alpha * s.conf).astype(np.float32)
            out[i] = s.with_conf(conf, stage)
    return out


def agreement_fraction(samples, student: TransASPPUNet, batch_size: int = 16) -> float:
    total, hits = 0, 0
    with torch.no_grad():
        for idx in batches(len(samples), batch_size):
            x = torch.from_numpy(np.stack([samples[i].image for i in idx]))
            pred = student(x, stochastic=False).prediction().numpy()
            hits += sum(int((pred[j] == samples[i].pseudo).sum()) for j, i in enumerate(idx))
            total += pred.size
    return hits / total if total else 1.0
