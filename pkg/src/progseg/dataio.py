"""Synthetic toy-tumour corpora, multi-modal volume ingestion and corpus persistence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import MODALITIES, LabeledSet, LabelMask, UnlabeledSet, Volume

BRATS_LABEL_MAP = {0: 0, 1: 1, 2: 2, 4: 3}

# Mean intensity per (modality, region). Regions: outside head, brain tissue,
# NCR/NET, edema, enhancing. Rows follow MODALITIES order.
_CONTRAST = np.array(
    [
        # out  brain  ncr   edema  enh
        [0.0, 0.50, 0.20, 0.40, 0.35],  # T1
        [0.0, 0.50, 0.30, 0.50, 1.00],  # T1ce
        [0.0, 0.45, 0.90, 0.90, 0.70],  # T2
        [0.0, 0.45, 0.60, 0.95, 0.70],  # FLAIR
    ],
    dtype=np.float64,
)


@dataclass
class SyntheticSpec:
    count: int = 200
    n_labeled: int = 20
    n_val: int = 20
    H: int = 64
    W: int = 64
    modalities: int = 4
    noise_sigma: float = 0.3
    blur_sigma: float = 1.5
    edema_radius: tuple = (8.0, 18.0)
    core_fraction: tuple = (0.4, 0.75)
    enhancing_fraction: tuple = (0.3, 0.7)
    enhancing_prob: float = 0.85
    contrast_jitter: float = 0.15
    seed: int = 0

    def __post_init__(self):
        self.edema_radius = tuple(float(r) for r in self.edema_radius)
        self.core_fraction = tuple(float(r) for r in self.core_fraction)
        self.enhancing_fraction = tuple(float(r) for r in self.enhancing_fraction)
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be >= 0")
        if self.n_labeled + self.n_val > self.count:
            raise ValueError("n_labeled + n_val exceeds count")
        if not 1 <= self.modalities <= len(MODALITIES):
            raise ValueError(f"modalities must lie in [1, {len(MODALITIES)}]")
        lo, hi = self.edema_radius
        if not 0 < lo <= hi:
            raise ValueError("edema_radius must be an increasing positive range")
        # disk centre is drawn so the edema disk sits inside the head ellipse
        if 2 * hi + 4 > min(self.H, self.W) * 0.8:
            raise ValueError(f"edema radius {hi} does not fit inside a {self.H}x{self.W} image")
        for name in ("core_fraction", "enhancing_fraction"):
            a, b = getattr(self, name)
            if not 0 < a <= b < 1:
                raise ValueError(f"{name} must be an increasing range inside (0, 1)")

    @property
    def n_unlabeled(self) -> int:
        return self.count - self.n_labeled - self.n_val


def _render(spec: SyntheticSpec, rng: np.random.Generator):
    H, W = spec.H, spec.W
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2, (W - 1) / 2
    ay, ax = 0.45 * H, 0.42 * W
    head = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0

    r_ed = rng.uniform(*spec.edema_radius)
    r_core = r_ed * rng.uniform(*spec.core_fraction)
    r_enh = r_core * rng.uniform(*spec.enhancing_fraction) if rng.random() < spec.enhancing_prob else 0.0
    # keep the edema disk inside the head ellipse (shrunken by r_ed)
    while True:
        ty = rng.uniform(cy - ay + r_ed + 1, cy + ay - r_ed - 1)
        tx = rng.uniform(cx - ax + r_ed + 1, cx + ax - r_ed - 1)
        if ((ty - cy) / (ay - r_ed)) ** 2 + ((tx - cx) / (ax - r_ed)) ** 2 <= 1.0:
            break
    # the core is offset inside the edema, the enhancing disk inside the core
    oy, ox = rng.uniform(-1, 1, 2) * (r_ed - r_core) * 0.5
    ey, ex = rng.uniform(-1, 1, 2) * (r_core - r_enh) * 0.5
    dist_ed = np.hypot(yy - ty, xx - tx)
    dist_core = np.hypot(yy - ty - oy, xx - tx - ox)
    dist_enh = np.hypot(yy - ty - oy - ey, xx - tx - ox - ex)

    label = np.zeros((H, W), dtype=np.int64)
    label[dist_ed <= r_ed] = 2
    label[dist_core <= r_core] = 1
    if r_enh > 0:
        label[dist_enh <= r_enh] = 3

    region = np.where(head, 1, 0)
    region = np.where(label > 0, label + 1, region)  # 2: ncr, 3: edema, 4: enhancing

    contrast = _CONTRAST[: spec.modalities] * (1 + spec.contrast_jitter * rng.uniform(-1, 1, (spec.modalities, 5)))
    image = contrast[:, region]
    if spec.noise_sigma > 0:
        # partial-volume blur, low-frequency bias field and white noise;
        # noise_sigma == 0 switches all three off
        if spec.blur_sigma > 0:
            image = ndimage.gaussian_filter(image, sigma=(0, spec.blur_sigma, spec.blur_sigma), mode="nearest")
        gy, gx = rng.normal(0, 1, 2)
        bias = 1 + spec.noise_sigma * 0.5 * (gy * (yy - cy) / H + gx * (xx - cx) / W)
        image = image * bias + rng.normal(0, spec.noise_sigma, image.shape) * head
    meta = {"edema_radius": r_ed, "core_radius": r_core, "enhancing_radius": r_enh, "center": (ty, tx)}
    return image.astype(np.float32), label, meta


def synthetic_samples(spec: SyntheticSpec):
    """All ``count`` samples as (id, Volume, LabelMask, geometry) tuples, deterministic in ``spec.seed``."""
    roles = MODALITIES[: spec.modalities]
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    out = []
    for i, child in enumerate(children):
        image, label, meta = _render(spec, np.random.default_rng(child))
        out.append((f"s{i:05d}", Volume(image, roles), LabelMask(label), meta))
    return out


def generate_synthetic(spec: SyntheticSpec, return_hidden: bool = False):
    """Split a synthetic corpus into (labeled, unlabeled, val) sets.

    With ``return_hidden`` the withheld masks of the unlabeled split are
    returned as a fourth element (for diagnostics only).
    """
    samples = synthetic_samples(spec)
    order = np.random.default_rng(np.random.SeedSequence([spec.seed, 1])).permutation(spec.count)
    lab = sorted(order[: spec.n_labeled])
    val = sorted(order[spec.n_labeled : spec.n_labeled + spec.n_val])
    unl = sorted(order[spec.n_labeled + spec.n_val :])

    def labeled(idx):
        return LabeledSet([samples[i][1] for i in idx], [samples[i][2] for i in idx], [samples[i][0] for i in idx])

    unlabeled = UnlabeledSet([samples[i][1] for i in unl], [samples[i][0] for i in unl])
    result = (labeled(lab), unlabeled, labeled(val))
    if return_hidden:
        return result + ({samples[i][0]: samples[i][2] for i in unl},)
    return result


# ------------------------------------------------------------------ real volumes


def normalize_nonzero(volume: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Zero-mean / unit-variance over nonzero voxels; zero voxels stay zero.

    A channel whose nonzero voxels have spread below ``floor`` becomes all zero.
    """
    volume = np.asarray(volume, dtype=np.float64)
    mask = volume != 0
    out = np.zeros_like(volume)
    if mask.any():
        vals = volume[mask]
        std = vals.std()
        if std > floor:
            out[mask] = (vals - vals.mean()) / std
    return out.astype(np.float32)


def remap_labels(labels: np.ndarray, mapping: dict = BRATS_LABEL_MAP) -> np.ndarray:
    labels = np.asarray(labels)
    unknown = set(np.unique(labels).tolist()) - set(mapping)
    if unknown:
        raise ValueError(f"label values {sorted(unknown)} are not in the remap table")
    lut = np.zeros(max(mapping) + 1, dtype=np.int64)
    for src, dst in mapping.items():
        lut[src] = dst
    return lut[labels.astype(np.int64)]


def inverse_label_map(mapping: dict = BRATS_LABEL_MAP) -> dict:
    inv = {v: k for k, v in mapping.items()}
    if len(inv) != len(mapping):
        raise ValueError("label map is not a bijection")
    return inv


def _read_array(path: Path) -> np.ndarray:
    name = path.name.lower()
    if name.endswith(".npy"):
        return np.load(path, allow_pickle=False)
    if name.endswith((".nii", ".nii.gz")):
        try:
            import nibabel as nib
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise ImportError("reading NIfTI files needs nibabel (pip install 'progseg[nifti]')") from exc
        return np.asarray(nib.load(str(path)).dataobj)
    raise ValueError(f"unsupported volume file {path}")


@dataclass
class Layout:
    """Maps modality role -> filename pattern (``{case}`` is substituted)."""

    modalities: dict
    label: Optional[str] = None
    slice_axis: int = -1
    label_map: Optional[dict] = None
    drop_empty: bool = False

    @classmethod
    def brats(cls, **kw) -> "Layout":
        mods = {"T1": "{case}_t1.nii.gz", "T1ce": "{case}_t1ce.nii.gz", "T2": "{case}_t2.nii.gz", "FLAIR": "{case}_flair.nii.gz"}
        return cls(modalities=mods, label="{case}_seg.nii.gz", label_map=dict(BRATS_LABEL_MAP), **kw)


def load_volume_stack(path, layout: Layout, roles=MODALITIES):
    """Read one case directory into per-slice Volumes (and LabelMasks if labelled)."""
    path = Path(path)
    case = path.name
    missing = [r for r in roles if r not in layout.modalities or not (path / layout.modalities[r].format(case=case)).exists()]
    if missing:
        raise FileNotFoundError(f"{path}: missing modalities {missing}")
    channels = [_read_array(path / layout.modalities[r].format(case=case)) for r in roles]
    shapes = {c.shape for c in channels}
    if len(shapes) != 1:
        raise ValueError(f"{path}: modality shapes disagree: {sorted(shapes)}")
    stack = np.stack([normalize_nonzero(c) for c in channels])  # roles x ... x D
    stack = np.moveaxis(stack, layout.slice_axis if layout.slice_axis < 0 else layout.slice_axis + 1, 1)

    labels = None
    if layout.label:
        lab_path = path / layout.label.format(case=case)
        if not lab_path.exists():
            raise FileNotFoundError(f"{path}: missing label file {lab_path.name}")
        lab = _read_array(lab_path)
        if lab.shape != channels[0].shape:
            raise ValueError(f"{path}: label shape {lab.shape} != image shape {channels[0].shape}")
        lab = remap_labels(lab, layout.label_map) if layout.label_map else lab.astype(np.int64)
        labels = np.moveaxis(lab, layout.slice_axis, 0)

    volumes, masks = [], []
    for z in range(stack.shape[1]):
        if layout.drop_empty and labels is not None and not labels[z].any():
            continue
        volumes.append(Volume(stack[:, z], tuple(roles)))
        if labels is not None:
            masks.append(LabelMask(labels[z]))
    return volumes, (masks if labels is not None else None)


# ------------------------------------------------------------------ persistence


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def save_corpus(root, labeled: LabeledSet, unlabeled: UnlabeledSet, val: LabeledSet, spec=None) -> dict:
    root = Path(root)
    manifest = {"spec": asdict(spec) if spec is not None else None, "splits": {}}
    for split, data in (("labeled", labeled), ("unlabeled", unlabeled), ("val", val)):
        (root / split).mkdir(parents=True, exist_ok=True)
        entries = []
        masks = getattr(data, "masks", None)
        for i, (sid, vol) in enumerate(zip(data.ids, data.volumes)):
            np.save(root / split / f"{sid}_image.npy", vol.data)
            entry = {"id": sid, "roles": list(vol.channel_roles), "image": _sha(vol.data)}
            if masks is not None:
                np.save(root / split / f"{sid}_label.npy", masks[i].classes)
                entry["label"] = _sha(masks[i].classes)
            entries.append(entry)
        manifest["splits"][split] = entries
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_corpus(root, verify: bool = True):
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    out = []
    for split in ("labeled", "unlabeled", "val"):
        vols, masks, ids = [], [], []
        for entry in manifest["splits"][split]:
            image = np.load(root / split / f"{entry['id']}_image.npy")
            if verify and _sha(image) != entry["image"]:
                raise ValueError(f"{split}/{entry['id']}: image digest mismatch")
            vols.append(Volume(image, tuple(entry["roles"])))
            ids.append(entry["id"])
            if "label" in entry:
                lab = np.load(root / split / f"{entry['id']}_label.npy")
                if verify and _sha(lab) != entry["label"]:
                    raise ValueError(f"{split}/{entry['id']}: label digest mismatch")
                masks.append(LabelMask(lab))
        out.append(UnlabeledSet(vols, ids) if split == "unlabeled" else LabeledSet(vols, masks, ids))
    return tuple(out)
