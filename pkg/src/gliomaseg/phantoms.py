"""Synthetic multi-contrast tumor phantoms with ground truth and clinical data.

Each phantom is an ellipsoidal "brain" holding a layered tumor: necrotic core
(class 1) inside an enhancing shell (class 3) inside edema (class 2). Every
class has its own intensity profile across the four contrasts; noise and a
smooth multiplicative bias field are added. Survival days are an exact linear
function of the nine regression features, so a perfect fit is attainable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .radiomics_survival import FEATURE_NAMES, encode_clinical, extract_features
from .volume_io import CONTRASTS, contrast_path, decode_labels, save_volume, seg_path

DEFAULT_SHAPE = (48, 48, 48)

# rows: air, brain, necrosis (1), edema (2), enhancing (3); columns follow CONTRASTS
_PROFILES = np.array([
    [10.0, 10.0, 10.0, 10.0],
    [400.0, 420.0, 300.0, 350.0],
    [180.0, 230.0, 720.0, 380.0],
    [340.0, 370.0, 600.0, 760.0],
    [380.0, 880.0, 520.0, 600.0],
])
NOISE_SIGMA = 25.0

# survival = intercept + SURVIVAL_WEIGHTS . features
SURVIVAL_INTERCEPT = 1400.0
SURVIVAL_WEIGHTS = np.array([-0.06, 0.15, -0.02, 0.05, -0.08, 0.1, -9.0, 150.0, 60.0])


@dataclass
class Phantom:
    subject_id: str
    contrasts: dict[str, np.ndarray]  # raw intensities
    labels: np.ndarray  # class indices 0..3
    age: float
    resection_status: str
    survival_days: float

    def fused(self) -> np.ndarray:
        """Min-max normalized (D, H, W, 4) image."""
        chans = []
        for c in CONTRASTS:
            v = self.contrasts[c].astype(np.float64)
            chans.append((v - v.min()) / (v.max() - v.min()))
        return np.stack(chans, axis=-1).astype(np.float32)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, d) for d in shape)]
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def _lumpy_ball(rng, shape, center, radius, roughness=0.2) -> np.ndarray:
    # a sphere whose radius is modulated by smooth noise
    grids = np.ogrid[tuple(slice(0, d) for d in shape)]
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=4.0)
    field /= np.abs(field).max() + 1e-12
    return dist <= radius * (1.0 + roughness * field)


def survival_from_features(features9: np.ndarray) -> float:
    return float(SURVIVAL_INTERCEPT + SURVIVAL_WEIGHTS @ np.asarray(features9, dtype=np.float64))


def make_phantom(rng: np.random.Generator, subject_id: str, shape=DEFAULT_SHAPE) -> Phantom:
    shape = tuple(int(s) for s in shape)
    if min(shape) < 24:
        raise ValueError(f"phantom shape {shape} is too small; need >= 24 per axis")
    mid = np.array(shape) / 2.0
    brain_radii = np.array(shape) * rng.uniform(0.40, 0.46, size=3)
    brain = _ellipsoid(shape, mid, brain_radii)

    scale = min(shape) / 48.0
    r_edema = rng.uniform(7.0, 10.0) * scale
    offset = rng.uniform(-1, 1, size=3) * (brain_radii - r_edema - 2).clip(min=0) * 0.5
    center = mid + offset
    edema = _lumpy_ball(rng, shape, center, r_edema) & brain
    enh = _lumpy_ball(rng, shape, center, r_edema * rng.uniform(0.55, 0.7), 0.15) & edema
    core = _lumpy_ball(rng, shape, center, r_edema * rng.uniform(0.25, 0.38), 0.1) & enh

    labels = np.zeros(shape, dtype=np.uint8)
    labels[edema] = 2
    labels[enh] = 3
    labels[core] = 1

    tissue = np.where(brain, 1, 0)
    tissue[labels == 1] = 2
    tissue[labels == 2] = 3
    tissue[labels == 3] = 4

    bias = np.exp(0.15 * ndimage.gaussian_filter(rng.standard_normal(shape), sigma=10.0) /
                  (np.abs(ndimage.gaussian_filter(rng.standard_normal(shape), sigma=10.0)).max() + 1e-12))
    contrasts = {}
    for ci, c in enumerate(CONTRASTS):
        gain = rng.uniform(0.8, 1.25)
        base = _PROFILES[tissue, ci] * gain
        noisy = base * bias + rng.normal(0.0, NOISE_SIGMA, size=shape)
        contrasts[c] = np.abs(noisy).astype(np.float32)

    age = float(np.round(rng.uniform(25.0, 80.0), 1))
    status = str(rng.choice(["GTR", "STR", "NA"]))
    features = np.concatenate([extract_features(labels), encode_clinical(age, status)])
    return Phantom(subject_id, contrasts, labels, age, status, survival_from_features(features))


def generate_phantoms(n: int, seed: int, out_dir=None, shape=DEFAULT_SHAPE) -> list[Phantom]:
    """Create ``n`` phantoms; when ``out_dir`` is given, write the on-disk dataset layout."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    phantoms = [make_phantom(rng, f"phantom_{i:03d}", shape) for i in range(n)]
    if out_dir is not None:
        write_dataset(phantoms, out_dir)
    return phantoms


def write_dataset(phantoms: list[Phantom], out_dir) -> None:
    out_dir = Path(out_dir)
    for p in phantoms:
        sdir = out_dir / p.subject_id
        for c in CONTRASTS:
            save_volume(p.contrasts[c], contrast_path(sdir, p.subject_id, c))
        save_volume(decode_labels(p.labels), seg_path(sdir, p.subject_id))
    with open(out_dir / "clinical.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "age", "resection_status", "survival_days"])
        for p in phantoms:
            w.writerow([p.subject_id, p.age, p.resection_status, repr(p.survival_days)])


__all__ = ["Phantom", "make_phantom", "generate_phantoms", "write_dataset",
           "survival_from_features", "FEATURE_NAMES"]
