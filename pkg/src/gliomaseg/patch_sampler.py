"""Non-uniform patch extraction and per-channel standardization statistics.

Patch centers are drawn with probability proportional to an integer weight:
6 where the center voxel is tumor, 1 where the voxel's brightest channel is
strictly below the volume's 1st percentile of that max-over-channels image,
and 3 elsewhere. Only centers whose N^3 patch lies inside the volume are
eligible.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume_io import LR_AXIS

WEIGHT_LOW = 1
WEIGHT_REST = 3
WEIGHT_FOREGROUND = 6
LOW_PERCENTILE = 1.0
DEFAULT_STAT_DRAWS = 400


@dataclass
class SamplingWeights:
    weights: np.ndarray  # over valid centers only
    lo: tuple[int, int, int]  # first valid center per axis
    hi: tuple[int, int, int]  # last valid center per axis, inclusive
    patch_size: int
    _cumsum: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def cumsum(self) -> np.ndarray:
        if self._cumsum is None:
            self._cumsum = np.cumsum(self.weights.ravel().astype(np.int64))
        return self._cumsum

    def probabilities(self) -> np.ndarray:
        w = self.weights.astype(np.float64)
        return w / w.sum()


@dataclass
class PatchSample:
    image: np.ndarray  # (N, N, N, C)
    labels: np.ndarray  # (N, N, N)
    center: tuple[int, int, int]
    flipped: bool = False


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError(f"channel std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ChannelStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Subject:
    """One training subject: fused image (D, H, W, C) plus class-index labels."""

    subject_id: str
    image: np.ndarray
    labels: np.ndarray
    _weights: dict = field(default_factory=dict, repr=False, compare=False)

    def weights(self, patch_size: int) -> SamplingWeights:
        if patch_size not in self._weights:
            self._weights[patch_size] = compute_sampling_weights(self.image, self.labels, patch_size)
        return self._weights[patch_size]


def valid_center_range(shape: Sequence[int], patch_size: int) -> tuple[tuple, tuple]:
    half = patch_size // 2
    if any(patch_size > d for d in shape):
        raise ValueError(f"patch size {patch_size} exceeds volume shape {tuple(shape)}")
    lo = tuple(half for _ in shape)
    hi = tuple(d - patch_size + half for d in shape)
    return lo, hi


def compute_sampling_weights(volume: np.ndarray, labels: np.ndarray, patch_size: int) -> SamplingWeights:
    spatial = volume.shape[:3]
    if labels.shape != spatial:
        raise ValueError(f"labels {labels.shape} do not match volume {spatial}")
    lo, hi = valid_center_range(spatial, patch_size)

    brightest = volume.max(axis=-1) if volume.ndim == 4 else volume
    threshold = np.percentile(brightest, LOW_PERCENTILE)
    w = np.full(spatial, WEIGHT_REST, dtype=np.int8)
    w[brightest < threshold] = WEIGHT_LOW
    w[labels > 0] = WEIGHT_FOREGROUND

    crop = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    return SamplingWeights(np.ascontiguousarray(w[crop]), lo, hi, patch_size)


def draw_centers(rng: np.random.Generator, w: SamplingWeights, size: int) -> np.ndarray:
    """Draw ``size`` centers, each with probability w/sum(w). Returns (size, 3) ints."""
    cum = w.cumsum
    total = int(cum[-1])
    if total <= 0:
        raise RuntimeError("sampling weights sum to zero")
    u = rng.integers(0, total, size=size)
    flat = np.searchsorted(cum, u, side="right")
    idx = np.stack(np.unravel_index(flat, w.weights.shape), axis=1)
    return idx + np.asarray(w.lo)


def extract_patch(volume: np.ndarray, labels: np.ndarray, center, patch_size: int) -> PatchSample:
    start = [c - patch_size // 2 for c in center]
    sl = tuple(slice(s, s + patch_size) for s in start)
    if any(s < 0 or s + patch_size > d for s, d in zip(start, volume.shape[:3])):
        raise ValueError(f"patch at center {tuple(center)} leaves the volume")
    return PatchSample(volume[sl].copy(), labels[sl].copy(), tuple(int(c) for c in center))


def lr_flip(p: PatchSample) -> PatchSample:
    return replace(p,
                   image=np.flip(p.image, axis=LR_AXIS).copy(),
                   labels=np.flip(p.labels, axis=LR_AXIS).copy(),
                   flipped=not p.flipped)


def sample_patch(rng: np.random.Generator, w: SamplingWeights, volume: np.ndarray,
                 labels: np.ndarray, patch_size: int, flip: bool = True) -> PatchSample:
    center = draw_centers(rng, w, 1)[0]
    patch = extract_patch(volume, labels, center, patch_size)
    if flip and rng.random() < 0.5:
        patch = lr_flip(patch)
    return patch


def estimate_channel_stats(subjects: Sequence[Subject], patch_size: int,
                           rng: np.random.Generator, draws: int = DEFAULT_STAT_DRAWS) -> ChannelStats:
    """Per-channel mean/std over every voxel of ``draws`` sampled patches.

    Each draw picks a subject uniformly at random. Moments are merged across
    patches pairwise, so no more than one patch is held at a time.
    """
    if not subjects:
        raise ValueError("need at least one subject")
    n = 0
    mean = None
    m2 = None
    for _ in range(draws):
        s = subjects[int(rng.integers(len(subjects)))]
        p = sample_patch(rng, s.weights(patch_size), s.image, s.labels, patch_size)
        x = p.image.reshape(-1, p.image.shape[-1]).astype(np.float64)
        nb = x.shape[0]
        mb = x.mean(axis=0)
        m2b = ((x - mb) ** 2).sum(axis=0)
        if mean is None:
            n, mean, m2 = nb, mb, m2b
            continue
        delta = mb - mean
        tot = n + nb
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta ** 2 * n * nb / tot
        n = tot
    std = np.sqrt(m2 / n)
    if np.any(std < 1e-12):
        raise ValueError(f"zero standard deviation in channel(s) {np.flatnonzero(std < 1e-12).tolist()}")
    return ChannelStats(mean, std)


def standardize(p: PatchSample, s: ChannelStats) -> PatchSample:
    img = ((p.image - s.mean) / s.std).astype(np.float32)
    return replace(p, image=img)
