"""NIfTI input/output for contrast volumes, label maps and probability maps.

Arrays are kept in the order they are stored on disk. The left-right axis of
a spatial grid is its last axis (``LR_AXIS``), matching the 155x240x240 layout
in which the four contrasts are fused.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import nibabel as nib
import numpy as np

CONTRASTS = ("T1", "T1Gd", "T2", "FLAIR")
# file suffixes used by the BraTS distribution
CONTRAST_SUFFIX = {"T1": "t1", "T1Gd": "t1ce", "T2": "t2", "FLAIR": "flair"}
SEG_SUFFIX = "seg"

NUM_CLASSES = 4
LR_AXIS = 2
DISK_CODES = (0, 1, 2, 4)
PROB_ATOL = 1e-5


class VolumeError(ValueError):
    """Raised when a volume, label map or probability map violates its contract."""


@dataclass
class ScalarVolume:
    data: np.ndarray
    contrast_tag: str = "T1"

    def __post_init__(self):
        if self.contrast_tag not in CONTRASTS:
            raise VolumeError(f"unknown contrast tag {self.contrast_tag!r}")
        if self.data.ndim != 3:
            raise VolumeError(f"expected 3D volume, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise VolumeError("non-finite intensities")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def _read(path: str | os.PathLike) -> nib.Nifti1Image:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such volume: {path}")
    return nib.load(str(path))


def _raw_array(img) -> np.ndarray:
    # dataobj keeps the stored dtype when no scaling is set
    return np.asanyarray(img.dataobj)


def load_scalar_volume(path, contrast_tag: str = "T1") -> ScalarVolume:
    img = _read(path)
    data = np.asarray(_raw_array(img), dtype=np.float32)
    if data.ndim != 3:
        raise VolumeError(f"expected 3D volume in {path}, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise VolumeError(f"non-finite intensities in {path}")
    return ScalarVolume(data, contrast_tag)


def save_volume(data: np.ndarray, path, affine: np.ndarray | None = None) -> None:
    """Write any array as a NIfTI image with an identity affine by default."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(np.asarray(data), np.eye(4) if affine is None else affine)
    nib.save(img, str(path))


def load_array(path) -> np.ndarray:
    return np.asarray(_raw_array(_read(path)))


def encode_labels(raw: np.ndarray) -> np.ndarray:
    """Map on-disk codes {0,1,2,4} to class indices {0,1,2,3}."""
    raw = np.asarray(raw)
    if raw.ndim != 3:
        raise VolumeError(f"expected 3D label map, got shape {raw.shape}")
    values = np.unique(raw)
    bad = [v for v in values.tolist() if v not in DISK_CODES]
    if bad:
        raise VolumeError(f"invalid label codes {bad}; expected a subset of {list(DISK_CODES)}")
    out = raw.astype(np.uint8)
    out[raw == 4] = 3
    return out


def decode_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    validate_labels(labels)
    out = labels.astype(np.uint8)
    out[labels == 3] = 4
    return out


def validate_labels(labels: np.ndarray, shape: tuple | None = None) -> None:
    if labels.ndim != 3:
        raise VolumeError(f"expected 3D label map, got shape {labels.shape}")
    if shape is not None and tuple(labels.shape) != tuple(shape):
        raise VolumeError(f"label shape {labels.shape} does not match volume shape {tuple(shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise VolumeError(f"label values outside 0..{NUM_CLASSES - 1}")


def load_label_map(path) -> np.ndarray:
    return encode_labels(np.rint(load_array(path)).astype(np.int64))


def save_label_map(labels: np.ndarray, path) -> None:
    save_volume(decode_labels(labels), path)


def validate_probability_map(pm: np.ndarray) -> None:
    if pm.ndim != 4 or pm.shape[-1] != NUM_CLASSES:
        raise VolumeError(f"expected (D, H, W, {NUM_CLASSES}) probability map, got {pm.shape}")
    if not np.all(np.isfinite(pm)):
        raise VolumeError("non-finite probabilities")
    if pm.min() < 0:
        raise VolumeError("negative probabilities")
    sums = pm.sum(axis=-1, dtype=np.float64)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > PROB_ATOL:
        raise VolumeError(f"probability rows do not sum to 1 (max deviation {worst:.3g})")


def save_probability_map(pm: np.ndarray, path) -> None:
    pm = np.asarray(pm, dtype=np.float32)
    validate_probability_map(pm)
    save_volume(pm, path)


def load_probability_map(path) -> np.ndarray:
    pm = np.asarray(load_array(path), dtype=np.float32)
    validate_probability_map(pm)
    return pm


def contrast_path(subject_dir, subject_id: str, contrast: str) -> Path:
    return Path(subject_dir) / f"{subject_id}_{CONTRAST_SUFFIX[contrast]}.nii.gz"


def seg_path(subject_dir, subject_id: str) -> Path:
    return Path(subject_dir) / f"{subject_id}_{SEG_SUFFIX}.nii.gz"


def fused_path(subject_dir, subject_id: str) -> Path:
    return Path(subject_dir) / f"{subject_id}_fused.nii.gz"


def list_subjects(root) -> list[str]:
    """Subject ids under ``root``: directories holding a ``<id>_*.nii.gz`` file."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"no such data directory: {root}")
    ids = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        if any(d.glob(f"{d.name}_*.nii.gz")):
            ids.append(d.name)
    return ids
