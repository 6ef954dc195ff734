"""Dice, 95th-percentile Hausdorff distance, sensitivity and specificity.

Regions follow the BraTS composites on internal class indices:
whole tumor {1, 2, 3}, tumor core {1, 3}, enhancing tumor {3}.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

REGIONS = {"ET": (3,), "WT": (1, 2, 3), "TC": (1, 3)}
# 6-connected structuring element
_CROSS = ndimage.generate_binary_structure(3, 1)


class EmptyMaskError(ValueError):
    pass


def region_masks(labels: np.ndarray) -> dict[str, np.ndarray]:
    return {name: np.isin(labels, classes) for name, classes in REGIONS.items()}


def _check(a, b):
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    _check(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels removed by one 6-connected erosion; outside the grid counts as empty."""
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def _directed(src_surface: np.ndarray, dst_surface: np.ndarray) -> np.ndarray:
    # distance from every voxel to the nearest destination surface voxel
    dist = ndimage.distance_transform_edt(~dst_surface)
    return dist[src_surface]


def hausdorff95(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    _check(a, b)
    if not a.any() or not b.any():
        raise EmptyMaskError("hausdorff95 is undefined for an empty mask")
    sa, sb = surface(a), surface(b)
    d_ab = np.percentile(_directed(sa, sb), 95)
    d_ba = np.percentile(_directed(sb, sa), 95)
    return float(max(d_ab, d_ba))


def sensitivity_specificity(pred: np.ndarray, truth: np.ndarray) -> tuple[float | None, float | None]:
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    _check(pred, truth)
    tp = int(np.sum(pred & truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    fp = int(np.sum(pred & ~truth))
    sens = tp / (tp + fn) if tp + fn else None
    spec = tn / (tn + fp) if tn + fp else None
    return sens, spec


def evaluate_subject(pred_labels: np.ndarray, true_labels: np.ndarray) -> dict[str, float | None]:
    """All metrics for all regions, keyed like ``Dice_ET`` or ``HD95_WT``."""
    out: dict[str, float | None] = {}
    pm, tm = region_masks(pred_labels), region_masks(true_labels)
    for r in REGIONS:
        out[f"Dice_{r}"] = dice(pm[r], tm[r])
        try:
            out[f"HD95_{r}"] = hausdorff95(pm[r], tm[r])
        except EmptyMaskError:
            out[f"HD95_{r}"] = None
        sens, spec = sensitivity_specificity(pm[r], tm[r])
        out[f"Sensitivity_{r}"] = sens
        out[f"Specificity_{r}"] = spec
    return out


def summarize(rows: Sequence[Mapping[str, float | None]]) -> dict[str, dict[str, float]]:
    """Mean, median and count per metric; absent values are excluded."""
    keys = list(rows[0]) if rows else []
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows if r.get(k) is not None], dtype=np.float64)
        out[k] = {
            "mean": float(vals.mean()) if vals.size else float("nan"),
            "median": float(np.median(vals)) if vals.size else float("nan"),
            "n": int(vals.size),
        }
    return out
