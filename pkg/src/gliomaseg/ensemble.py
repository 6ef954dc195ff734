"""Probability averaging across models and label selection."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .volume_io import load_probability_map


def average_probabilities(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Voxelwise mean of float32 probability maps.

    Values are sorted across models before summation, so the result does not
    depend on the order of ``maps``. Sums run in float64, which is exact for
    repeated float32 inputs, so averaging identical maps returns the map.
    """
    if len(maps) == 0:
        raise ValueError("no probability maps to average")
    shapes = {np.shape(m) for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"probability map shapes differ: {sorted(shapes)}")
    stack = np.stack([np.asarray(m, dtype=np.float32) for m in maps]).astype(np.float64)
    stack.sort(axis=0)
    return (stack.sum(axis=0) / len(maps)).astype(np.float32)


def average_probability_files(paths) -> np.ndarray:
    return average_probabilities([load_probability_map(p) for p in paths])


def argmax_labels(pm: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(pm, axis=-1).astype(np.uint8)
