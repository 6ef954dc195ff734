"""Full-volume prediction with half-window-stride sliding windows and flip averaging."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .patch_sampler import ChannelStats
from .unet3d import UNet3D, forward_logits
from .volume_io import LR_AXIS

# (N, N, N, C) window -> (N, N, N, K) class probabilities
Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class SlidingPlan:
    shape: tuple[int, int, int]
    window: int
    stride: int
    axis_origins: tuple[tuple[int, ...], ...]

    @property
    def window_origins(self) -> list[tuple[int, int, int]]:
        return list(itertools.product(*self.axis_origins))


def _axis_origins(dim: int, window: int, stride: int) -> tuple[int, ...]:
    origins = list(range(0, dim - window + 1, stride))
    if origins[-1] != dim - window:
        origins.append(dim - window)
    return tuple(origins)


def plan_windows(volume_shape, window: int) -> SlidingPlan:
    shape = tuple(int(d) for d in volume_shape[:3])
    if window < 2 or window % 2:
        raise ValueError(f"window must be an even size >= 2, got {window}")
    if any(window > d for d in shape):
        raise ValueError(f"window {window} exceeds volume shape {shape}")
    stride = window // 2
    return SlidingPlan(shape, window, stride, tuple(_axis_origins(d, window, stride) for d in shape))


def coverage_count(plan: SlidingPlan, flip_tta: bool = True) -> np.ndarray:
    count = np.zeros(plan.shape, dtype=np.int32)
    n = plan.window
    for i, j, k in plan.window_origins:
        count[i:i + n, j:j + n, k:k + n] += 1
    return count * 2 if flip_tta else count


def model_predictor(model: UNet3D) -> Predictor:
    """Wrap a network as a window predictor returning softmax probabilities."""
    model.eval()

    def predict(window: np.ndarray) -> np.ndarray:
        logits = torch.from_numpy(forward_logits(model, window.astype(np.float32)))
        return torch.softmax(logits.double(), dim=-1).numpy()

    return predict


def predict_volume(model: UNet3D | Predictor, volume: np.ndarray, stats: ChannelStats | None,
                   window: int, flip_tta: bool = True) -> np.ndarray:
    """Average class probabilities over every covering window and, optionally, its mirror.

    ``volume`` is (D, H, W, C). When ``stats`` is given each window is
    standardized per channel before prediction. Returns (D, H, W, K) float32.
    """
    predict = model_predictor(model) if isinstance(model, UNet3D) else model
    if volume.ndim != 4:
        raise ValueError(f"expected (D, H, W, C) volume, got {volume.shape}")
    if isinstance(model, UNet3D) and window != model.config.patch_size:
        raise ValueError(f"window {window} differs from the training patch size {model.config.patch_size}")
    x = volume.astype(np.float64)
    if stats is not None:
        x = (x - stats.mean) / stats.std
    plan = plan_windows(volume.shape, window)
    n = plan.window
    total = None
    for i, j, k in plan.window_origins:
        sl = (slice(i, i + n), slice(j, j + n), slice(k, k + n))
        patch = x[sl]
        outs = [predict(patch)]
        if flip_tta:
            mirrored = predict(np.flip(patch, axis=LR_AXIS).copy())
            outs.append(np.flip(mirrored, axis=LR_AXIS))
        for p in outs:
            p = np.asarray(p, dtype=np.float64)
            if not np.all(np.isfinite(p)):
                raise ValueError(f"non-finite model output in window at {(i, j, k)}")
            if total is None:
                total = np.zeros(plan.shape + (p.shape[-1],), dtype=np.float64)
            total[sl] += p
    count = coverage_count(plan, flip_tta)
    return (total / count[..., None]).astype(np.float32)
