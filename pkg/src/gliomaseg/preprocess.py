"""Intensity normalization, contrast fusion and the external correction stage."""
from __future__ import annotations

import shlex
import shutil
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume_io import CONTRASTS, ScalarVolume, VolumeError


class ExternalStageError(RuntimeError):
    pass


@dataclass
class PreprocessConfig:
    """Command template for bias correction / denoising.

    The template is split with shell rules and must reference ``{in}`` and
    ``{out}``, e.g. ``"N4BiasFieldCorrection -i {in} -o {out}"``.
    """

    external_stage_command: str | None = None
    skip_external: bool = True

    def __post_init__(self):
        if not self.skip_external and not (self.external_stage_command or "").strip():
            raise ValueError("external_stage_command is required unless skip_external is set")


def minmax_normalize(v: ScalarVolume) -> ScalarVolume:
    data = np.asarray(v.data, dtype=np.float64)
    lo, hi = data.min(), data.max()
    if not hi > lo:
        raise VolumeError("degenerate intensity range")
    out = (data - lo) / (hi - lo)
    return ScalarVolume(out.astype(np.float32), v.contrast_tag)


def fuse_contrasts(t1: ScalarVolume, t1gd: ScalarVolume, t2: ScalarVolume,
                   flair: ScalarVolume) -> np.ndarray:
    """Stack four normalized contrasts into a (D, H, W, 4) array, order T1, T1Gd, T2, FLAIR."""
    vols = (t1, t1gd, t2, flair)
    shapes = {v.data.shape for v in vols}
    if len(shapes) != 1:
        raise VolumeError(f"contrast shapes differ: {sorted(shapes)}")
    for tag, v in zip(CONTRASTS, vols):
        if v.data.min() < 0 or v.data.max() > 1:
            raise VolumeError(f"{tag} volume is not normalized to [0, 1]")
    return np.stack([np.asarray(v.data, dtype=np.float32) for v in vols], axis=-1)


def run_external_stage(config: PreprocessConfig, in_path, out_path) -> None:
    in_path, out_path = Path(in_path), Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if config.skip_external:
        shutil.copyfile(in_path, out_path)
        return
    args = [a.replace("{in}", str(in_path)).replace("{out}", str(out_path))
            for a in shlex.split(config.external_stage_command)]
    try:
        proc = subprocess.run(args, capture_output=True, text=True)
    except OSError as exc:
        raise ExternalStageError(f"could not start external stage {args[0]!r}: {exc}") from exc
    if proc.returncode != 0:
        raise ExternalStageError(
            f"external stage exited with status {proc.returncode}\n"
            f"command: {' '.join(args)}\nstdout:\n{proc.stdout}\nstderr:\n{proc.stderr}")
    if not out_path.is_file():
        raise ExternalStageError(f"external stage did not produce {out_path}")
