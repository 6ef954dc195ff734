"""Volume and surface features per tumor class, and the linear survival model.

Features per subject are ``[V1, S1, V2, S2, V3, S3, age, gtr, str]`` where V
is a voxel count and S sums the gradient magnitude of the class indicator
over the class's own voxels (central differences, edges replicated).
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats as sstats

FOREGROUND_CLASSES = (1, 2, 3)
RESECTION_CODES = {"GTR": (1.0, 0.0), "STR": (0.0, 1.0), "NA": (0.0, 0.0)}
FEATURE_NAMES = ("V1", "S1", "V2", "S2", "V3", "S3", "age", "resection_gtr", "resection_str")
NUM_FEATURES = len(FEATURE_NAMES)
DEFAULT_BUCKETS = (300.0, 450.0)


@dataclass
class RadiomicRecord:
    volumes: tuple[float, float, float]
    surfaces: tuple[float, float, float]
    age: float
    resection: tuple[float, float]
    survival_days: float | None = None
    subject_id: str = ""

    def __post_init__(self):
        if min(self.volumes) < 0 or min(self.surfaces) < 0:
            raise ValueError("volumes and surfaces must be non-negative")
        if tuple(self.resection) not in RESECTION_CODES.values():
            raise ValueError(f"invalid resection encoding {self.resection}")

    @classmethod
    def from_features(cls, image_features, age, status, survival_days=None, subject_id=""):
        f = [float(v) for v in image_features]
        clin = encode_clinical(age, status)
        return cls(tuple(f[0::2]), tuple(f[1::2]), clin[0], tuple(clin[1:]), survival_days, subject_id)

    def feature_vector(self) -> np.ndarray:
        image = [v for pair in zip(self.volumes, self.surfaces) for v in pair]
        return np.array(image + [self.age, *self.resection], dtype=np.float64)


def _check_class(cls: int) -> None:
    if cls not in FOREGROUND_CLASSES:
        raise ValueError(f"foreground class must be one of {FOREGROUND_CLASSES}, got {cls}")


def roi_volume(labels: np.ndarray, cls: int) -> float:
    _check_class(cls)
    return float(np.count_nonzero(labels == cls))


def gradient_magnitude(mask: np.ndarray) -> np.ndarray:
    """Central-difference gradient magnitude of a 0/1 field with replicated edges."""
    s = np.pad(mask.astype(np.float64), 1, mode="edge")
    core = (slice(1, -1),) * 3
    sq = np.zeros(mask.shape, dtype=np.float64)
    for ax in range(3):
        fwd = list(core)
        bwd = list(core)
        fwd[ax] = slice(2, None)
        bwd[ax] = slice(None, -2)
        g = (s[tuple(fwd)] - s[tuple(bwd)]) / 2.0
        sq += g * g
    return np.sqrt(sq)


def roi_surface_area(labels: np.ndarray, cls: int) -> float:
    _check_class(cls)
    mask = labels == cls
    if not mask.any():
        return 0.0
    # fsum: correctly rounded, independent of summation order
    return math.fsum(gradient_magnitude(mask)[mask].tolist())


def extract_features(labels: np.ndarray) -> np.ndarray:
    out = []
    for c in FOREGROUND_CLASSES:
        out += [roi_volume(labels, c), roi_surface_area(labels, c)]
    return np.array(out)


def encode_clinical(age: float, status: str) -> np.ndarray:
    if not age > 0:
        raise ValueError(f"age must be positive, got {age}")
    key = (status or "NA").strip().upper()
    if key in ("", "N/A", "NAN"):
        key = "NA"
    if key not in RESECTION_CODES:
        raise ValueError(f"unknown resection status {status!r}; expected GTR, STR or NA")
    return np.array([float(age), *RESECTION_CODES[key]])


@dataclass
class SurvivalModel:
    feature_means: np.ndarray
    feature_stds: np.ndarray
    coefficients: np.ndarray
    intercept: float
    train_r2: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "features": list(FEATURE_NAMES),
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "coefficients": self.coefficients.tolist(),
            "intercept": self.intercept,
            "train_r2": self.train_r2,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "SurvivalModel":
        d = json.loads(Path(path).read_text())
        return cls(np.array(d["feature_means"]), np.array(d["feature_stds"]),
                   np.array(d["coefficients"]), float(d["intercept"]), float(d["train_r2"]))


def _design(records: Sequence[RadiomicRecord]) -> np.ndarray:
    return np.stack([r.feature_vector() for r in records])


def fit_survival(records: Sequence[RadiomicRecord]) -> SurvivalModel:
    """Ordinary least squares on z-scored features plus an intercept."""
    if len(records) < NUM_FEATURES + 1:
        raise ValueError(f"need at least {NUM_FEATURES + 1} records, got {len(records)}")
    if any(r.survival_days is None for r in records):
        raise ValueError("every training record needs survival_days")
    x = _design(records)
    y = np.array([r.survival_days for r in records], dtype=np.float64)
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    const = stds <= 1e-12 * np.maximum(1.0, np.abs(means))
    if const.any():
        names = [FEATURE_NAMES[i] for i in np.flatnonzero(const)]
        warnings.warn(f"constant feature(s) {names}: std set to 1, coefficient 0", stacklevel=2)
        stds = np.where(const, 1.0, stds)
    z = (x - means) / stds
    z[:, const] = 0.0
    design = np.column_stack([np.ones(len(y)), z])
    beta, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
    if rank < design.shape[1] - int(const.sum()):
        warnings.warn("rank-deficient design; using the minimum-norm solution", stacklevel=2)
    coef = beta[1:].copy()
    coef[const] = 0.0
    model = SurvivalModel(means, stds, coef, float(beta[0]))
    pred = predict_many(model, records)
    model.train_r2 = r2_score(y, pred)
    return model


def predict_survival(m: SurvivalModel, record: RadiomicRecord) -> float:
    z = (record.feature_vector() - m.feature_means) / m.feature_stds
    return float(m.intercept + z @ m.coefficients)


def predict_many(m: SurvivalModel, records: Sequence[RadiomicRecord]) -> np.ndarray:
    return np.array([predict_survival(m, r) for r in records])


def r2_score(truth, pred) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    ss_res = np.sum((truth - pred) ** 2)
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return float(1.0 - ss_res / ss_tot)


def survival_bucket(days, bounds=DEFAULT_BUCKETS) -> np.ndarray:
    """0 = short (< low), 1 = mid (low..high inclusive), 2 = long (> high)."""
    days = np.asarray(days, dtype=np.float64)
    low, high = bounds
    return np.where(days < low, 0, np.where(days > high, 2, 1))


def survival_metrics(pred, truth, bucket_bounds=DEFAULT_BUCKETS) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size < 2:
        raise ValueError("need at least two cases")
    se = (pred - truth) ** 2
    if np.ptp(pred) == 0 or np.ptp(truth) == 0:
        rho = float("nan")
    else:
        rho = float(sstats.spearmanr(pred, truth).statistic)
    return {
        "accuracy": float(np.mean(survival_bucket(pred, bucket_bounds) == survival_bucket(truth, bucket_bounds))),
        "mse": float(se.mean()),
        "median_se": float(np.median(se)),
        "std_se": float(se.std()),
        "spearman": rho,
        "r2": r2_score(truth, pred),
    }


def read_clinical_table(path) -> dict[str, dict]:
    """``subject_id, age, resection_status, survival_days`` rows keyed by subject id."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "age", "resection_status"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"clinical table {path} lacks columns {sorted(missing)}")
        for row in reader:
            days = (row.get("survival_days") or "").strip()
            out[row["subject_id"]] = {
                "age": float(row["age"]),
                "resection_status": (row["resection_status"] or "NA").strip() or "NA",
                "survival_days": float(days) if days else None,
            }
    return out


def write_feature_table(path, rows: dict[str, np.ndarray]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", *FEATURE_NAMES[:6]])
        for sid in sorted(rows):
            w.writerow([sid, *(repr(float(v)) for v in rows[sid])])


def read_feature_table(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        return {row["subject_id"]: np.array([float(row[n]) for n in FEATURE_NAMES[:6]])
                for row in csv.DictReader(fh)}


def build_records(features: dict[str, np.ndarray], clinical: dict[str, dict],
                  require_target: bool = False) -> list[RadiomicRecord]:
    records = []
    for sid in sorted(features):
        if sid not in clinical:
            continue
        c = clinical[sid]
        if require_target and c["survival_days"] is None:
            continue
        records.append(RadiomicRecord.from_features(features[sid], c["age"], c["resection_status"],
                                                    c["survival_days"], sid))
    return records


def write_predictions(path, ids: Sequence[str], days: Sequence[float]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "predicted_days"])
        for sid, d in zip(ids, days):
            w.writerow([sid, repr(float(d))])


def read_predictions(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        return {row["subject_id"]: float(row["predicted_days"]) for row in csv.DictReader(fh)}
