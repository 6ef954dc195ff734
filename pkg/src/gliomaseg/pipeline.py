"""Stage graph: preprocess -> sample-stats -> train -> predict -> ensemble ->
features -> survival-fit -> survival-predict -> evaluate.

Every stage reads its inputs from and writes its artifacts under
``output_root`` (preprocess reads ``data_root``). Stages are pure functions of
their inputs and seeds; in deterministic mode a rerun rewrites identical bytes.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from . import volume_io as vio
from .ensemble import argmax_labels, average_probability_files
from .eval_metrics import evaluate_subject, summarize
from .inference import predict_volume
from .patch_sampler import DEFAULT_STAT_DRAWS, ChannelStats, Subject, estimate_channel_stats
from .preprocess import PreprocessConfig, fuse_contrasts, minmax_normalize, run_external_stage
from .radiomics_survival import (DEFAULT_BUCKETS, SurvivalModel, build_records, extract_features,
                                 fit_survival, predict_many, read_clinical_table, read_feature_table,
                                 read_predictions, survival_metrics, write_feature_table,
                                 write_predictions)
from .unet3d import (REFERENCE_CONFIGS, ModelConfig, TrainSchedule, build_model, load_checkpoint,
                     save_checkpoint, set_deterministic, train)

log = logging.getLogger(__name__)

STAGES = ("preprocess", "sample-stats", "train", "predict", "ensemble", "features",
          "survival-fit", "survival-predict", "evaluate")


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path, stage):
        super().__init__(f"missing {path}; run stage '{stage}' first")
        self.path, self.stage = Path(path), stage


@dataclass
class Seeds:
    stats: int = 0
    init: int = 0
    train: int = 0


@dataclass
class PipelineConfig:
    data_root: str = "data"
    output_root: str = "output"
    clinical_table: str | None = None  # defaults to <data_root>/clinical.csv
    validation_subjects: list[str] = field(default_factory=list)
    models: list[ModelConfig] = field(default_factory=lambda: list(REFERENCE_CONFIGS))
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    seeds: Seeds = field(default_factory=Seeds)
    stats_draws: int = DEFAULT_STAT_DRAWS
    flip_tta: bool = True
    survival_buckets: tuple[float, float] = DEFAULT_BUCKETS
    deterministic: bool = True
    jobs: int = 1

    def __post_init__(self):
        if not self.models:
            raise ValueError("at least one model config is required")
        self.models = [m if isinstance(m, ModelConfig) else ModelConfig(**m) for m in self.models]
        if isinstance(self.schedule, dict):
            self.schedule = TrainSchedule(**self.schedule)
        if isinstance(self.preprocess, dict):
            self.preprocess = PreprocessConfig(**self.preprocess)
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        self.survival_buckets = tuple(float(b) for b in self.survival_buckets)
        self.validation_subjects = list(self.validation_subjects)

    # layout
    @property
    def out(self) -> Path:
        return Path(self.output_root)

    @property
    def clinical_path(self) -> Path:
        return Path(self.clinical_table) if self.clinical_table else Path(self.data_root) / "clinical.csv"

    def preprocessed_dir(self) -> Path:
        return self.out / "preprocessed"

    def stats_path(self, patch_size: int) -> Path:
        return self.out / "stats" / f"channel_stats_n{patch_size}.json"

    def model_path(self, i: int) -> Path:
        return self.out / "models" / f"model_{i + 1}.pt"

    def prob_path(self, i: int | str, sid: str) -> Path:
        name = f"model_{i + 1}" if isinstance(i, int) else i
        return self.out / "probs" / name / f"{sid}_prob.nii.gz"

    def label_dir(self) -> Path:
        return self.out / "labels"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"]["adam_betas"] = list(self.schedule.adam_betas)
        d["survival_buckets"] = list(self.survival_buckets)
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls(**(yaml.safe_load(Path(path).read_text()) or {}))


def _require(path: Path, stage: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(path, stage)
    return path


def _input(path) -> Path:
    if not Path(path).is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return Path(path)


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- preprocess

def preprocess_subject(data_root, out_root, sid: str, config: PreprocessConfig) -> Path:
    """External stage per contrast, then min-max normalization and fusion."""
    src, dst = Path(data_root) / sid, Path(out_root) / sid
    vols = []
    for c in vio.CONTRASTS:
        corrected = vio.contrast_path(dst, sid, c)
        run_external_stage(config, vio.contrast_path(src, sid, c), corrected)
        vols.append(minmax_normalize(vio.load_scalar_volume(corrected, c)))
    fused = fuse_contrasts(*vols)
    out = vio.fused_path(dst, sid)
    vio.save_volume(fused, out)
    seg = vio.seg_path(src, sid)
    if seg.is_file():
        labels = vio.load_label_map(seg)
        vio.validate_labels(labels, fused.shape[:3])
        vio.save_label_map(labels, vio.seg_path(dst, sid))
    return out


def stage_preprocess(cfg: PipelineConfig) -> None:
    sids = vio.list_subjects(cfg.data_root)
    if not sids:
        raise FileNotFoundError(f"no subjects under {cfg.data_root}")
    _map(lambda s: preprocess_subject(cfg.data_root, cfg.preprocessed_dir(), s, cfg.preprocess), sids, cfg.jobs)


def load_subject(pre_root, sid: str, with_labels: bool = True) -> Subject:
    d = Path(pre_root) / sid
    image = vio.load_array(_require(vio.fused_path(d, sid), "preprocess")).astype(np.float32)
    labels = vio.load_label_map(vio.seg_path(d, sid)) if with_labels else None
    return Subject(sid, image, labels)


def _preprocessed_ids(cfg: PipelineConfig) -> list[str]:
    _require(cfg.preprocessed_dir(), "preprocess")
    return vio.list_subjects(cfg.preprocessed_dir())


def training_ids(cfg: PipelineConfig) -> list[str]:
    pre = cfg.preprocessed_dir()
    return [s for s in _preprocessed_ids(cfg)
            if s not in cfg.validation_subjects and vio.seg_path(pre / s, s).is_file()]


def prediction_ids(cfg: PipelineConfig) -> list[str]:
    ids = _preprocessed_ids(cfg)
    if cfg.validation_subjects:
        missing = sorted(set(cfg.validation_subjects) - set(ids))
        if missing:
            raise ValueError(f"validation subjects not found: {missing}")
        return [s for s in ids if s in cfg.validation_subjects]
    return ids


# -------------------------------------------------------------- sample-stats

def stage_sample_stats(cfg: PipelineConfig) -> None:
    ids = training_ids(cfg)
    if not ids:
        raise ValueError("no labelled training subjects")
    subjects = [load_subject(cfg.preprocessed_dir(), s) for s in ids]
    for n in sorted({m.patch_size for m in cfg.models}):
        rng = np.random.default_rng([cfg.seeds.stats, n])
        estimate_channel_stats(subjects, n, rng, cfg.stats_draws).save(cfg.stats_path(n))


# --------------------------------------------------------------------- train

def train_one(cfg: PipelineConfig, i: int, subjects: list[Subject]) -> None:
    mc = cfg.models[i]
    stats = ChannelStats.load(_require(cfg.stats_path(mc.patch_size), "sample-stats"))
    model = build_model(mc, seed=cfg.seeds.init + i, dropout=cfg.schedule.dropout)
    rng = np.random.default_rng([cfg.seeds.train, i])
    res = train(model, subjects, stats, cfg.schedule, rng, seed=cfg.seeds.train + i,
                log_every=max(1, cfg.schedule.epochs // 10))
    save_checkpoint(cfg.model_path(i), res.model, stats, res.loss_history,
                    schedule=asdict(cfg.schedule))


def stage_train(cfg: PipelineConfig) -> None:
    ids = training_ids(cfg)
    if not ids:
        raise ValueError("no labelled training subjects")
    subjects = [load_subject(cfg.preprocessed_dir(), s) for s in ids]
    for i in range(len(cfg.models)):
        log.info("training model %d/%d: %s", i + 1, len(cfg.models), cfg.models[i])
        train_one(cfg, i, subjects)


# ------------------------------------------------------------------- predict

def predict_subject_file(model_path, subject_dir, out_path, flip_tta: bool = True) -> np.ndarray:
    model, stats, _ = load_checkpoint(model_path)
    sid = Path(subject_dir).name
    image = vio.load_array(_require(vio.fused_path(subject_dir, sid), "preprocess")).astype(np.float32)
    pm = predict_volume(model, image, stats, model.config.patch_size, flip_tta)
    vio.save_probability_map(pm, out_path)
    return pm


def stage_predict(cfg: PipelineConfig) -> None:
    ids = prediction_ids(cfg)
    for i in range(len(cfg.models)):
        model, stats, _ = load_checkpoint(_require(cfg.model_path(i), "train"))

        def run(sid, model=model, stats=stats, i=i):
            image = load_subject(cfg.preprocessed_dir(), sid, with_labels=False).image
            pm = predict_volume(model, image, stats, model.config.patch_size, cfg.flip_tta)
            vio.save_probability_map(pm, cfg.prob_path(i, sid))

        _map(run, ids, cfg.jobs)


# ------------------------------------------------------------------ ensemble

def ensemble_files(prob_paths: Iterable, out_label_path, out_prob_path=None) -> np.ndarray:
    pm = average_probability_files(list(prob_paths))
    if out_prob_path is not None:
        vio.save_probability_map(pm, out_prob_path)
    labels = argmax_labels(pm)
    vio.save_label_map(labels, out_label_path)
    return labels


def stage_ensemble(cfg: PipelineConfig) -> None:
    for sid in prediction_ids(cfg):
        paths = [_require(cfg.prob_path(i, sid), "predict") for i in range(len(cfg.models))]
        ensemble_files(paths, vio.seg_path(cfg.label_dir() / sid, sid), cfg.prob_path("ensemble", sid))


# ------------------------------------------------------------------ features

def features_for_root(label_root, ids: Sequence[str], jobs: int = 1) -> dict[str, np.ndarray]:
    def one(sid):
        return extract_features(vio.load_label_map(vio.seg_path(Path(label_root) / sid, sid)))
    return dict(zip(ids, _map(one, list(ids), jobs)))


def stage_features(cfg: PipelineConfig) -> None:
    truth = features_for_root(cfg.preprocessed_dir(), training_ids(cfg), cfg.jobs)
    write_feature_table(cfg.out / "features" / "truth.csv", truth)
    ids = prediction_ids(cfg)
    for sid in ids:
        _require(vio.seg_path(cfg.label_dir() / sid, sid), "ensemble")
    write_feature_table(cfg.out / "features" / "predicted.csv", features_for_root(cfg.label_dir(), ids, cfg.jobs))


# ------------------------------------------------------------------ survival

def survival_fit_files(features_csv, clinical_csv, out_model) -> SurvivalModel:
    records = build_records(read_feature_table(features_csv), read_clinical_table(clinical_csv),
                            require_target=True)
    model = fit_survival(records)
    log.info("survival fit on %d subjects, training R^2 %.4f", len(records), model.train_r2)
    model.save(out_model)
    return model


def survival_predict_files(model_json, features_csv, clinical_csv, out_csv) -> dict[str, float]:
    model = SurvivalModel.load(model_json)
    records = build_records(read_feature_table(features_csv), read_clinical_table(clinical_csv))
    days = predict_many(model, records)
    write_predictions(out_csv, [r.subject_id for r in records], days)
    return dict(zip([r.subject_id for r in records], days))


def stage_survival_fit(cfg: PipelineConfig) -> None:
    survival_fit_files(_require(cfg.out / "features" / "truth.csv", "features"),
                       _input(cfg.clinical_path), cfg.out / "survival" / "model.json")


def stage_survival_predict(cfg: PipelineConfig) -> None:
    survival_predict_files(_require(cfg.out / "survival" / "model.json", "survival-fit"),
                           _require(cfg.out / "features" / "predicted.csv", "features"),
                           _input(cfg.clinical_path),
                           cfg.out / "survival" / "predictions.csv")


# ------------------------------------------------------------------ evaluate

def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def evaluate_roots(pred_root, truth_root, out_dir, ids: Sequence[str] | None = None,
                   survival_csv=None, clinical_csv=None, buckets=DEFAULT_BUCKETS, jobs: int = 1) -> dict:
    pred_root, truth_root, out_dir = Path(pred_root), Path(truth_root), Path(out_dir)
    if ids is None:
        ids = [s for s in vio.list_subjects(pred_root) if vio.seg_path(truth_root / s, s).is_file()]

    def one(sid):
        pred = vio.load_label_map(vio.seg_path(pred_root / sid, sid))
        truth = vio.load_label_map(vio.seg_path(truth_root / sid, sid))
        return evaluate_subject(pred, truth)

    rows = _map(one, list(ids), jobs)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = {"per_subject": dict(zip(ids, rows)), "summary": summarize(rows)}
    if rows:
        keys = list(rows[0])
        with open(out_dir / "segmentation_per_subject.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", *keys])
            for sid, r in zip(ids, rows):
                w.writerow([sid, *(_fmt(r[k]) for k in keys)])
        with open(out_dir / "segmentation_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "mean", "median", "n"])
            for k, s in result["summary"].items():
                w.writerow([k, _fmt(s["mean"]), _fmt(s["median"]), s["n"]])
    if survival_csv is not None and Path(survival_csv).is_file() and clinical_csv is not None:
        preds = read_predictions(survival_csv)
        clin = read_clinical_table(clinical_csv)
        both = [s for s in sorted(preds) if s in clin and clin[s]["survival_days"] is not None]
        if len(both) >= 2:
            m = survival_metrics([preds[s] for s in both], [clin[s]["survival_days"] for s in both], buckets)
            result["survival"] = m
            with open(out_dir / "survival_metrics.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["metric", "value"])
                for k, v in m.items():
                    w.writerow([k, _fmt(v)])
    return result


def stage_evaluate(cfg: PipelineConfig) -> dict:
    ids = [s for s in prediction_ids(cfg) if vio.seg_path(cfg.preprocessed_dir() / s, s).is_file()]
    for sid in ids:
        _require(vio.seg_path(cfg.label_dir() / sid, sid), "ensemble")
    return evaluate_roots(cfg.label_dir(), cfg.preprocessed_dir(), cfg.out / "evaluation", ids,
                          cfg.out / "survival" / "predictions.csv", cfg.clinical_path,
                          cfg.survival_buckets, cfg.jobs)


STAGE_FUNCS = {
    "preprocess": stage_preprocess,
    "sample-stats": stage_sample_stats,
    "train": stage_train,
    "predict": stage_predict,
    "ensemble": stage_ensemble,
    "features": stage_features,
    "survival-fit": stage_survival_fit,
    "survival-predict": stage_survival_predict,
    "evaluate": stage_evaluate,
}


def validate_stages(stages: Sequence[str]) -> list[str]:
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stage(s) {unknown}; choose from {list(STAGES)}")
    order = [STAGES.index(s) for s in stages]
    if order != sorted(order) or len(set(order)) != len(order):
        raise ValueError(f"stages must be listed once each in pipeline order: {list(STAGES)}")
    return list(stages)


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] | None = None) -> None:
    stages = validate_stages(stages or STAGES)
    set_deterministic(cfg.deterministic)
    cfg.out.mkdir(parents=True, exist_ok=True)
    for s in stages:
        log.info("stage %s", s)
        STAGE_FUNCS[s](cfg)
