"""Command-line entry point: ``gliomaseg <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import pipeline as pl
from . import volume_io as vio
from .patch_sampler import DEFAULT_STAT_DRAWS, ChannelStats, estimate_channel_stats
from .phantoms import DEFAULT_SHAPE, generate_phantoms
from .preprocess import PreprocessConfig
from .radiomics_survival import write_feature_table
from .unet3d import REFERENCE_CONFIGS, ModelConfig, TrainSchedule, build_model, save_checkpoint, set_deterministic, train

log = logging.getLogger("gliomaseg")


def _subjects(root, ids=None):
    ids = ids or vio.list_subjects(root)
    return [pl.load_subject(root, s) for s in ids]


def cmd_phantoms(a):
    generate_phantoms(a.n, a.seed, a.out, tuple(a.shape))
    print(f"wrote {a.n} phantom subjects to {a.out}")


def cmd_preprocess(a):
    cfg = PreprocessConfig(a.external_command, a.skip_external or not a.external_command)
    ids = a.subjects or vio.list_subjects(a.data_root)
    pl._map(lambda s: pl.preprocess_subject(a.data_root, a.out, s, cfg), ids, a.jobs)


def cmd_sample_stats(a):
    stats = estimate_channel_stats(_subjects(a.data, a.subjects), a.patch_size,
                                   np.random.default_rng(a.seed), a.draws)
    stats.save(a.out)
    print(json.dumps(stats.to_dict()))


def _model_config(a) -> ModelConfig:
    if a.config:
        d = yaml.safe_load(Path(a.config).read_text()) or {}
        return ModelConfig(**d.get("model", d))
    if a.reference_row:
        return REFERENCE_CONFIGS[a.reference_row - 1]
    return ModelConfig(a.blocks, a.patch_size, a.features, a.loss)


def cmd_train(a):
    set_deterministic(a.deterministic)
    mc = _model_config(a)
    sched = TrainSchedule(epochs=a.epochs, learning_rate=a.lr, dropout=a.dropout)
    stats = ChannelStats.load(a.stats)
    model = build_model(mc, seed=a.seed, dropout=sched.dropout)
    res = train(model, _subjects(a.data, a.subjects), stats, sched, np.random.default_rng(a.seed),
                seed=a.seed, log_every=max(1, sched.epochs // 10))
    save_checkpoint(a.out, res.model, stats, res.loss_history, schedule=asdict(sched))


def cmd_predict(a):
    set_deterministic(a.deterministic)
    pl.predict_subject_file(a.model, a.subject, a.out, flip_tta=not a.no_flip)


def cmd_ensemble(a):
    pl.ensemble_files(a.probs, a.out, a.prob_out)


def cmd_features(a):
    ids = a.subjects or vio.list_subjects(a.label_root)
    write_feature_table(a.out, pl.features_for_root(a.label_root, ids, a.jobs))


def cmd_survival_fit(a):
    m = pl.survival_fit_files(a.features, a.clinical, a.out)
    print(f"training R^2 {m.train_r2:.6f}")


def cmd_survival_predict(a):
    pl.survival_predict_files(a.model, a.features, a.clinical, a.out)


def cmd_evaluate(a):
    res = pl.evaluate_roots(a.pred_root, a.truth_root, a.out, survival_csv=a.survival,
                            clinical_csv=a.clinical, buckets=tuple(a.buckets), jobs=a.jobs)
    for k, s in res["summary"].items():
        print(f"{k:18s} mean {s['mean']:.4f}  median {s['median']:.4f}  n={s['n']}")
    for k, v in res.get("survival", {}).items():
        print(f"survival {k:10s} {v:.4f}")


def cmd_run(a):
    if a.print_config:
        print(pl.PipelineConfig().dump(), end="")
        return
    if not a.config:
        raise SystemExit("run: --config is required (use --print-config for a template)")
    cfg = pl.PipelineConfig.load(a.config)
    if a.jobs:
        cfg.jobs = a.jobs
    pl.run_pipeline(cfg, a.stages)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gliomaseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantoms", help="generate a synthetic dataset")
    s.add_argument("--n", type=int, default=12)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shape", type=int, nargs=3, default=list(DEFAULT_SHAPE))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantoms)

    s = sub.add_parser("preprocess", help="external correction stage, normalization and fusion")
    s.add_argument("--data-root", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", nargs="*")
    s.add_argument("--external-command", help="template with {in} and {out} placeholders")
    s.add_argument("--skip-external", action="store_true")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("sample-stats", help="per-channel patch statistics")
    s.add_argument("--data", required=True, help="preprocessed root")
    s.add_argument("--subjects", nargs="*")
    s.add_argument("--patch-size", type=int, required=True)
    s.add_argument("--draws", type=int, default=DEFAULT_STAT_DRAWS)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample_stats)

    s = sub.add_parser("train", help="train one U-Net")
    s.add_argument("--data", required=True, help="preprocessed root")
    s.add_argument("--subjects", nargs="*")
    s.add_argument("--stats", required=True)
    s.add_argument("--config", help="YAML with model fields (num_blocks, patch_size, base_features, loss_type)")
    s.add_argument("--reference-row", type=int, choices=range(1, 7))
    s.add_argument("--blocks", type=int, default=3)
    s.add_argument("--patch-size", type=int, default=64)
    s.add_argument("--features", type=int, default=96)
    s.add_argument("--loss", choices=["uniform", "weighted"], default="uniform")
    s.add_argument("--epochs", type=int, default=640)
    s.add_argument("--lr", type=float, default=5e-4)
    s.add_argument("--dropout", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--deterministic", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="sliding-window probabilities for one subject")
    s.add_argument("--model", required=True)
    s.add_argument("--subject", required=True, help="preprocessed subject directory")
    s.add_argument("--out", required=True)
    s.add_argument("--no-flip", action="store_true")
    s.add_argument("--deterministic", action="store_true")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ensemble", help="average probability maps and write labels")
    s.add_argument("--probs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--prob-out")
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("features", help="volume and surface features from label maps")
    s.add_argument("--label-root", required=True)
    s.add_argument("--subjects", nargs="*")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("survival-fit", help="fit the linear survival model")
    s.add_argument("--features", required=True)
    s.add_argument("--clinical", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_survival_fit)

    s = sub.add_parser("survival-predict", help="predict survival days")
    s.add_argument("--model", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--clinical", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_survival_predict)

    s = sub.add_parser("evaluate", help="segmentation and survival metrics")
    s.add_argument("--pred-root", required=True)
    s.add_argument("--truth-root", required=True)
    s.add_argument("--survival")
    s.add_argument("--clinical")
    s.add_argument("--buckets", type=float, nargs=2, default=[300.0, 450.0])
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="run pipeline stages from a config file")
    s.add_argument("--config")
    s.add_argument("--stages", nargs="+", choices=pl.STAGES)
    s.add_argument("--jobs", type=int)
    s.add_argument("--print-config", action="store_true")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
