"""Command-line front door for the whole pipeline.

Every subcommand reads the same TOML config (--config, defaults apply when
omitted) and roots its file layout at --out:

    data/                audio + metadata written by gen-data
    features/<split>/    per-clip feature caches, plus norm.json
    stage1/seed-N/       clip tagger checkpoint and metrics
    pseudo/seed-N/       pseudo_weak.tsv from the tagger
    stage2/              detector checkpoint and metrics
    filters.tsv          searched per-class median windows
    eval/                report.json and points.csv
    runs/, summary.*     sweep records and aggregate report

Exit codes: 0 success, 1 bad arguments or config (anything a validator
rejects), 2 runtime failure. Diagnostics go to stderr; files carry all
machine-readable output. MTLSED_SEED overrides the config seed; an explicit
--seed flag beats both.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .audiogen import (
    SPLIT_ORDER,
    generate_dataset,
    read_strong_tsv,
    read_unlabeled_tsv,
    read_wav,
    read_weak_tsv,
    write_weak_tsv,
)
from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    evaluate_system,
    psds,
    roc_points,
    scenario1,
    scenario2,
    write_operating_points_csv,
    write_report_json,
)
from .experiments import (
    ExperimentData,
    load_record,
    run_id_for,
    run_plan,
    summarize,
    tagger_config,
    predict_posteriors,
)
from .frontend import apply_normalizer, fit_normalizer, load_feature, log_mel, save_feature
from .model import load_checkpoint, strip_acc
from .postprocess import FilterLengths, load_filter_lengths, save_filter_lengths, search_filter_lengths
from .training import Example, TrainingData, pseudo_label, train_stage1, train_stage2

TRAIN_SPLITS = ("strong", "weak", "unlabeled")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; the contract wants 1."""

    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _say(message: str) -> None:
    print(message, file=sys.stderr)


def _resolve(path, out: Path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else out / path


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    env_seed = os.environ.get("MTLSED_SEED")
    if env_seed is not None:
        try:
            overrides["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"MTLSED_SEED must be an integer, got {env_seed!r}")
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "alpha", None) is not None:
        overrides["alpha"] = args.alpha
    if getattr(args, "taxonomy", None) is not None:
        overrides["taxonomy"] = args.taxonomy
    return cfg.with_training(**overrides) if overrides else cfg


# ------------------------------------------------------------------ data IO


def _split_clips(data_dir: Path, split: str) -> list:
    audio = data_dir / "audio" / split
    if not audio.is_dir():
        raise FileNotFoundError(f"missing audio for split {split!r} under {data_dir}")
    return sorted(f"audio/{split}/{p.name}" for p in audio.glob("*.wav"))


def _feature_path(out: Path, clip_id: str) -> Path:
    rel = Path(clip_id)
    return out / "features" / rel.parent.name / f"{rel.stem}.lmf"


def _features_tensor(out: Path, clip_id: str) -> torch.Tensor:
    path = _feature_path(out, clip_id)
    if not path.exists():
        raise FileNotFoundError(f"no cached features for {clip_id}; run extract-features")
    return torch.tensor(load_feature(path).values, dtype=torch.float32)


def _load_training_data(out: Path, cfg: RunConfig) -> TrainingData:
    meta = out / "data" / "metadata"
    events_by_clip: dict = {}
    for ev in read_strong_tsv(meta / "strong.tsv"):
        events_by_clip.setdefault(ev.clip_id, []).append(ev)
    strong = tuple(
        Example(clip, _features_tensor(out, clip), "strong", events=tuple(evs))
        for clip, evs in sorted(events_by_clip.items())
    )
    weak = tuple(
        Example(clip, _features_tensor(out, clip), "weak", tags=tags)
        for clip, tags in sorted(read_weak_tsv(meta / "weak.tsv").items())
    )
    unlabeled = tuple(
        Example(clip, _features_tensor(out, clip), "unlabeled")
        for clip in read_unlabeled_tsv(meta / "unlabeled.tsv")
    )
    hop_seconds = cfg.frontend.hop / cfg.frontend.sample_rate
    return TrainingData(strong, weak, unlabeled, hop_seconds=hop_seconds)


def _load_validation(out: Path):
    meta = out / "data" / "metadata"
    truth = tuple(read_strong_tsv(meta / "validation.tsv"))
    clips = sorted({ev.clip_id for ev in truth})
    examples = tuple(
        Example(clip, _features_tensor(out, clip), "unlabeled") for clip in clips
    )
    return examples, truth


def _load_pseudo_examples(out: Path, seed: int) -> tuple:
    path = out / "pseudo" / f"seed-{seed}" / "pseudo_weak.tsv"
    if not path.exists():
        return ()
    return tuple(
        Example(clip, _features_tensor(out, clip), "weak", tags=tags)
        for clip, tags in sorted(read_weak_tsv(path).items())
    )


def _load_detector(out: Path):
    ckpt = out / "stage2" / "stage2.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"no detector checkpoint at {ckpt}; run train-stage2")
    model, _, _ = load_checkpoint(ckpt)
    return strip_acc(model)


def _pooled_hop(cfg: RunConfig) -> float:
    return cfg.frontend.hop / cfg.frontend.sample_rate * cfg.model.time_pool


# ------------------------------------------------------------------ commands


def cmd_gen_data(args, cfg: RunConfig):
    out = Path(args.out)
    manifests = generate_dataset(out / "data", cfg.audiogen, seed=cfg.training.seed)
    counts = ", ".join(f"{s}={len(m.clips)}" for s, m in manifests.items())
    _say(f"gen-data: wrote {counts} under {out / 'data'}")


def cmd_extract_features(args, cfg: RunConfig):
    out = Path(args.out)
    data_dir = out / "data"
    raw = {
        split: {
            clip: log_mel(read_wav(data_dir / clip), cfg.frontend)
            for clip in _split_clips(data_dir, split)
        }
        for split in SPLIT_ORDER
    }
    train_feats = [f for split in TRAIN_SPLITS for f in raw[split].values()]
    stats = fit_normalizer(train_feats, per_bin=cfg.frontend.per_bin_norm)
    for split, feats in raw.items():
        split_dir = out / "features" / split
        split_dir.mkdir(parents=True, exist_ok=True)
        for clip, feature in feats.items():
            save_feature(_feature_path(out, clip), apply_normalizer(feature, stats))
    payload = {
        "mean": np.asarray(stats.mean).tolist(),
        "std": np.asarray(stats.std).tolist(),
        "frontend_digest": cfg.frontend.digest(),
        "clips": sum(len(f) for f in raw.values()),
    }
    (out / "features" / "norm.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    _say(f"extract-features: cached {payload['clips']} clips under {out / 'features'}")


def cmd_train_stage1(args, cfg: RunConfig):
    out = Path(args.out)
    data = _load_training_data(out, cfg)
    stage_dir = out / "stage1" / f"seed-{cfg.training.seed}"
    _, log = train_stage1(cfg.training, tagger_config(cfg.model), data, out_dir=stage_dir)
    _say(
        f"train-stage1: {log.steps} steps over {cfg.training.stage1_epochs} epochs, "
        f"final L_MTL {log.rows[-1]['L_MTL']:.4f}, checkpoint in {stage_dir}"
    )


def cmd_pseudo_label(args, cfg: RunConfig):
    out = Path(args.out)
    seed = cfg.training.seed
    ckpt = out / "stage1" / f"seed-{seed}" / "stage1.ckpt"
    if not ckpt.exists():
        raise FileNotFoundError(f"no tagger checkpoint at {ckpt}; run train-stage1")
    tagger, _, _ = load_checkpoint(ckpt, expected_config=tagger_config(cfg.model))
    data = _load_training_data(out, cfg)
    pseudo = pseudo_label(tagger, data.unlabeled, cfg.training.pseudo_threshold)
    dest = out / "pseudo" / f"seed-{seed}" / "pseudo_weak.tsv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_weak_tsv(dest, {ex.clip_id: ex.tags for ex in pseudo})
    _say(f"pseudo-label: tagged {len(pseudo)}/{len(data.unlabeled)} clips into {dest}")


def cmd_train_stage2(args, cfg: RunConfig):
    out = Path(args.out)
    data = _load_training_data(out, cfg)
    pseudo = _load_pseudo_examples(out, cfg.training.seed)
    stage_dir = out / "stage2"
    _, log = train_stage2(cfg.training, cfg.model, data, pseudo, out_dir=stage_dir)
    _say(
        f"train-stage2: alpha={cfg.training.alpha} taxonomy={cfg.training.taxonomy}, "
        f"{log.steps} steps, final L_MTL {log.rows[-1]['L_MTL']:.4f}, "
        f"checkpoint in {stage_dir}"
    )


def cmd_search_filters(args, cfg: RunConfig):
    out = Path(args.out)
    model = _load_detector(out)
    examples, truth = _load_validation(out)
    posteriors = predict_posteriors(model, examples)
    lengths = search_filter_lengths(
        posteriors,
        truth,
        _pooled_hop(cfg),
        candidates=cfg.postprocess.candidates,
        threshold=cfg.postprocess.threshold,
        rho=cfg.postprocess.rho,
        clip_seconds=cfg.audiogen.clip_seconds,
    )
    save_filter_lengths(out / "filters.tsv", lengths)
    _say(f"search-filters: wrote {out / 'filters.tsv'}")


def _write_eval_outputs(out: Path, reports) -> None:
    eval_dir = out / "eval"
    eval_dir.mkdir(parents=True, exist_ok=True)
    write_report_json(reports, eval_dir / "report.json")
    write_operating_points_csv(reports, eval_dir / "points.csv")
    scores = ", ".join(f"{r.scenario}={r.score:.4f}" for r in reports)
    total = sum(r.score for r in reports)
    _say(f"evaluate: {scores}, total={total:.4f}; reports in {eval_dir}")


def cmd_evaluate(args, cfg: RunConfig):
    out = Path(args.out)
    if args.detections:
        detections = read_strong_tsv(_resolve(args.detections, out))
        truth_path = (
            _resolve(args.truth, out)
            if args.truth
            else out / "data" / "metadata" / "validation.tsv"
        )
        truth = read_strong_tsv(truth_path)
        duration = len({ev.clip_id for ev in truth}) * cfg.audiogen.clip_seconds
        by_threshold = {0.5: detections}
        reports = []
        for name, params in (("scenario1", scenario1()), ("scenario2", scenario2())):
            points, warnings = roc_points(by_threshold, truth, params, duration)
            reports.append(psds(points, params, scenario=name, warnings=warnings))
        _write_eval_outputs(out, reports)
        return
    model = _load_detector(out)
    examples, truth = _load_validation(out)
    posteriors = predict_posteriors(model, examples)
    filters_path = out / "filters.tsv"
    lengths = load_filter_lengths(filters_path) if filters_path.exists() else FilterLengths({})
    report1, report2, _ = evaluate_system(
        posteriors,
        truth,
        _pooled_hop(cfg),
        thresholds=cfg.eval.thresholds,
        filter_lengths=lengths,
        clip_seconds=cfg.audiogen.clip_seconds,
    )
    _write_eval_outputs(out, (report1, report2))


def cmd_sweep(args, cfg: RunConfig):
    out = Path(args.out)
    plan = cfg.plan()
    train = _load_training_data(out, cfg)
    examples, truth = _load_validation(out)
    data = ExperimentData(train, examples, truth, clip_seconds=cfg.audiogen.clip_seconds)
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    if args.jobs == 1 or len(plan.seeds) == 1:
        records = run_plan(plan, data, cfg.model, out, candidates=cfg.postprocess.candidates)
    else:
        # seeds are independent once stage 1 is per-seed, so they parallelize
        subplans = [replace(plan, seeds=(s,)) for s in plan.seeds]
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            chunks = list(
                pool.map(
                    lambda sub: run_plan(
                        sub, data, cfg.model, out, candidates=cfg.postprocess.candidates
                    ),
                    subplans,
                )
            )
        by_id = {r.run_id: r for chunk in chunks for r in chunk}
        records = [by_id[run_id_for(*combo)] for combo in plan.runs()]
    rows = summarize(records, out)
    _say(f"sweep: {len(records)} runs, {len(rows)} summary rows under {out}")


def cmd_report(args, cfg: RunConfig):
    out = Path(args.out)
    paths = sorted((out / "runs").glob("*/record.json"))
    if not paths:
        raise ConfigError(f"no run records under {out / 'runs'}")
    records = [load_record(p) for p in paths]
    rows = summarize(records, out)
    _say(f"report: aggregated {len(records)} records into {len(rows)} rows under {out}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mtlsed",
        description="Desk-scale sound event detection pipeline.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text, *, alpha=False, taxonomy=False, seed=True):
        p = sub.add_parser(
            name,
            help=help_text,
            description=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )
        p.add_argument("--config", default=None, help="TOML run config path")
        p.add_argument("--out", default=".", help="workspace directory for all files")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override config seed")
        if alpha:
            p.add_argument("--alpha", type=float, default=None, help="override loss weight alpha")
        if taxonomy:
            p.add_argument(
                "--taxonomy",
                choices=("proposed", "randomized"),
                default=None,
                help="override coarse-class grouping",
            )
        p.set_defaults(func=func)
        return p

    add("gen-data", cmd_gen_data, "synthesize the four-split dataset")
    add("extract-features", cmd_extract_features, "compute and normalize features", seed=False)
    add("train-stage1", cmd_train_stage1, "train the clip tagger on weak labels")
    add("pseudo-label", cmd_pseudo_label, "tag unlabeled clips with the stage-1 model")
    add("train-stage2", cmd_train_stage2, "train the detector", alpha=True, taxonomy=True)
    add("search-filters", cmd_search_filters, "pick per-class median windows", seed=False)
    eval_p = add("evaluate", cmd_evaluate, "score the detector on validation", seed=False)
    eval_p.add_argument(
        "--detections", default=None, help="score a pre-made detections TSV instead of the model"
    )
    eval_p.add_argument(
        "--truth", default=None, help="ground-truth TSV (defaults to the validation split)"
    )
    sweep_p = add("sweep", cmd_sweep, "run the full experiment grid", seed=False)
    sweep_p.add_argument("--jobs", type=int, default=1, help="concurrent seeds")
    add("report", cmd_report, "re-aggregate existing run records", seed=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    try:
        cfg = _load_run_config(args)
        args.func(args, cfg)
        return 0
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
