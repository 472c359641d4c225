"""Sweep orchestration: alpha grid, taxonomy ablation, single-branch control.

A plan expands to (alpha, taxonomy, seed) runs. The alpha = 1 control ignores
the auxiliary branch entirely, so it runs once per seed with its taxonomy
marked "n/a". Stage-1 taggers depend only on the seed and are trained once
and shared across that seed's runs. Each run trains stage 2, strips the
auxiliary branch, searches per-class filter lengths on the validation split,
evaluates both scoring scenarios, and persists a JSON record; re-running a
finished plan loads the records instead of training, so interrupted sweeps
resume where they stopped.

summarize() aggregates records into per-(alpha, taxonomy) means and spreads
over seeds, the relative improvement of each row against the control, a CSV
and JSON table, and a total-versus-alpha plot. Wall-clock time lives only in
the per-run records, never in the summary, so summaries are reproducible
byte for byte.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .evaluation import evaluate_system, write_operating_points_csv, write_report_json
from .model import (
    ModelConfig,
    build,
    load_checkpoint,
    param_count,
    single_branch,
    strip_acc,
)
from .postprocess import (
    DEFAULT_FILTER_CANDIDATES,
    save_filter_lengths,
    search_filter_lengths,
)
from .training import (
    Example,
    TrainConfig,
    TrainingData,
    pseudo_label,
    train_stage1,
    train_stage2,
)

CONTROL_TAXONOMY = "n/a"

SUMMARY_COLUMNS = (
    "alpha",
    "taxonomy",
    "n_seeds",
    "psds1_mean",
    "psds1_std",
    "psds2_mean",
    "psds2_std",
    "total_mean",
    "total_std",
    "improvement_pct",
)


class ExperimentError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentPlan:
    """The run grid. alphas include the 1.0 control by default."""

    base: TrainConfig
    alphas: tuple = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    taxonomies: tuple = ("proposed", "randomized")
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(self.alphas))
        object.__setattr__(self, "taxonomies", tuple(self.taxonomies))
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not (self.alphas and self.taxonomies and self.seeds):
            raise ExperimentError("alphas, taxonomies, and seeds must be nonempty")
        for alpha in self.alphas:
            if not 0.0 <= alpha <= 1.0:
                raise ExperimentError(f"alpha {alpha} outside [0, 1]")

    def runs(self) -> tuple:
        """Ordered (alpha, taxonomy, seed) triples; one control per seed."""
        out = []
        for seed in self.seeds:
            for alpha in self.alphas:
                if alpha == 1.0:
                    out.append((alpha, CONTROL_TAXONOMY, seed))
                else:
                    for taxonomy in self.taxonomies:
                        out.append((alpha, taxonomy, seed))
        return tuple(out)


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    alpha: float
    taxonomy: str
    seed: int
    psds1: float
    psds2: float
    total: float
    param_count: int
    wall_time: float

    def __post_init__(self):
        if abs(self.total - (self.psds1 + self.psds2)) > 1e-9:
            raise ExperimentError("total must equal psds1 + psds2")
        if self.param_count < 0 or self.wall_time < 0:
            raise ExperimentError("counts and times must be nonnegative")


@dataclass(frozen=True)
class ExperimentData:
    """Prepared features: training splits plus the validation set and truth."""

    train: TrainingData
    validation: tuple
    truth: tuple
    clip_seconds: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "validation", tuple(self.validation))
        object.__setattr__(self, "truth", tuple(self.truth))


def run_id_for(alpha: float, taxonomy: str, seed: int) -> str:
    slug = "control" if taxonomy == CONTROL_TAXONOMY else taxonomy
    return f"alpha-{alpha:g}_{slug}_seed-{seed}"


def save_record(record: RunRecord, path) -> None:
    payload = {
        "run_id": record.run_id,
        "alpha": record.alpha,
        "taxonomy": record.taxonomy,
        "seed": record.seed,
        "psds1": record.psds1,
        "psds2": record.psds2,
        "total": record.total,
        "param_count": record.param_count,
        "wall_time": record.wall_time,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_record(path) -> RunRecord:
    payload = json.loads(Path(path).read_text())
    return RunRecord(**payload)


def tagger_config(model_cfg: ModelConfig) -> ModelConfig:
    """Stage-1 tagger: the single-branch encoder, one block deeper and wider."""
    last_ch, _k, _pool, last_basis = model_cfg.branch_blocks[-1]
    extra = (2 * last_ch, 3, (1, 2), last_basis)
    return replace(
        single_branch(model_cfg),
        branch_blocks=model_cfg.branch_blocks + (extra,),
    )


def predict_posteriors(model, examples: Sequence[Example]) -> dict:
    """Per-clip frame posteriors of the detection branch."""
    out = {}
    with torch.no_grad():
        for ex in examples:
            out[ex.clip_id] = model(ex.features).sed_frame.numpy()
    return out


def _prepare_stage1(plan, data, model_cfg, out_dir, seed):
    """Train or reload the seed's tagger, then pseudo-label the unlabeled set."""
    cfg = replace(plan.base, seed=seed)
    stage1_dir = Path(out_dir) / "stage1" / f"seed-{seed}"
    ckpt = stage1_dir / "stage1.ckpt"
    tagger_cfg = tagger_config(model_cfg)
    if ckpt.exists():
        tagger, _, _ = load_checkpoint(ckpt, expected_config=tagger_cfg)
    else:
        tagger, _ = train_stage1(cfg, tagger_cfg, data.train, out_dir=stage1_dir)
    pseudo = pseudo_label(
        tagger, data.train.unlabeled, cfg.pseudo_threshold, data.train.class_order
    )
    return pseudo


def run_plan(
    plan: ExperimentPlan,
    data: ExperimentData,
    model_cfg: ModelConfig,
    out_dir,
    candidates: Sequence[int] = DEFAULT_FILTER_CANDIDATES,
) -> list:
    """Execute (or resume) every run in the plan; returns its RunRecords."""
    if not (data.train.strong or data.train.weak):
        raise ExperimentError("plan needs labeled training clips")
    if not data.validation or not data.truth:
        raise ExperimentError("plan needs a validation split with ground truth")
    out_dir = Path(out_dir)
    pooled_hop = data.train.hop_seconds * model_cfg.time_pool

    records = []
    for seed in plan.seeds:
        combos = [(a, t, s) for (a, t, s) in plan.runs() if s == seed]
        pending = [
            combo
            for combo in combos
            if not (out_dir / "runs" / run_id_for(*combo) / "record.json").exists()
        ]
        pseudo = ()
        if pending:
            pseudo = _prepare_stage1(plan, data, model_cfg, out_dir, seed)
        for alpha, taxonomy, _ in combos:
            run_id = run_id_for(alpha, taxonomy, seed)
            run_dir = out_dir / "runs" / run_id
            record_path = run_dir / "record.json"
            if record_path.exists():
                records.append(load_record(record_path))
                continue
            control = taxonomy == CONTROL_TAXONOMY
            cfg = replace(
                plan.base,
                alpha=alpha,
                seed=seed,
                taxonomy=plan.base.taxonomy if control else taxonomy,
            )
            started = time.perf_counter()
            model, _ = train_stage2(
                cfg, model_cfg, data.train, pseudo, out_dir=run_dir, sed_only=control
            )
            stripped = strip_acc(model)
            posteriors = predict_posteriors(stripped, data.validation)
            lengths = search_filter_lengths(
                posteriors,
                data.truth,
                pooled_hop,
                candidates=candidates,
                clip_seconds=data.clip_seconds,
                class_order=data.train.class_order,
            )
            save_filter_lengths(run_dir / "filters.tsv", lengths)
            report1, report2, total = evaluate_system(
                posteriors,
                data.truth,
                pooled_hop,
                filter_lengths=lengths,
                clip_seconds=data.clip_seconds,
                class_order=data.train.class_order,
            )
            write_report_json([report1, report2], run_dir / "report.json")
            write_operating_points_csv([report1, report2], run_dir / "points.csv")
            record = RunRecord(
                run_id,
                alpha,
                taxonomy,
                seed,
                report1.score,
                report2.score,
                total,
                param_count(stripped),
                time.perf_counter() - started,
            )
            save_record(record, record_path)
            records.append(record)
    return records


def _population_std(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.std())


def summarize(records: Sequence[RunRecord], out_dir) -> list:
    """Aggregate records into summary.csv, summary.json, and alpha_sweep.svg.

    Rows are per (alpha, taxonomy) with seed-mean and population std of each
    score; std cells are empty for single-seed rows. improvement_pct compares
    each row's mean total against the alpha = 1 control's mean total.
    """
    if not records:
        raise ExperimentError("summarize needs at least one record")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    groups: dict = {}
    for r in records:
        groups.setdefault((r.alpha, r.taxonomy), []).append(r)

    control_key = next(
        (k for k in groups if k[1] == CONTROL_TAXONOMY), None
    )
    control_mean = (
        float(np.mean([r.total for r in groups[control_key]]))
        if control_key
        else None
    )

    rows = []
    for (alpha, taxonomy), members in sorted(groups.items()):
        members = sorted(members, key=lambda r: r.seed)
        totals = [r.total for r in members]
        row = {
            "alpha": alpha,
            "taxonomy": taxonomy,
            "n_seeds": len(members),
            "psds1_mean": float(np.mean([r.psds1 for r in members])),
            "psds1_std": None if len(members) == 1 else _population_std([r.psds1 for r in members]),
            "psds2_mean": float(np.mean([r.psds2 for r in members])),
            "psds2_std": None if len(members) == 1 else _population_std([r.psds2 for r in members]),
            "total_mean": float(np.mean(totals)),
            "total_std": None if len(members) == 1 else _population_std(totals),
            "improvement_pct": (
                None
                if not control_mean  # undefined without a nonzero control
                else 100.0 * (float(np.mean(totals)) - control_mean) / control_mean
            ),
            "seeds": [r.seed for r in members],
            "totals": totals,
        }
        rows.append(row)

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow(
                ["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c] for c in SUMMARY_COLUMNS]
            )

    payload = {"control_total_mean": control_mean, "rows": rows}
    (out_dir / "summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n"
    )
    _plot_sweep(rows, out_dir / "alpha_sweep.svg")
    return rows


def _plot_sweep(rows: Sequence[Mapping], path) -> None:
    """Total score versus alpha, one line per taxonomy, control as a dashed
    reference. SVG output is made reproducible by pinning the hash salt and
    omitting the creation date."""
    plt.rcParams["svg.hashsalt"] = "mtlsed"
    fig, ax = plt.subplots(figsize=(6, 4))
    taxonomies = sorted({row["taxonomy"] for row in rows if row["taxonomy"] != CONTROL_TAXONOMY})
    for taxonomy in taxonomies:
        pts = sorted(
            (row["alpha"], row["total_mean"])
            for row in rows
            if row["taxonomy"] == taxonomy
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=taxonomy)
    control = [row for row in rows if row["taxonomy"] == CONTROL_TAXONOMY]
    if control:
        ax.axhline(
            control[0]["total_mean"], linestyle="--", color="gray", label="alpha=1 control"
        )
    ax.set_xlabel("alpha")
    ax.set_ylabel("mean total score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
