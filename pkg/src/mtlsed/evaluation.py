"""Polyphonic detection scoring with intersection criteria.

Detections are matched to ground truth by overlap ratios rather than collars:
a detection is valid when same-class ground truth covers enough of it, a
ground-truth event is found when valid detections cover enough of *it*, and
detections may cross-trigger other classes' events. Per-threshold operating
points combine class-averaged true-positive rate with cross-trigger and
inter-class-variance penalties; the score is the normalized area under the
upper envelope of those points up to a false-positive-rate budget.

Two scenario parameterizations are provided: one rewarding tight temporal
localization, one punishing class confusion.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .audiogen import read_strong_tsv as read_events_tsv  # noqa: F401
from .audiogen import write_strong_tsv as write_events_tsv  # noqa: F401
from .postprocess import FilterLengths, decode_clip
from .taxonomy import EVENT_CLASSES, EventLabel

logger = logging.getLogger(__name__)

# 100 false positives per hour, as a per-second rate.
E_MAX_DEFAULT = 100.0 / 3600.0

# 50 uniformly spaced decision thresholds strictly inside (0, 1).
DEFAULT_THRESHOLDS = tuple(float(i) / 51.0 for i in range(1, 51))


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class PsdsParams:
    """Matching tolerances and penalty weights for one scoring scenario."""

    rho_dtc: float
    rho_gtc: float
    rho_cttc: float
    alpha_ct: float
    alpha_st: float
    e_max: float = E_MAX_DEFAULT

    def __post_init__(self):
        for name in ("rho_dtc", "rho_gtc", "rho_cttc"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise EvalError(f"{name} must lie in (0, 1], got {value}")
        if self.alpha_ct < 0 or self.alpha_st < 0:
            raise EvalError("penalty weights must be nonnegative")
        if self.e_max <= 0:
            raise EvalError("e_max must be positive")


def scenario1() -> PsdsParams:
    """Localization-heavy scoring: strict overlap, no cross-trigger penalty."""
    return PsdsParams(rho_dtc=0.7, rho_gtc=0.7, rho_cttc=0.3, alpha_ct=0.0, alpha_st=1.0)


def scenario2() -> PsdsParams:
    """Confusion-heavy scoring: loose overlap, cross-triggers penalized."""
    return PsdsParams(rho_dtc=0.1, rho_gtc=0.1, rho_cttc=0.3, alpha_ct=0.5, alpha_st=1.0)


@dataclass(frozen=True)
class MatchCounts:
    """Per-class true/false positives plus (detector, truth) cross-triggers."""

    tp: Mapping[str, int]
    fp: Mapping[str, int]
    ct: Mapping[tuple, int]


@dataclass(frozen=True)
class OperatingPoint:
    """One threshold's matched counts and penalized rates."""

    threshold: float
    tp: Mapping[str, int]
    fp: Mapping[str, int]
    ct: Mapping[tuple, int]
    tpr: Mapping[str, float]
    etpr: float
    efpr: float


@dataclass(frozen=True)
class PsdsReport:
    scenario: str
    score: float
    curves: Mapping[str, tuple]
    params: PsdsParams
    points: tuple
    warnings: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise EvalError("score must lie in [0, 1]")


def _overlap(a: EventLabel, b: EventLabel) -> float:
    return max(0.0, min(a.offset, b.offset) - max(a.onset, b.onset))


def match_events(
    detections: Sequence[EventLabel],
    ground_truth: Sequence[EventLabel],
    rho_dtc: float,
    rho_gtc: float,
    rho_cttc: float | None = None,
) -> MatchCounts:
    """Intersection-criterion matching within each clip.

    A detection is valid when same-class ground truth covers at least rho_dtc
    of its duration; invalid detections are false positives. A ground-truth
    event is a true positive when valid same-class detections cover at least
    rho_gtc of it. When rho_cttc is given, a ground-truth event of another
    class cross-triggers a detecting class when that class's detections cover
    at least rho_cttc of it, counted per (detector class, truth class) pair.
    """
    dets_by_clip = defaultdict(list)
    for d in detections:
        dets_by_clip[d.clip_id].append(d)
    gt_by_clip = defaultdict(list)
    for g in ground_truth:
        gt_by_clip[g.clip_id].append(g)

    tp: dict = defaultdict(int)
    fp: dict = defaultdict(int)
    ct: dict = defaultdict(int)
    for clip_id in sorted(set(dets_by_clip) | set(gt_by_clip)):
        dets = dets_by_clip.get(clip_id, [])
        gts = gt_by_clip.get(clip_id, [])
        valid = []
        for d in dets:
            covered = sum(_overlap(d, g) for g in gts if g.klass == d.klass)
            if covered / d.duration >= rho_dtc:
                valid.append(d)
            else:
                fp[d.klass] += 1
        for g in gts:
            covered = sum(_overlap(g, d) for d in valid if d.klass == g.klass)
            if covered / g.duration >= rho_gtc:
                tp[g.klass] += 1
        if rho_cttc is not None:
            det_classes = sorted({d.klass for d in dets})
            for g in gts:
                for klass in det_classes:
                    if klass == g.klass:
                        continue
                    covered = sum(_overlap(g, d) for d in dets if d.klass == klass)
                    if covered / g.duration >= rho_cttc:
                        ct[(klass, g.klass)] += 1
    return MatchCounts(dict(tp), dict(fp), dict(ct))


def _upper_envelope(points: Sequence[OperatingPoint]) -> list[OperatingPoint]:
    """Keep only points that raise the best eTPR as eFPR grows."""
    ordered = sorted(points, key=lambda p: (p.efpr, -p.etpr, -p.threshold))
    kept = []
    best = -1.0
    for p in ordered:
        if p.etpr > best:
            kept.append(p)
            best = p.etpr
    return kept


def roc_points(
    detections_by_threshold: Mapping[float, Sequence[EventLabel]],
    ground_truth: Sequence[EventLabel],
    params: PsdsParams,
    total_duration: float,
) -> tuple:
    """Penalized operating points, upper-enveloped along increasing eFPR.

    Per threshold: per-class TPR over classes with ground truth, effective TPR
    = mean TPR - alpha_ct * mean cross-trigger rate - alpha_st * population
    std of per-class TPR (floored at 0), and eFPR = total false positives per
    unit duration. The mean cross-trigger rate divides the total cross-trigger
    count by the number of ordered pairs of classes with ground truth, per
    unit duration. Detection classes without any ground truth are excluded
    from the rate averages; returns (points, warnings) recording them.
    """
    if total_duration <= 0:
        raise EvalError("total_duration must be positive")
    gt_totals = Counter(g.klass for g in ground_truth)
    gt_classes = sorted(gt_totals)
    det_classes = {
        d.klass for dets in detections_by_threshold.values() for d in dets
    }
    warnings = tuple(
        f"class {klass!r} has detections but no ground truth; "
        "excluded from rate averages"
        for klass in sorted(det_classes - set(gt_totals))
    )
    for message in warnings:
        logger.warning(message)

    n_pairs = len(gt_classes) * (len(gt_classes) - 1)
    raw = []
    for threshold in sorted(detections_by_threshold, reverse=True):
        counts = match_events(
            detections_by_threshold[threshold],
            ground_truth,
            params.rho_dtc,
            params.rho_gtc,
            params.rho_cttc,
        )
        tpr = {k: counts.tp.get(k, 0) / gt_totals[k] for k in gt_classes}
        rates = np.array([tpr[k] for k in gt_classes], dtype=np.float64)
        mean_tpr = float(rates.mean()) if gt_classes else 0.0
        std_tpr = float(rates.std()) if gt_classes else 0.0
        total_ct = sum(counts.ct.values())
        ct_rate = total_ct / n_pairs / total_duration if n_pairs else 0.0
        etpr = max(
            0.0, mean_tpr - params.alpha_ct * ct_rate - params.alpha_st * std_tpr
        )
        efpr = sum(counts.fp.values()) / total_duration
        raw.append(
            OperatingPoint(
                float(threshold), counts.tp, counts.fp, counts.ct, tpr, etpr, efpr
            )
        )
    return _upper_envelope(raw), warnings


def _class_curves(points: Sequence[OperatingPoint]) -> dict:
    classes = sorted({k for p in points for k in p.tpr})
    return {
        klass: tuple((p.efpr, p.tpr.get(klass, 0.0)) for p in points)
        for klass in classes
    }


def psds(
    roc: Sequence[OperatingPoint],
    params: PsdsParams,
    scenario: str = "",
    warnings: tuple = (),
) -> PsdsReport:
    """Normalized area under the enveloped eTPR-vs-eFPR staircase on [0, e_max].

    The curve is zero left of the first point, holds each point's eTPR until
    the next point, and holds the last point's eTPR out to e_max; area is
    divided by e_max and clamped to [0, 1].
    """
    if not roc:
        raise EvalError("roc must be nonempty")
    points = _upper_envelope(roc)
    area = 0.0
    for i, p in enumerate(points):
        left = min(p.efpr, params.e_max)
        if i + 1 < len(points):
            right = min(points[i + 1].efpr, params.e_max)
        else:
            right = params.e_max
        area += p.etpr * (right - left)
    score = min(1.0, max(0.0, area / params.e_max))
    return PsdsReport(
        scenario, score, _class_curves(points), params, tuple(points), warnings
    )


def evaluate_system(
    posteriors: Mapping[str, np.ndarray],
    ground_truth: Sequence[EventLabel],
    hop_seconds: float,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    filter_lengths: FilterLengths | None = None,
    params1: PsdsParams | None = None,
    params2: PsdsParams | None = None,
    clip_seconds: float = 10.0,
    class_order: Sequence[str] = EVENT_CLASSES,
) -> tuple:
    """Score frame posteriors under both scenarios; returns (r1, r2, total).

    posteriors maps clip id to a (frames, classes) probability matrix. Each
    threshold is decoded once (binarize, per-class median filter, run
    extraction) and the detections are shared by both parameterizations.
    """
    if not thresholds:
        raise EvalError("threshold grid must be nonempty")
    params1 = params1 if params1 is not None else scenario1()
    params2 = params2 if params2 is not None else scenario2()
    lengths = filter_lengths if filter_lengths is not None else FilterLengths({})
    total_duration = len(posteriors) * clip_seconds

    detections_by_threshold = {}
    for threshold in sorted({float(t) for t in thresholds}, reverse=True):
        detections = []
        for clip_id in sorted(posteriors):
            detections.extend(
                decode_clip(
                    posteriors[clip_id],
                    clip_id,
                    threshold,
                    lengths,
                    hop_seconds,
                    clip_seconds=clip_seconds,
                    class_order=class_order,
                )
            )
        detections_by_threshold[threshold] = detections

    points1, warn1 = roc_points(
        detections_by_threshold, ground_truth, params1, total_duration
    )
    points2, warn2 = roc_points(
        detections_by_threshold, ground_truth, params2, total_duration
    )
    report1 = psds(points1, params1, scenario="scenario1", warnings=warn1)
    report2 = psds(points2, params2, scenario="scenario2", warnings=warn2)
    return report1, report2, report1.score + report2.score


def write_report_json(reports: Sequence[PsdsReport], path) -> None:
    """Scores, parameter echoes, warnings, and per-class curves as JSON."""
    payload = {
        report.scenario: {
            "score": report.score,
            "params": asdict(report.params),
            "warnings": list(report.warnings),
            "curves": {
                klass: [[float(e), float(t)] for e, t in curve]
                for klass, curve in report.curves.items()
            },
        }
        for report in reports
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_operating_points_csv(reports: Sequence[PsdsReport], path) -> None:
    """Flat per-point table: threshold, rates, and total counts per scenario."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scenario", "threshold", "efpr", "etpr", "tp", "fp", "ct"])
        for report in reports:
            for p in report.points:
                writer.writerow(
                    [
                        report.scenario,
                        f"{p.threshold:.10g}",
                        f"{p.efpr:.10g}",
                        f"{p.etpr:.10g}",
                        sum(p.tp.values()),
                        sum(p.fp.values()),
                        sum(p.ct.values()),
                    ]
                )
