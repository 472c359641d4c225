"""From frame posteriors to discrete events.

Pipeline order: threshold each class's probability track, smooth the binary
track with a class-wise centered median filter (zero-padded borders), then
decode maximal runs of ones into events. The per-class filter length is
found by exhaustive search over a candidate grid against an intersection-F1
surrogate on validation data.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .taxonomy import EVENT_CLASSES, EventLabel

DEFAULT_FILTER_CANDIDATES = tuple(range(1, 42, 2))


class PostprocessError(ValueError):
    pass


@dataclass(frozen=True)
class BinarySequence:
    """One class's 0/1 activity track at a fixed frame rate."""

    values: np.ndarray
    hop_seconds: float

    def __post_init__(self):
        if self.hop_seconds <= 0:
            raise PostprocessError("hop_seconds must be positive")
        vals = np.asarray(self.values)
        if vals.ndim != 1 or not np.isin(vals, (0, 1)).all():
            raise PostprocessError("values must be a 1-D binary sequence")


def binarize(probs: np.ndarray, thresholds, hop_seconds: float) -> list[BinarySequence]:
    """Per-class activity: 1 iff probability >= that class's threshold."""
    probs = np.asarray(probs)
    taus = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (probs.shape[1],))
    if np.any(taus <= 0) or np.any(taus >= 1):
        raise PostprocessError("thresholds must lie in (0, 1)")
    return [
        BinarySequence((probs[:, c] >= taus[c]).astype(np.int8), hop_seconds)
        for c in range(probs.shape[1])
    ]


def median_filter(seq: BinarySequence, window: int) -> BinarySequence:
    """Centered binary median with zero-padded borders; window must be odd.

    For a binary track the median over an odd window is 1 exactly when more
    than half the window is 1, so a zero-padded moving count does it.
    (scipy.ndimage.median_filter reads out of bounds for int8 input when the
    window exceeds the sequence length, hence no scipy here.)
    """
    if window < 1 or window % 2 == 0:
        raise PostprocessError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return seq
    padded = np.pad(np.asarray(seq.values, dtype=np.int64), window // 2)
    counts = np.convolve(padded, np.ones(window, dtype=np.int64), mode="valid")
    return BinarySequence((counts > window // 2).astype(np.int8), seq.hop_seconds)


def decode_events(
    seq: BinarySequence,
    clip_id: str,
    klass: str,
    clip_seconds: float | None = None,
) -> list[EventLabel]:
    """Maximal runs of ones become events; offsets clipped to the clip end."""
    values = seq.values
    limit = clip_seconds if clip_seconds is not None else len(values) * seq.hop_seconds
    edges = np.diff(np.concatenate([[0], values, [0]]))
    onsets = np.where(edges == 1)[0]
    offsets = np.where(edges == -1)[0]
    events = []
    for first, stop in zip(onsets, offsets):
        onset = first * seq.hop_seconds
        offset = min(stop * seq.hop_seconds, limit)
        if offset > onset:
            events.append(EventLabel(clip_id, klass, onset, offset))
    return events


def rasterize_events(
    events: Iterable[EventLabel],
    hop_seconds: float,
    n_frames: int,
    class_order: Sequence[str] = EVENT_CLASSES,
) -> np.ndarray:
    """Binary (frames x classes) activity: frames floor(onset/h) .. ceil(offset/h)-1.

    Frame indices get 1e-9 frames of slack so that times produced as k * h
    (whose quotient by h can land a few ulps off k) snap back onto the grid;
    without it, decode-then-rasterize drifts by one frame on long clips.
    """
    index = {k: i for i, k in enumerate(class_order)}
    grid = np.zeros((n_frames, len(class_order)), dtype=np.int8)
    for ev in events:
        first = int(np.floor(ev.onset / hop_seconds + 1e-9))
        stop = int(np.ceil(ev.offset / hop_seconds - 1e-9))
        grid[max(0, first) : min(n_frames, stop), index[ev.klass]] = 1
    return grid


@dataclass(frozen=True)
class FilterLengths:
    """Per-class odd median window, in frames."""

    windows: Mapping[str, int]

    def __post_init__(self):
        object.__setattr__(self, "windows", dict(self.windows))
        for klass, w in self.windows.items():
            if w < 1 or w % 2 == 0:
                raise PostprocessError(f"window for {klass} must be odd >= 1, got {w}")

    def __getitem__(self, klass: str) -> int:
        return self.windows.get(klass, 1)

    @staticmethod
    def uniform(window: int, class_order: Sequence[str] = EVENT_CLASSES) -> "FilterLengths":
        return FilterLengths({k: window for k in class_order})


def save_filter_lengths(path: str | Path, lengths: FilterLengths) -> None:
    lines = [f"{k}\t{w}" for k, w in sorted(lengths.windows.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_filter_lengths(path: str | Path) -> FilterLengths:
    windows = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        klass, w = line.split("\t")
        windows[klass] = int(w)
    return FilterLengths(windows)


def decode_clip(
    probs: np.ndarray,
    clip_id: str,
    thresholds,
    lengths: FilterLengths,
    hop_seconds: float,
    clip_seconds: float | None = None,
    class_order: Sequence[str] = EVENT_CLASSES,
) -> list[EventLabel]:
    """binarize -> class-wise median filter -> decode, for one clip."""
    events = []
    for seq, klass in zip(binarize(probs, thresholds, hop_seconds), class_order):
        smoothed = median_filter(seq, lengths[klass])
        events.extend(decode_events(smoothed, clip_id, klass, clip_seconds))
    return events


def _intersection_f1(
    detections: Sequence[EventLabel], truth: Sequence[EventLabel], rho: float
) -> float:
    """Intersection-criterion F1 for one class (inputs pre-filtered to it)."""

    def overlap(a: EventLabel, b: EventLabel) -> float:
        if a.clip_id != b.clip_id:
            return 0.0
        return max(0.0, min(a.offset, b.offset) - max(a.onset, b.onset))

    valid = [
        d for d in detections if sum(overlap(d, g) for g in truth) / d.duration >= rho
    ]
    tp = sum(
        1 for g in truth if sum(overlap(d, g) for d in valid) / g.duration >= rho
    )
    fp = len(detections) - len(valid)
    fn = len(truth) - tp
    if tp == fp == fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def search_filter_lengths(
    posteriors: Mapping[str, np.ndarray],
    ground_truth: Sequence[EventLabel],
    hop_seconds: float,
    candidates: Sequence[int] = DEFAULT_FILTER_CANDIDATES,
    threshold: float = 0.5,
    rho: float = 0.7,
    clip_seconds: float | None = None,
    class_order: Sequence[str] = EVENT_CLASSES,
) -> FilterLengths:
    """Exhaustive per-class window search maximizing intersection F1.

    Classes are searched independently; ties go to the smallest window, so
    the result does not depend on candidate order.
    """
    if not candidates:
        raise PostprocessError("candidate list is empty")
    grid = sorted(set(int(c) for c in candidates))
    if any(c < 1 or c % 2 == 0 for c in grid):
        raise PostprocessError(f"candidates must be odd and >= 1: {candidates}")

    chosen = {}
    for c_idx, klass in enumerate(class_order):
        truth = [g for g in ground_truth if g.klass == klass]
        tracks = {
            clip_id: binarize(probs, threshold, hop_seconds)[c_idx]
            for clip_id, probs in posteriors.items()
        }
        best_window, best_score = grid[0], -1.0
        for window in grid:
            detections = []
            for clip_id, seq in tracks.items():
                smoothed = median_filter(seq, window)
                detections.extend(decode_events(smoothed, clip_id, klass, clip_seconds))
            score = _intersection_f1(detections, truth, rho)
            if score > best_score:
                best_window, best_score = window, score
        chosen[klass] = best_window
    return FilterLengths(chosen)
