"""Event vocabulary, high-level class groupings, label projection, duration audits.

Ten domestic sound-event classes are grouped into four coarse classes (A..D)
according to shared acoustic character: A quasi-stationary machine noise,
B noise with impulsive overlay, C pitch-varying vocalizations, D short stable
high-pitched sounds. Two built-in groupings exist: the "proposed" one, which
keeps acoustically similar events together, and a "randomized" control that
deliberately scatters them.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

EVENT_CLASSES = (
    "Alarm_bell_ringing",
    "Blender",
    "Cat",
    "Dishes",
    "Dog",
    "Electric_shaver_toothbrush",
    "Frying",
    "Running_water",
    "Speech",
    "Vacuum_cleaner",
)

ACC_CLASSES = ("A", "B", "C", "D")

# Default split between long and short mean event duration, midpoint of the
# observed >4s / <2s gap. Overridable wherever duration_category is called.
LONG_SHORT_THRESHOLD_S = 3.0


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy tables or lookups of unknown maps."""


@dataclass(frozen=True)
class EventLabel:
    """A strong annotation: one event instance with its temporal extent."""

    clip_id: str
    klass: str
    onset: float
    offset: float

    def __post_init__(self):
        if self.onset < 0:
            raise ValueError(f"onset must be >= 0, got {self.onset}")
        if self.offset <= self.onset:
            raise ValueError(
                f"offset must be > onset, got [{self.onset}, {self.offset}]"
            )

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class AccLabel:
    """An interval labeled with a high-level acoustic-characteristic class."""

    clip_id: str
    klass: str
    onset: float
    offset: float

    def __post_init__(self):
        if self.onset < 0 or self.offset <= self.onset:
            raise ValueError(
                f"bad interval [{self.onset}, {self.offset}] for {self.klass}"
            )


@dataclass(frozen=True)
class TaxonomyMap:
    """Total mapping from event classes onto a smaller set of group classes."""

    name: str
    mapping: Mapping[str, str] = field(hash=False)

    def __post_init__(self):
        object.__setattr__(self, "mapping", dict(self.mapping))

    def __call__(self, klass: str) -> str:
        try:
            return self.mapping[klass]
        except KeyError:
            raise TaxonomyError(f"{self.name!r} has no entry for class {klass!r}")

    def groups(self) -> dict[str, tuple[str, ...]]:
        """Preimages keyed by group class, each sorted for stable output."""
        out: dict[str, list[str]] = {}
        for event, acc in self.mapping.items():
            out.setdefault(acc, []).append(event)
        return {acc: tuple(sorted(events)) for acc, events in sorted(out.items())}


def _validate_event_taxonomy(tmap: TaxonomyMap) -> TaxonomyMap:
    missing = [c for c in EVENT_CLASSES if c not in tmap.mapping]
    extra = [c for c in tmap.mapping if c not in EVENT_CLASSES]
    if missing or extra:
        raise TaxonomyError(
            f"taxonomy {tmap.name!r} must cover exactly the {len(EVENT_CLASSES)} "
            f"event classes (missing={missing}, unknown={extra})"
        )
    bad_targets = sorted(set(tmap.mapping.values()) - set(ACC_CLASSES))
    if bad_targets:
        raise TaxonomyError(f"unknown group classes {bad_targets} in {tmap.name!r}")
    empty = [a for a in ACC_CLASSES if a not in set(tmap.mapping.values())]
    if empty:
        raise TaxonomyError(f"group classes {empty} have no members in {tmap.name!r}")
    return tmap


def proposed_map() -> TaxonomyMap:
    """The characteristic-aligned grouping of the ten event classes."""
    return _validate_event_taxonomy(
        TaxonomyMap(
            "proposed",
            {
                "Vacuum_cleaner": "A",
                "Frying": "A",
                "Blender": "A",
                "Electric_shaver_toothbrush": "B",
                "Running_water": "B",
                "Speech": "C",
                "Dog": "C",
                "Cat": "C",
                "Dishes": "D",
                "Alarm_bell_ringing": "D",
            },
        )
    )


def randomized_map() -> TaxonomyMap:
    """Control grouping that keeps similar events in separate group classes."""
    return _validate_event_taxonomy(
        TaxonomyMap(
            "randomized",
            {
                "Alarm_bell_ringing": "A",
                "Blender": "A",
                "Electric_shaver_toothbrush": "A",
                "Vacuum_cleaner": "B",
                "Dog": "B",
                "Dishes": "C",
                "Frying": "C",
                "Speech": "C",
                "Running_water": "D",
                "Cat": "D",
            },
        )
    )


BUILTIN_MAPS = {"proposed": proposed_map, "randomized": randomized_map}


def resolve_taxonomy(spec: str) -> TaxonomyMap:
    """Look up a built-in map by name, or load one from a TSV path."""
    if spec in BUILTIN_MAPS:
        return BUILTIN_MAPS[spec]()
    path = Path(spec)
    if path.exists():
        return load_taxonomy(path)
    raise TaxonomyError(
        f"unknown taxonomy {spec!r}: not one of {sorted(BUILTIN_MAPS)} and no such file"
    )


def save_taxonomy(tmap: TaxonomyMap, path: str | Path) -> None:
    lines = [f"{event}\t{acc}" for event, acc in sorted(tmap.mapping.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def load_taxonomy(path: str | Path, name: str | None = None) -> TaxonomyMap:
    path = Path(path)
    mapping: dict[str, str] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise TaxonomyError(f"{path}:{ln}: expected 'event<TAB>group', got {line!r}")
        event, acc = parts[0].strip(), parts[1].strip()
        if event in mapping:
            raise TaxonomyError(f"{path}:{ln}: duplicate entry for {event!r}")
        mapping[event] = acc
    return _validate_event_taxonomy(TaxonomyMap(name or path.stem, mapping))


def project_labels(labels: Iterable[EventLabel], tmap: TaxonomyMap) -> list[AccLabel]:
    """Relabel event intervals with their group class and merge overlaps.

    Within one clip, intervals of the same group class that overlap or touch
    are merged into a single maximal interval. Output is sorted by
    (clip_id, onset, klass).
    """
    by_group: dict[tuple[str, str], list[tuple[float, float]]] = {}
    for lab in labels:
        by_group.setdefault((lab.clip_id, tmap(lab.klass)), []).append(
            (lab.onset, lab.offset)
        )

    out: list[AccLabel] = []
    for (clip_id, acc), intervals in by_group.items():
        intervals.sort()
        merged = [list(intervals[0])]
        for onset, offset in intervals[1:]:
            if onset <= merged[-1][1]:  # overlap or touch
                merged[-1][1] = max(merged[-1][1], offset)
            else:
                merged.append([onset, offset])
        out.extend(AccLabel(clip_id, acc, a, b) for a, b in merged)
    out.sort(key=lambda l: (l.clip_id, l.onset, l.klass))
    return out


@dataclass(frozen=True)
class DurationStats:
    mean: float
    median: float
    count: int
    category: str

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("stats require at least one label")
        if self.mean <= 0 or self.median <= 0:
            raise ValueError("durations must be positive")


def duration_category(mean: float, threshold: float = LONG_SHORT_THRESHOLD_S) -> str:
    """'Long' iff the mean duration reaches the threshold, else 'Short'."""
    if mean <= 0:
        raise ValueError(f"mean duration must be > 0, got {mean}")
    return "Long" if mean >= threshold else "Short"


def duration_statistics(
    labels: Iterable[EventLabel], threshold: float = LONG_SHORT_THRESHOLD_S
) -> dict[str, DurationStats]:
    """Per-class mean/median duration and the Long/Short category."""
    durs: dict[str, list[float]] = {}
    for lab in labels:
        durs.setdefault(lab.klass, []).append(lab.duration)
    out = {}
    for klass, values in durs.items():
        mean = sum(values) / len(values)
        out[klass] = DurationStats(
            mean=mean,
            median=statistics.median(values),
            count=len(values),
            category=duration_category(mean, threshold),
        )
    return out
