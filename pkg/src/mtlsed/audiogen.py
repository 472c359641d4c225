"""Deterministic synthetic soundscapes for desk-scale experiments.

Each of the ten event classes is synthesized by the archetype family of its
acoustic-characteristic group: quasi-stationary band noise (A), band noise
with random transients (B), harmonic tones with a moving pitch contour and
syllabic amplitude modulation (C), and short fixed-pitch high-frequency
bursts (D). Clips are 10 s mono at 16 kHz over a pink-noise background.

All generation is a pure function of (config, seed): every random draw goes
through a numpy Generator seeded from the (dataset seed, split index, clip
index) triple, so regenerating a dataset reproduces it byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.io import wavfile

from .taxonomy import EVENT_CLASSES, EventLabel, proposed_map

SAMPLE_RATE = 16000
CLIP_SECONDS = 10.0

SPLIT_ORDER = ("strong", "weak", "unlabeled", "validation")


class AudiogenError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    """Mono audio buffer with its rate. Samples must already be in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        peak = float(np.max(np.abs(self.samples))) if self.samples.size else 0.0
        if peak > 1.0 + 1e-9:
            raise AudiogenError(f"samples exceed [-1, 1] (peak {peak:.4f})")

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate


@dataclass(frozen=True)
class ArchetypeSpec:
    """Synthesis recipe for one event class."""

    klass: str
    family: str
    band: tuple[float, float]  # noise band or fundamental range, Hz
    duration_range: tuple[float, float]  # uniform sampling bounds, seconds


# Families follow the characteristic-aligned grouping: the synthesized audio
# must actually carry the acoustic character, whatever labels training uses.
ARCHETYPES: Mapping[str, ArchetypeSpec] = {
    "Vacuum_cleaner": ArchetypeSpec("Vacuum_cleaner", "StationaryNoise", (40.0, 1500.0), (4.0, 8.0)),
    "Frying": ArchetypeSpec("Frying", "StationaryNoise", (1000.0, 7500.0), (4.0, 8.0)),
    "Blender": ArchetypeSpec("Blender", "StationaryNoise", (300.0, 4000.0), (4.0, 8.0)),
    "Electric_shaver_toothbrush": ArchetypeSpec(
        "Electric_shaver_toothbrush", "NoisePlusImpulses", (200.0, 3000.0), (4.0, 8.0)
    ),
    "Running_water": ArchetypeSpec("Running_water", "NoisePlusImpulses", (500.0, 7800.0), (4.0, 8.0)),
    "Speech": ArchetypeSpec("Speech", "PitchContourTone", (120.0, 250.0), (0.3, 2.0)),
    "Dog": ArchetypeSpec("Dog", "PitchContourTone", (300.0, 600.0), (0.3, 2.0)),
    "Cat": ArchetypeSpec("Cat", "PitchContourTone", (400.0, 900.0), (0.3, 2.0)),
    "Dishes": ArchetypeSpec("Dishes", "StableHighTone", (2500.0, 6000.0), (0.3, 2.0)),
    "Alarm_bell_ringing": ArchetypeSpec("Alarm_bell_ringing", "StableHighTone", (2000.0, 3500.0), (0.3, 2.0)),
}

_FAMILY_OF_GROUP = {
    "A": "StationaryNoise",
    "B": "NoisePlusImpulses",
    "C": "PitchContourTone",
    "D": "StableHighTone",
}


def sample_duration(klass: str, rng: np.random.Generator, max_duration: float | None = None) -> float:
    lo, hi = ARCHETYPES[klass].duration_range
    if max_duration is not None:
        if max_duration < lo:
            raise AudiogenError(
                f"{klass} needs at least {lo} s but only {max_duration:.2f} s fit"
            )
        hi = min(hi, max_duration)
    return float(rng.uniform(lo, hi))


def _fade_edges(x: np.ndarray, sr: int, ms: float = 5.0) -> np.ndarray:
    n = min(int(sr * ms / 1000.0), x.shape[0] // 2)
    if n > 0:
        ramp = 0.5 - 0.5 * np.cos(np.linspace(0.0, np.pi, n))
        x[:n] *= ramp
        x[-n:] *= ramp[::-1]
    return x


def _band_noise(rng: np.random.Generator, n: int, sr: int, band: tuple[float, float]) -> np.ndarray:
    """Gaussian noise restricted to a frequency band via FFT masking."""
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    return np.fft.irfft(spec, n)


def _stationary_noise(rng, n, sr, spec: ArchetypeSpec) -> np.ndarray:
    return _band_noise(rng, n, sr, spec.band)


def _noise_plus_impulses(rng, n, sr, spec: ArchetypeSpec) -> np.ndarray:
    base = 0.4 * _rms_normalize(_band_noise(rng, n, sr, spec.band))
    duration = n / sr
    count = max(1, int(rng.poisson(5.0 * duration)))
    out = base.copy()
    for _ in range(count):
        burst_len = int(rng.uniform(0.010, 0.045) * sr)
        start = int(rng.uniform(0, max(1, n - burst_len)))
        burst = _band_noise(rng, burst_len, sr, (1000.0, 7000.0))
        burst = _rms_normalize(burst) * np.exp(-np.arange(burst_len) / (0.25 * burst_len))
        out[start : start + burst_len] += rng.uniform(1.2, 2.5) * burst
    return out


def _pitch_contour_tone(rng, n, sr, spec: ArchetypeSpec) -> np.ndarray:
    duration = n / sr
    t = np.arange(n) / sr
    f0 = rng.uniform(*spec.band)
    depth = rng.uniform(0.15, 0.25)
    # scale modulation rates up for short events so each event still contains
    # a full vibrato cycle and at least one syllabic null
    vib_rate = rng.uniform(3.0, 6.0) / min(1.0, duration)
    inst_f = f0 * (1.0 + depth * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(inst_f) / sr
    n_harm = max(1, min(10, int(7600.0 / (f0 * (1.0 + depth)))))
    tone = np.zeros(n)
    for k in range(1, n_harm + 1):
        tone += np.sin(k * phase + rng.uniform(0, 2 * np.pi)) / k
    syl_rate = rng.uniform(1.2, 2.5) / min(1.0, duration)
    env = 0.02 + 0.98 * (0.5 - 0.5 * np.cos(2 * np.pi * syl_rate * t + rng.uniform(0, 2 * np.pi)))
    return tone * env


def _stable_high_tone(rng, n, sr, spec: ArchetypeSpec) -> np.ndarray:
    t = np.arange(n) / sr
    f0 = rng.uniform(*spec.band)
    tone = np.sin(2 * np.pi * f0 * t) + 0.3 * np.sin(2 * np.pi * 2 * f0 * t + rng.uniform(0, 2 * np.pi))
    gate = np.zeros(n)
    if spec.klass == "Alarm_bell_ringing":
        # regular on/off beeping
        on = int(rng.uniform(0.12, 0.25) * sr)
        off = int(rng.uniform(0.06, 0.15) * sr)
        pos = 0
        while pos < n:
            seg = min(on, n - pos)
            gate[pos : pos + seg] = 1.0
            pos += on + off
    else:
        # a few decaying clinks at random positions
        for _ in range(int(rng.integers(1, 5))):
            burst_len = min(n, int(rng.uniform(0.04, 0.15) * sr))
            start = int(rng.uniform(0, max(1, n - burst_len)))
            decay = np.exp(-np.arange(burst_len) / (0.2 * burst_len))
            gate[start : start + burst_len] = np.maximum(gate[start : start + burst_len], decay)
    return tone * gate


_SYNTHESIZERS = {
    "StationaryNoise": _stationary_noise,
    "NoisePlusImpulses": _noise_plus_impulses,
    "PitchContourTone": _pitch_contour_tone,
    "StableHighTone": _stable_high_tone,
}


def _rms_normalize(x: np.ndarray, target: float = 1.0) -> np.ndarray:
    rms = float(np.sqrt(np.mean(np.square(x))))
    return x * (target / rms) if rms > 0 else x


def _peak_normalize(x: np.ndarray, target: float = 0.9) -> np.ndarray:
    peak = float(np.max(np.abs(x)))
    return x * (target / peak) if peak > 0 else x


def synth_event(klass: str, duration: float, seed) -> Waveform:
    """Synthesize one isolated event of the class's archetype family.

    Parameters
    ----------
    klass : one of EVENT_CLASSES
    duration : seconds, within [0.25, 10.0]
    seed : int or sequence of ints for numpy's default_rng

    Returns a peak-normalized Waveform of round(duration * 16000) samples.
    """
    if klass not in ARCHETYPES:
        raise AudiogenError(f"unknown event class {klass!r}")
    if not 0.25 <= duration <= 10.0:
        raise AudiogenError(f"duration {duration} outside [0.25, 10.0] s")
    rng = np.random.default_rng(seed)
    spec = ARCHETYPES[klass]
    n = int(round(duration * SAMPLE_RATE))
    x = _SYNTHESIZERS[spec.family](rng, n, SAMPLE_RATE, spec)
    x = _fade_edges(_peak_normalize(x), SAMPLE_RATE)
    return Waveform(x, SAMPLE_RATE)


def pink_noise(n: int, rng: np.random.Generator, rms: float) -> np.ndarray:
    """1/f-shaped noise scaled to the requested RMS."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n)
    spec[0] = 0.0
    spec[1:] /= np.sqrt(freqs[1:])
    x = np.fft.irfft(spec, n)
    return _rms_normalize(x, rms)


def _clip_mix(
    events: Sequence[tuple[str, float]],
    background_level: float,
    seed,
    clip_seconds: float = CLIP_SECONDS,
):
    """Build the raw (pre-normalization) mix. Returns (mix, labels, parts).

    parts holds (label, gain, samples, start index) per event so callers can
    audit the mix; synth_clip discards it.
    """
    rng = np.random.default_rng(seed)
    n = int(round(clip_seconds * SAMPLE_RATE))
    mix = pink_noise(n, rng, 10.0 ** (background_level / 20.0))
    labels, parts = [], []
    for klass, onset in events:
        if onset < 0:
            raise AudiogenError(f"negative onset {onset}")
        duration = sample_duration(klass, rng, max_duration=clip_seconds - onset)
        gain = float(rng.uniform(0.25, 0.8))
        event_seed = int(rng.integers(0, 2**31))
        wave = synth_event(klass, duration, event_seed)
        start = int(round(onset * SAMPLE_RATE))
        stop = start + wave.samples.shape[0]
        if stop > n:  # rounding pushed past the end; trim the last samples
            stop = n
        mix[start:stop] += gain * wave.samples[: stop - start]
        labels.append(EventLabel("", klass, onset, onset + duration))
        parts.append((labels[-1], gain, wave.samples, start))
    labels.sort(key=lambda l: (l.onset, l.klass))
    return mix, labels, parts


def synth_clip(
    events: Sequence[tuple[str, float]],
    background_level: float = -30.0,
    seed=0,
    clip_seconds: float = CLIP_SECONDS,
) -> tuple[Waveform, list[EventLabel]]:
    """Mix events over a pink-noise bed into one fixed-length clip.

    Event durations are sampled from each class's duration range, truncated
    so the event fits in the clip. Peak normalization is applied only when
    the mix exceeds full scale, then samples are hard-clipped to [-1, 1].
    """
    mix, labels, _ = _clip_mix(events, background_level, seed, clip_seconds)
    peak = float(np.max(np.abs(mix)))
    if peak > 1.0:
        mix = mix / peak
    return Waveform(np.clip(mix, -1.0, 1.0), SAMPLE_RATE), labels


@dataclass(frozen=True)
class GenConfig:
    """Split sizes and mixing knobs for dataset generation."""

    strong: int = 200
    weak: int = 50
    unlabeled: int = 300
    validation: int = 80
    background_dbfs: float = -30.0
    max_polyphony: int = 3
    clip_seconds: float = CLIP_SECONDS

    def __post_init__(self):
        for name in SPLIT_ORDER:
            if getattr(self, name) < 1:
                raise AudiogenError(f"split {name!r} needs at least 1 clip")
        if self.max_polyphony < 1:
            raise AudiogenError("max_polyphony must be >= 1")

    def count(self, split: str) -> int:
        return getattr(self, split)


@dataclass(frozen=True)
class DatasetManifest:
    split: str
    clips: tuple[str, ...]
    events: tuple[EventLabel, ...] = ()
    weak_tags: Mapping[str, tuple[str, ...]] = field(default_factory=dict, hash=False)
    sidecar: str | None = None

    def __post_init__(self):
        if len(set(self.clips)) != len(self.clips):
            raise AudiogenError(f"duplicate clip ids in split {self.split!r}")


def _plan_clip(dataset_seed: int, split_idx: int, clip_idx: int, cfg: GenConfig):
    """Draw the event placements and mixing seed for one clip."""
    rng = np.random.default_rng([dataset_seed, split_idx, clip_idx])
    n_events = int(rng.integers(1, cfg.max_polyphony + 1))
    events = []
    for _ in range(n_events):
        klass = EVENT_CLASSES[int(rng.integers(len(EVENT_CLASSES)))]
        latest = cfg.clip_seconds - ARCHETYPES[klass].duration_range[0]
        events.append((klass, float(rng.uniform(0.0, latest))))
    return events, int(rng.integers(0, 2**31))


def _generate_clip(dataset_seed: int, split_idx: int, clip_idx: int, cfg: GenConfig):
    events, clip_seed = _plan_clip(dataset_seed, split_idx, clip_idx, cfg)
    return synth_clip(events, cfg.background_dbfs, clip_seed, cfg.clip_seconds)


def write_wav(path: str | Path, wave: Waveform) -> None:
    pcm = np.round(np.clip(wave.samples, -1.0, 1.0) * 32767.0).astype(np.int16)
    wavfile.write(str(path), wave.sample_rate, pcm)


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        samples = data.astype(np.float64)
    return Waveform(samples, int(rate))


def generate_dataset(out_dir: str | Path, config: GenConfig | None = None, seed: int = 0):
    """Write audio plus manifests for all four splits; return the manifests.

    Layout: audio/<split>/<split>_<idx>.wav and metadata/<split>.tsv.
    The unlabeled split's manifest lists filenames only; its true labels go
    to metadata/unlabeled_groundtruth.tsv for diagnostics.
    """
    cfg = config or GenConfig()
    out_dir = Path(out_dir)
    manifests: dict[str, DatasetManifest] = {}
    for split_idx, split in enumerate(SPLIT_ORDER):
        audio_dir = out_dir / "audio" / split
        audio_dir.mkdir(parents=True, exist_ok=True)
        clips, all_events = [], []
        weak_tags: dict[str, tuple[str, ...]] = {}
        for clip_idx in range(cfg.count(split)):
            wave, labels = _generate_clip(seed, split_idx, clip_idx, cfg)
            rel = f"audio/{split}/{split}_{clip_idx:04d}.wav"
            write_wav(out_dir / rel, wave)
            clips.append(rel)
            labeled = [EventLabel(rel, l.klass, l.onset, l.offset) for l in labels]
            all_events.extend(labeled)
            weak_tags[rel] = tuple(sorted({l.klass for l in labeled}))

        meta_dir = out_dir / "metadata"
        meta_dir.mkdir(parents=True, exist_ok=True)
        sidecar = None
        if split == "weak":
            write_weak_tsv(meta_dir / "weak.tsv", weak_tags)
            manifests[split] = DatasetManifest(split, tuple(clips), (), weak_tags)
        elif split == "unlabeled":
            write_unlabeled_tsv(meta_dir / "unlabeled.tsv", clips)
            sidecar = "metadata/unlabeled_groundtruth.tsv"
            write_strong_tsv(out_dir / sidecar, all_events)
            manifests[split] = DatasetManifest(split, tuple(clips), (), {}, sidecar)
        else:
            write_strong_tsv(meta_dir / f"{split}.tsv", all_events)
            manifests[split] = DatasetManifest(split, tuple(clips), tuple(all_events))
    return manifests


def write_strong_tsv(path: str | Path, events: Iterable[EventLabel]) -> None:
    lines = ["filename\tonset\toffset\tevent_label"]
    for e in sorted(events, key=lambda l: (l.clip_id, l.onset, l.offset, l.klass)):
        lines.append(f"{e.clip_id}\t{e.onset:.3f}\t{e.offset:.3f}\t{e.klass}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_strong_tsv(path: str | Path) -> list[EventLabel]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("filename\t"):
            continue
        clip_id, onset, offset, klass = line.split("\t")
        out.append(EventLabel(clip_id, klass, float(onset), float(offset)))
    return out


def write_weak_tsv(path: str | Path, tags: Mapping[str, Sequence[str]]) -> None:
    lines = ["filename\tevent_labels"]
    for clip_id in sorted(tags):
        lines.append(f"{clip_id}\t{','.join(sorted(tags[clip_id]))}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_weak_tsv(path: str | Path) -> dict[str, tuple[str, ...]]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("filename\t"):
            continue
        clip_id, labels = line.split("\t")
        out[clip_id] = tuple(labels.split(",")) if labels else ()
    return out


def write_unlabeled_tsv(path: str | Path, clips: Sequence[str]) -> None:
    Path(path).write_text("\n".join(["filename", *clips]) + "\n")


def read_unlabeled_tsv(path: str | Path) -> list[str]:
    return [
        line
        for line in Path(path).read_text().splitlines()
        if line.strip() and line != "filename"
    ]
