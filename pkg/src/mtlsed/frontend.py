"""Log-mel features and training-time augmentations.

The STFT uses a 2048-sample periodic Hann window with hop 256, centered via
reflect padding, so a clip of N samples yields ceil(N / hop) frames and frame
k maps to k * hop / sample_rate seconds. Mel filters are triangles on the
2595 * log10(1 + f/700) scale between 0 and 8 kHz, applied to the magnitude
spectrum, followed by a natural log with a 1e-10 floor. Normalization is a
single global mean/std fitted over the training set (per-bin available behind
a flag).

Augmentations operate in the log domain: SpecAugment zeroes fixed-width time
and frequency blocks at random positions, filter augmentation adds a random
piecewise-linear gain curve over the mel axis (dB gains become additive
offsets scaled by ln(10)/20).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import get_window

from .audiogen import Waveform

LOG_FLOOR = 1e-10
STD_EPSILON = 1e-8
_DB_TO_LOG = np.log(10.0) / 20.0


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    window: int = 2048
    hop: int = 256
    mel_bins: int = 128
    fmin: float = 0.0
    fmax: float = 8000.0
    per_bin_norm: bool = False

    def __post_init__(self):
        if self.mel_bins < 8:
            raise FrontendError(f"mel_bins must be >= 8, got {self.mel_bins}")
        if self.hop < 1 or self.window < 2:
            raise FrontendError("window/hop must be positive")

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(payload).hexdigest()


@dataclass(frozen=True)
class LogMel:
    values: np.ndarray  # frames x mel_bins
    hop: int
    sample_rate: int
    window: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FrontendError("non-finite feature values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "LogMel":
        return LogMel(values, self.hop, self.sample_rate, self.window)


@dataclass(frozen=True)
class NormStats:
    """Global (or per-bin) feature statistics. std is clamped away from 0."""

    mean: float | np.ndarray
    std: float | np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.std) < STD_EPSILON):
            raise FrontendError(f"std below epsilon {STD_EPSILON}")


@dataclass(frozen=True)
class AugmentPolicy:
    time_mask: tuple[int, int] = (2, 16)  # (count, width in frames)
    freq_mask: tuple[int, int] = (2, 8)  # (count, width in bins)
    filter_bands: tuple[int, int] = (2, 5)  # band count range, inclusive
    filter_gain_db: tuple[float, float] = (-6.0, 6.0)

    def __post_init__(self):
        if min(self.time_mask) < 0 or min(self.freq_mask) < 0:
            raise FrontendError("mask counts/widths must be >= 0")
        if self.filter_bands[0] < 1 or self.filter_bands[0] > self.filter_bands[1]:
            raise FrontendError(f"bad band count range {self.filter_bands}")
        if self.filter_gain_db[0] > self.filter_gain_db[1]:
            raise FrontendError(f"bad gain range {self.filter_gain_db}")

    @staticmethod
    def none() -> "AugmentPolicy":
        return AugmentPolicy((0, 0), (0, 0), (1, 1), (0.0, 0.0))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    mel_bins: int, n_fft: int, sample_rate: int, fmin: float, fmax: float
):
    """Triangular filters; returns (weights [mel_bins x fft_bins], centers_hz)."""
    fft_freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), mel_bins + 2))
    weights = np.zeros((mel_bins, fft_freqs.shape[0]))
    for k in range(mel_bins):
        lo, center, hi = edges[k], edges[k + 1], edges[k + 2]
        up = (fft_freqs - lo) / max(center - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - center, 1e-12)
        weights[k] = np.maximum(0.0, np.minimum(up, down))
    return weights, edges[1:-1]


def log_mel(wave: Waveform, config: FrontendConfig | None = None) -> LogMel:
    """Log-mel spectrogram with centered framing, frames = ceil(samples / hop)."""
    cfg = config or FrontendConfig()
    x = np.asarray(wave.samples, dtype=np.float64)
    if x.size == 0:
        raise FrontendError("empty waveform")
    if wave.sample_rate != cfg.sample_rate:
        raise FrontendError(
            f"expected {cfg.sample_rate} Hz input, got {wave.sample_rate}"
        )
    pad = cfg.window // 2
    if x.size <= pad:
        raise FrontendError(f"waveform too short for centered framing ({x.size} samples)")
    frames = int(np.ceil(x.size / cfg.hop))
    padded = np.pad(x, pad, mode="reflect")
    window = get_window("hann", cfg.window, fftbins=True)
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(frames)[:, None]
    mag = np.abs(np.fft.rfft(padded[idx] * window, axis=1))
    filters, _ = mel_filterbank(
        cfg.mel_bins, cfg.window, cfg.sample_rate, cfg.fmin, cfg.fmax
    )
    mel = mag @ filters.T
    return LogMel(np.log(mel + LOG_FLOOR), cfg.hop, cfg.sample_rate, cfg.window)


def fit_normalizer(features: Sequence[LogMel], per_bin: bool = False) -> NormStats:
    """Two-pass mean/std in float64 over every entry of the training set."""
    if not features:
        raise FrontendError("need at least one feature matrix")
    axis = 0 if per_bin else None
    stacked = np.concatenate([np.asarray(f.values, dtype=np.float64) for f in features])
    mean = stacked.mean(axis=axis)
    std = np.sqrt(np.mean(np.square(stacked - mean), axis=axis))
    std = np.maximum(std, STD_EPSILON)
    if per_bin:
        return NormStats(mean, std)
    return NormStats(float(mean), float(std))


def apply_normalizer(feature: LogMel, stats: NormStats) -> LogMel:
    return feature.with_values((feature.values - stats.mean) / stats.std)


def pad_or_truncate(feature: LogMel, target_frames: int) -> LogMel:
    if target_frames < 1:
        raise FrontendError(f"target_frames must be >= 1, got {target_frames}")
    values = feature.values
    if values.shape[0] >= target_frames:
        return feature.with_values(values[:target_frames])
    pad = np.zeros((target_frames - values.shape[0], values.shape[1]), values.dtype)
    return feature.with_values(np.concatenate([values, pad]))


def spec_augment(feature: LogMel, policy: AugmentPolicy, seed) -> LogMel:
    """Zero out fixed-width random-position time and frequency blocks."""
    values = feature.values.copy()
    frames, bins = values.shape
    t_count, t_width = policy.time_mask
    f_count, f_width = policy.freq_mask
    if t_width > frames or f_width > bins:
        raise FrontendError("mask width exceeds feature dimensions")
    rng = np.random.default_rng(seed)
    for _ in range(t_count if t_width > 0 else 0):
        start = int(rng.integers(0, frames - t_width + 1))
        values[start : start + t_width, :] = 0.0
    for _ in range(f_count if f_width > 0 else 0):
        start = int(rng.integers(0, bins - f_width + 1))
        values[:, start : start + f_width] = 0.0
    return feature.with_values(values)


def filter_augment(feature: LogMel, policy: AugmentPolicy, seed) -> LogMel:
    """Add a random piecewise-linear mel-axis gain curve (dB, log-additive)."""
    bins = feature.mel_bins
    rng = np.random.default_rng(seed)
    n_lo, n_hi = policy.filter_bands
    n = int(rng.integers(n_lo, n_hi + 1))
    n = min(n, bins)
    if n == 1:
        boundaries = np.array([0, bins])
    else:
        cuts = np.sort(rng.choice(np.arange(1, bins), size=n - 1, replace=False))
        boundaries = np.concatenate([[0], cuts, [bins]])
    gains_db = rng.uniform(policy.filter_gain_db[0], policy.filter_gain_db[1], size=n)
    centers = (boundaries[:-1] + boundaries[1:] - 1) / 2.0
    curve = np.interp(np.arange(bins), centers, gains_db) * _DB_TO_LOG
    return feature.with_values(feature.values + curve[None, :])


# ---- binary feature cache ---------------------------------------------------

_CACHE_MAGIC = b"LMF1"


def save_feature(path: str | Path, feature: LogMel) -> None:
    values = np.ascontiguousarray(feature.values, dtype="<f4")
    header = struct.pack(
        "<4sIIIII",
        _CACHE_MAGIC,
        values.shape[0],
        values.shape[1],
        feature.hop,
        feature.sample_rate,
        feature.window,
    )
    Path(path).write_bytes(header + values.tobytes())


def load_feature(path: str | Path) -> LogMel:
    blob = Path(path).read_bytes()
    magic, frames, bins, hop, rate, window = struct.unpack_from("<4sIIIII", blob)
    if magic != _CACHE_MAGIC:
        raise FrontendError(f"{path}: not a feature cache file")
    values = np.frombuffer(blob, dtype="<f4", offset=struct.calcsize("<4sIIIII"))
    return LogMel(values.reshape(frames, bins).astype(np.float64), hop, rate, window)


class FeatureCache:
    """On-disk cache keyed by (audio file digest, frontend config digest)."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, audio_path: str | Path, config: FrontendConfig) -> Path:
        clip_digest = hashlib.sha1(Path(audio_path).read_bytes()).hexdigest()
        return self.directory / f"{clip_digest[:20]}_{config.digest()[:20]}.lmf"

    def get_or_compute(self, audio_path: str | Path, config: FrontendConfig, reader) -> LogMel:
        """reader(audio_path) -> Waveform; called only on cache miss."""
        path = self._path(audio_path, config)
        if path.exists():
            return load_feature(path)
        feature = log_mel(reader(audio_path), config)
        save_feature(path, feature)
        return feature
