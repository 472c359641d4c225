"""Structured run configuration loaded from a TOML file.

One file drives every pipeline stage. Each section maps onto the config
dataclass of the module it belongs to, every key is optional (module
defaults apply), unknown sections or keys are rejected, and the module
validators run again at load time so a config file can never smuggle in a
value the module itself would refuse. Cross-section consistency (the model
must consume the mel resolution the frontend produces, the sweep grid must
be a valid plan) is checked here because no single module can see it.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

from .audiogen import GenConfig
from .evaluation import DEFAULT_THRESHOLDS
from .experiments import ExperimentPlan
from .frontend import FrontendConfig
from .model import ModelConfig
from .postprocess import DEFAULT_FILTER_CANDIDATES
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PostprocessSettings:
    """Decoding and filter-search knobs."""

    candidates: tuple = DEFAULT_FILTER_CANDIDATES
    threshold: float = 0.5
    rho: float = 0.7

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise ConfigError("candidates must be nonempty")
        for w in self.candidates:
            if w < 1 or w % 2 == 0:
                raise ConfigError(f"filter candidates must be odd and >= 1, got {w}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")


@dataclass(frozen=True)
class EvalSettings:
    """Score-curve knobs; scenario parameters themselves are standardized."""

    thresholds: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(self.thresholds))
        if not self.thresholds:
            raise ConfigError("thresholds must be nonempty")
        for t in self.thresholds:
            if not 0.0 < t < 1.0:
                raise ConfigError(f"thresholds must lie in (0, 1), got {t}")


@dataclass(frozen=True)
class SweepSettings:
    """The experiment grid; validated by building a plan at load time."""

    alphas: tuple = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    taxonomies: tuple = ("proposed", "randomized")
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(self.alphas))
        object.__setattr__(self, "taxonomies", tuple(self.taxonomies))
        object.__setattr__(self, "seeds", tuple(self.seeds))


@dataclass(frozen=True)
class RunConfig:
    audiogen: GenConfig = GenConfig()
    frontend: FrontendConfig = FrontendConfig()
    model: ModelConfig = ModelConfig()
    training: TrainConfig = TrainConfig()
    postprocess: PostprocessSettings = PostprocessSettings()
    eval: EvalSettings = EvalSettings()
    experiments: SweepSettings = SweepSettings()

    def __post_init__(self):
        if self.model.mel_bins != self.frontend.mel_bins:
            raise ConfigError(
                f"model.mel_bins ({self.model.mel_bins}) must equal "
                f"frontend.mel_bins ({self.frontend.mel_bins})"
            )
        self.plan()  # re-validates the sweep grid

    def plan(self) -> ExperimentPlan:
        return ExperimentPlan(
            self.training,
            alphas=self.experiments.alphas,
            taxonomies=self.experiments.taxonomies,
            seeds=self.experiments.seeds,
        )

    def with_training(self, **overrides) -> "RunConfig":
        return replace(self, training=replace(self.training, **overrides))


_SECTIONS = {
    "audiogen": GenConfig,
    "frontend": FrontendConfig,
    "model": ModelConfig,
    "training": TrainConfig,
    "postprocess": PostprocessSettings,
    "eval": EvalSettings,
    "experiments": SweepSettings,
}


def _tupled(value):
    """TOML arrays arrive as lists; configs store tuples (hashable, frozen)."""
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build_section(name: str, cls, raw: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**{k: _tupled(v) for k, v in raw.items()})
    except ValueError as err:
        raise ConfigError(f"invalid [{name}] config: {err}") from err


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run config; missing sections use defaults."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}")
    unknown = sorted(set(data) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
    for name, raw in data.items():
        if not isinstance(raw, dict):
            raise ConfigError(f"top-level key {name!r} must be a [{name}] section")
    sections = {
        name: _build_section(name, cls, data.get(name, {}))
        for name, cls in _SECTIONS.items()
    }
    try:
        return RunConfig(**sections)
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(str(err)) from err
