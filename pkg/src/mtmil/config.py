"""Run configuration: one TOML file with sections, plus ``section.key=value`` overrides."""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, StoreIo
from .mil_net import TrainConfig
from .synthgen import SynthConfig


@dataclass(frozen=True)
class TargetConfig:
    min_positives: int = 20
    overrides: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "overrides", tuple(str(t) for t in self.overrides))
        if self.min_positives < 1:
            raise ConfigError("min_positives must be >= 1")


@dataclass(frozen=True)
class SplitConfig:
    k: int = 5
    seed: int = 0
    temporal_fraction: float = 0.2

    def __post_init__(self):
        if self.k < 3:
            raise ConfigError("k must be >= 3 to give train, selection and test folds")
        if not 0 <= self.temporal_fraction < 1:
            raise ConfigError("temporal_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class StatsConfig:
    bootstrap: int = 10_000
    level: float = 0.95
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.bootstrap < 1:
            raise ConfigError("bootstrap must be >= 1")
        if not 0 < self.level < 1 or not 0 < self.alpha < 1:
            raise ConfigError("level and alpha must lie in (0, 1)")


@dataclass(frozen=True)
class AnalysisConfig:
    top_fraction: float = 0.1
    attention_fold: int = 0
    probe_l2: float = 1e-2
    probe_test_fraction: float = 0.2
    probe_seed: int = 0

    def __post_init__(self):
        if not 0 < self.top_fraction <= 1:
            raise ConfigError("top_fraction must lie in (0, 1]")
        if self.probe_l2 < 0:
            raise ConfigError("probe_l2 must be nonnegative")
        if not 0 < self.probe_test_fraction < 1:
            raise ConfigError("probe_test_fraction must lie in (0, 1)")
        if self.attention_fold < 0:
            raise ConfigError("attention_fold must be >= 0")


SECTIONS = {
    "synth": SynthConfig,
    "targets": TargetConfig,
    "split": SplitConfig,
    "train": TrainConfig,
    "stats": StatsConfig,
    "analysis": AnalysisConfig,
}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    if hasattr(cls, "from_mapping"):
        return cls.from_mapping(values)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    targets: TargetConfig = field(default_factory=TargetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stats: StatsConfig = field(default_factory=StatsConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        parts = {}
        for name, section_cls in SECTIONS.items():
            sub = values.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"[{name}] must be a table")
            try:
                parts[name] = _build(section_cls, sub, name)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        return cls(**parts)

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() if hasattr(getattr(self, name), "to_dict") else asdict(getattr(self, name)) for name in SECTIONS}


def parse_override(text: str) -> tuple:
    """``section.key=value`` -> (section, key, value); the value is read as a TOML literal, else a string."""
    path, sep, raw = text.partition("=")
    section, dot, key = path.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key.strip(), value


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            values = tomllib.loads(Path(path).read_text())
        except OSError as exc:
            raise StoreIo(f"cannot read config {path}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    for text in overrides:
        section, key, value = parse_override(text)
        sub = values.setdefault(section, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"[{section}] must be a table")
        sub[key] = value
    return RunConfig.from_mapping(values)


def describe_defaults() -> str:
    """Every config key with its default, grouped by section, for ``--help``."""
    lines = ["configuration keys (TOML sections; override with --set section.key=value):"]
    defaults = RunConfig().to_dict()
    for section, values in defaults.items():
        lines.append(f"  [{section}]")
        for key, value in values.items():
            lines.append(f"    {section}.{key} = {_toml_value(value)}")
    return "\n".join(lines)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items()) + " }"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return repr(value)


def to_toml(config: RunConfig) -> str:
    out = []
    for section, values in config.to_dict().items():
        out.append(f"[{section}]")
        out += [f"{k} = {_toml_value(v)}" for k, v in values.items()]
        out.append("")
    return "\n".join(out)
