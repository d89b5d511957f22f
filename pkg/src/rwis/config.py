"""INI configuration with environment overrides.

Every section maps onto one settings dataclass; keys are the dataclass
field names. Any key can be overridden from the environment as
``RWIS_<SECTION>_<KEY>`` (upper case), e.g. ``RWIS_TRAIN_N_STAGES=200``.
Tuple-valued keys take comma-separated numbers. Unknown sections or keys
are rejected so typos do not pass silently.

Example::

    [train]
    n_stages = 100
    shrinkage = 0.1

    [column]
    depths = 0, 0.02, 0.05, 0.1, 0.15, 0.22, 0.3, 0.45, 0.65, 0.95, 1.4, 2.0
    asphalt = 1.2, 2.0e6
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from io import StringIO
from pathlib import Path
from typing import Mapping

from .data import DEFAULT_LAG_WINDOW
from .energy import ColumnConfig, SurfaceParams
from .errors import ConfigInvalid, RwisError
from .evaluation import BenchmarkConfig
from .gbdt import TrainConfig
from .scenario import BenchmarkScenario

ENV_PREFIX = "RWIS_"


@dataclass(frozen=True)
class FeatureSettings:
    lag_window: int = DEFAULT_LAG_WINDOW
    cadence_minutes: int = 60


@dataclass(frozen=True)
class DetectorSettings:
    kind: str = "gbdt"
    window: int = 24
    count: int = 3
    model_fraction: float = 0.7
    threshold_rounds: int = 10
    injection_rate: float = 10.0


@dataclass(frozen=True)
class ServiceSettings:
    host: str = "127.0.0.1"
    port: int = 8080
    store: str = "rwis-store"
    artifacts: str = "rwis-artifacts"


@dataclass(frozen=True)
class Settings:
    features: FeatureSettings = field(default_factory=FeatureSettings)
    scenario: BenchmarkScenario = field(default_factory=BenchmarkScenario)
    column: ColumnConfig = field(default_factory=ColumnConfig)
    surface: SurfaceParams = field(default_factory=SurfaceParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    service: ServiceSettings = field(default_factory=ServiceSettings)

    def with_seed(self, seed: int) -> Settings:
        """Apply one seed to scenario generation and model training."""
        train = replace(self.train, seed=seed)
        return replace(
            self,
            scenario=replace(self.scenario, seed=seed),
            train=train,
            benchmark=replace(self.benchmark, train=train),
        )

    def benchmark_config(self) -> BenchmarkConfig:
        return replace(self.benchmark, train=self.train, lag_window=self.features.lag_window)


SECTIONS = tuple(f.name for f in fields(Settings))


def _coerce(raw: str, default, key: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [float(x) for x in text.split(",") if x.strip()]
            return tuple(items)
    except ValueError as exc:
        raise ConfigInvalid(f"{key}: cannot parse {raw!r}") from exc
    return text


def _section_values(obj, section: str, items: Mapping[str, str]):
    known = {f.name: f for f in fields(obj)}
    updates = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigInvalid(f"unknown key [{section}] {key}")
        default = getattr(obj, key)
        if dataclasses.is_dataclass(default):
            raise ConfigInvalid(f"[{section}] {key} cannot be set directly")
        updates[key] = _coerce(raw, default, f"[{section}] {key}")
    return updates


def load_settings(path=None, env: Mapping[str, str] | None = None, seed: int | None = None) -> Settings:
    """Defaults, then the INI file (if any), then environment overrides, then ``seed``."""
    env = os.environ if env is None else env
    per_section: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        p = Path(path)
        if not p.is_file():
            raise ConfigInvalid(f"config file {p} not found")
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigInvalid(f"{p}: {exc}") from exc
        for section in parser.sections():
            if section not in per_section:
                raise ConfigInvalid(f"unknown section [{section}] in {p}")
            per_section[section].update(parser[section])
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in per_section and key:
            per_section[section][key] = raw

    settings = Settings()
    try:
        parts = {}
        for section in SECTIONS:
            current = getattr(settings, section)
            parts[section] = replace(current, **_section_values(current, section, per_section[section]))
        settings = Settings(**parts)
    except RwisError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from exc
    settings = replace(settings, benchmark=settings.benchmark_config())
    if seed is not None:
        settings = settings.with_seed(seed)
    validate_settings(settings)
    return settings


def validate_settings(s: Settings) -> None:
    if s.features.lag_window < 1:
        raise ConfigInvalid("lag_window must be >= 1")
    if s.features.cadence_minutes != 60:
        raise ConfigInvalid("forecasting runs at a 60-minute cadence")
    if s.detector.kind not in ("gbdt", "ridge"):
        raise ConfigInvalid("detector kind must be gbdt or ridge")
    if not 1 <= s.detector.count <= s.detector.window:
        raise ConfigInvalid("detector count must satisfy 1 <= count <= window")
    if s.column.dt <= 0 or s.column.dt > 300:
        raise ConfigInvalid("column dt must lie in (0, 300] seconds")
    if len(s.column.asphalt) != 2 or len(s.column.ground) != 2:
        raise ConfigInvalid("asphalt and ground take 'conductivity, heat capacity'")
    s.train.validate()
    s.benchmark.validate()
    try:
        s.scenario.validate()
    except RwisError as exc:
        raise ConfigInvalid(str(exc)) from exc


def render_settings(s: Settings) -> str:
    """The effective configuration as INI text."""
    parser = configparser.ConfigParser(interpolation=None)
    for section in SECTIONS:
        obj = getattr(s, section)
        parser[section] = {}
        for f in fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                continue
            parser[section][f.name] = ", ".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
