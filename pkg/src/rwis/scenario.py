"""Synthetic multi-station benchmark data.

Each station gets hourly weather (air temperature with diurnal cycle,
trend and AR(1) weather noise; cloud-modulated radiation; wind; humidity)
that drives a reference conduction column. Road observations are the
column surface plus a traffic warm bias that depends only on hour and day
of year, which is the signal the physical model cannot see. Stations split
into training stations and held-out stations; held-out stations are only
scored after the time cutoff.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np

from .data import CHANNELS, StationSeries, cyclic_matrix, to_datetime64
from .energy import (
    STEFAN_BOLTZMANN,
    AnalysisColumn,
    ColumnConfig,
    SurfaceParams,
    _interp_forcing,
    _run_column,
)
from .errors import SpecInvalid


@dataclass(frozen=True)
class BenchmarkScenario:
    n_stations: int = 4
    n_holdout: int = 1
    days: int = 28
    holdout_days: int = 7
    cadence_hours: int = 1
    start: str = "2018-10-15T00:00:00+00:00"
    base_temp: float = 6.0
    station_spread: float = 2.0
    trend_per_day: float = -0.15
    diurnal_amplitude: float = 4.0
    weather_sigma: float = 0.4
    weather_ar: float = 0.95
    shortwave_peak: float = 420.0
    bias_amplitude: float = 2.0
    noise_air: float = 0.1
    noise_road: float = 0.1
    noise_underground: float = 0.05
    noise_humidity: float = 1.0
    injection_rate: float = 10.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_stations < 4 or not 1 <= self.n_holdout < self.n_stations:
            raise SpecInvalid("need >= 4 stations with 1 .. n-1 held out")
        if self.days < 14:
            raise SpecInvalid("span must cover at least 14 days")
        if not 1 <= self.holdout_days < self.days:
            raise SpecInvalid("holdout tail must be shorter than the span")
        if self.cadence_hours != 1:
            raise SpecInvalid("synthetic scenarios are generated at 1 h cadence")

    def to_dict(self) -> dict:
        return asdict(self)


def traffic_bias(hour, day_of_year, amplitude: float):
    """Warm bias from traffic: morning and evening peaks, weak seasonal modulation."""
    h = np.asarray(hour, dtype=float)
    d = np.asarray(day_of_year, dtype=float)
    shape = np.exp(-(((h - 8.0) / 2.0) ** 2)) + 0.8 * np.exp(-(((h - 18.0) / 2.5) ** 2))
    return amplitude * shape * (1.0 + 0.1 * np.cos(2.0 * np.pi * d / 365.0))


@dataclass(eq=False)
class ScenarioData:
    spec: BenchmarkScenario
    train: list[StationSeries]
    heldout: list[StationSeries]
    cutoff: np.datetime64
    bias: dict[str, np.ndarray] = field(default_factory=dict)
    clean_surface: dict[str, np.ndarray] = field(default_factory=dict)
    full: list[StationSeries] = field(default_factory=list)

    def eval_mask(self, series: StationSeries) -> np.ndarray:
        """Issue slots at or after the cutoff."""
        return series.timestamps >= self.cutoff

    def channel_sigma(self) -> dict[str, float]:
        """Empirical standard deviation of each channel over the training data."""
        stacked = np.vstack([s.values for s in self.train])
        return {c: float(np.nanstd(stacked[:, i])) for i, c in enumerate(CHANNELS)}


def _smooth_daily(rng, n_hours: int, lo: float, hi: float) -> np.ndarray:
    n_days = n_hours // 24 + 2
    daily = rng.uniform(lo, hi, size=n_days)
    return np.interp(np.arange(n_hours) / 24.0, np.arange(n_days), daily)


def _station_weather(spec: BenchmarkScenario, index: int, hours: np.ndarray, hour_of_day, rng):
    n = len(hours)
    offset = spec.station_spread * (index / max(1, spec.n_stations - 1) - 0.5)
    ar = np.zeros(n)
    eps = rng.normal(0.0, spec.weather_sigma, size=n)
    for t in range(1, n):
        ar[t] = spec.weather_ar * ar[t - 1] + eps[t]
    cloud = _smooth_daily(rng, n, 0.1, 0.9)
    diurnal = spec.diurnal_amplitude * (1.0 - 0.5 * cloud) * np.cos(2.0 * np.pi * (hour_of_day - 15.0) / 24.0)
    air = spec.base_temp + offset + spec.trend_per_day * hours / 24.0 + diurnal + ar
    sun = np.clip(np.sin(np.pi * (hour_of_day - 6.0) / 12.0), 0.0, None)
    shortwave = spec.shortwave_peak * sun * (1.0 - 0.7 * cloud)
    longwave = STEFAN_BOLTZMANN * (air + 273.15) ** 4 * (0.72 + 0.25 * cloud)
    wind = 1.0 + 3.0 * _smooth_daily(rng, n, 0.0, 1.0) + np.abs(rng.normal(0.0, 0.3, size=n))
    humidity = np.clip(72.0 - 2.5 * (air - np.convolve(air, np.ones(24) / 24, mode="same")) + 20.0 * cloud
                       + rng.normal(0.0, 2.0, size=n), 25.0, 100.0)
    phase = np.zeros(n)
    return air, humidity, np.column_stack([shortwave, longwave, wind, phase])


def _run_reference_columns(rows: np.ndarray, config: ColumnConfig, params: SurfaceParams, s0, u0):
    """Free-running columns, one per station, over hourly forcing rows (S, n, 6).

    Returns surface and sensor temperatures, each of shape (S, n).
    """
    col = AnalysisColumn(config, params, 1.0)
    n_st, n = rows.shape[:2]
    temps = np.stack([config.profile(a, b).temperatures for a, b in zip(s0, u0)], axis=1)
    node = col._node
    surf = np.empty((n_st, n))
    sens = np.empty((n_st, n))
    surf[:, 0] = temps[0]
    sens[:, 0] = temps[node]
    for t in range(1, n):
        fields = _interp_forcing(rows[:, t - 1], rows[:, t], col._steps)
        temps, _, _ = _run_column(temps, col._op, params, fields, config.deep_temp, [col._steps], node)
        surf[:, t] = temps[0]
        sens[:, t] = temps[node]
    return surf, sens


def generate_scenario(
    spec: BenchmarkScenario = BenchmarkScenario(),
    config: ColumnConfig | None = None,
    params: SurfaceParams | None = None,
) -> ScenarioData:
    """Deterministic synthetic stations split by station and by time."""
    spec.validate()
    config = config or ColumnConfig()
    params = params or SurfaceParams()
    start = to_datetime64(datetime.fromisoformat(spec.start).astimezone(timezone.utc))
    n = spec.days * 24
    hours = np.arange(n, dtype=float)
    timestamps = start + np.arange(n).astype("timedelta64[h]").astype("timedelta64[m]")
    cyc = cyclic_matrix(timestamps)
    hour_of_day = np.round(np.arctan2(cyc[:, 2], cyc[:, 3]) / (2 * np.pi) * 24.0) % 24
    doy = (timestamps.astype("datetime64[D]") - timestamps.astype("datetime64[Y]").astype("datetime64[D]")).astype(int) + 1
    bias = traffic_bias(hour_of_day, doy, spec.bias_amplitude)

    root = np.random.SeedSequence(spec.seed)
    rngs = [np.random.default_rng(ss) for ss in root.spawn(spec.n_stations)]
    weather = [_station_weather(spec, i, hours, hour_of_day, rngs[i]) for i in range(spec.n_stations)]
    rows = np.stack(
        [np.column_stack([m[:, 0], m[:, 1], air, m[:, 2], hum, m[:, 3]]) for air, hum, m in weather]
    )
    s0 = rows[:, 0, 2]
    u0 = np.full(spec.n_stations, spec.base_temp)
    surf_all, sens_all = _run_reference_columns(rows, config, params, s0, u0)

    full, biases, surfaces = [], {}, {}
    for i, (air, humidity, met) in enumerate(weather):
        sid = f"S{i + 1:03d}"
        surf, sens = surf_all[i], sens_all[i]
        noise = rngs[i].normal(size=(n, 4)) * np.array(
            [spec.noise_air, spec.noise_road, spec.noise_underground, spec.noise_humidity]
        )
        # the first reading equals the reference initial state so the
        # physical model starts from the same column
        noise[0] = 0.0
        road = surf + bias + noise[:, 1]
        road[0] = surf[0]
        values = np.column_stack(
            [air + noise[:, 0], road, sens + noise[:, 2], np.clip(humidity + noise[:, 3], 0.0, 100.0)]
        )
        series = StationSeries(sid, timedelta(hours=1), timestamps, values, np.zeros(n, dtype=bool), met)
        full.append(series)
        biases[sid] = bias.copy()
        surfaces[sid] = surf

    cutoff_idx = (spec.days - spec.holdout_days) * 24
    cutoff = timestamps[cutoff_idx]
    n_train = spec.n_stations - spec.n_holdout
    train = [s.slice(0, cutoff_idx) for s in full[:n_train]]
    heldout = full[n_train:]
    return ScenarioData(spec, train, heldout, cutoff, biases, surfaces, full)

