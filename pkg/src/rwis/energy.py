"""Pavement energy balance and a 1-D heat-conduction column.

The net surface flux

    R = (1 - albedo) S + eps I - eps sigma T^4 - H - L_a E + L_f P + A

drives a finite-volume conduction column (z positive downward). The top
node takes R as a Neumann condition, the bottom node is held at a fixed
deep temperature. Time stepping is backward Euler with the surface flux
lagged to the start of the step, so one tridiagonal solve per step.

Road temperature is the surface node, underground temperature the node at
the sensor depth. Air temperature and humidity have no column physics and
get a persistence-plus-trend forecast instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.linalg import solve_banded

from .data import CHANNELS, HORIZONS, METEO_COLUMNS, StationSeries
from .errors import InsufficientMeteo, NonFiniteInput, OutOfRange, SingularSystem, StepTooLarge

STEFAN_BOLTZMANN = 5.670374419e-8  # W m-2 K-4
KELVIN = 273.15
CP_AIR = 1005.0  # J kg-1 K-1
SURFACE_PRESSURE_HPA = 1013.25
MAX_DT = 300.0
SECONDS_PER_HOUR = 3600.0

DEFAULT_DEPTHS = (0.0, 0.02, 0.05, 0.1, 0.15, 0.22, 0.3, 0.45, 0.65, 0.95, 1.4, 2.0)
ASPHALT_DEPTH = 0.1
ASPHALT = (1.2, 2.0e6)  # conductivity W/(m K), volumetric heat capacity J/(m3 K)
GROUND = (1.5, 2.4e6)
UNDERGROUND_SENSOR_DEPTH = 0.3


@dataclass(frozen=True)
class SurfaceMeteo:
    """Meteorological forcing at the surface. Fields may be scalars or equal-length arrays."""

    shortwave_in: float | np.ndarray
    longwave_in: float | np.ndarray
    air_temp: float | np.ndarray
    wind_speed: float | np.ndarray
    humidity: float | np.ndarray
    precip_phase_flux: float | np.ndarray = 0.0

    def __post_init__(self):
        for name in ("shortwave_in", "longwave_in", "wind_speed"):
            if np.any(np.asarray(getattr(self, name)) < 0):
                raise OutOfRange(f"{name} must be non-negative")

    def at(self, i: int) -> SurfaceMeteo:
        def pick(v):
            a = np.asarray(v)
            return float(a) if a.ndim == 0 else float(a[i])

        return SurfaceMeteo(*(pick(getattr(self, f)) for f in _MET_FIELDS))

    def __len__(self):
        return int(np.broadcast(*(np.asarray(getattr(self, f)) for f in _MET_FIELDS)).size)


_MET_FIELDS = ("shortwave_in", "longwave_in", "air_temp", "wind_speed", "humidity", "precip_phase_flux")


@dataclass(frozen=True)
class SurfaceParams:
    albedo: float = 0.1
    emissivity: float = 0.95
    sensible_coeff: float = 15.0  # C_H, W/(m2 K)
    latent_coeff: float = 10.0  # C_E, W/(m2 K)
    latent_vaporization: float = 2.5e6  # J/kg
    latent_fusion: float = 3.34e5  # J/kg
    anthropogenic: float = 0.0  # W/m2

    def __post_init__(self):
        if not 0.0 <= self.albedo <= 1.0 or not 0.0 <= self.emissivity <= 1.0:
            raise OutOfRange("albedo and emissivity must lie in [0, 1]")
        if self.latent_vaporization <= 0 or self.latent_fusion <= 0:
            raise OutOfRange("latent heats must be positive")


def saturation_specific_humidity(temp_c):
    """Magnus-Tetens saturation specific humidity in kg/kg."""
    t = np.clip(np.asarray(temp_c, dtype=float), -60.0, 60.0)
    e = 6.112 * np.exp(17.67 * t / (t + 243.5))
    return 0.622 * e / (SURFACE_PRESSURE_HPA - 0.378 * e)


def surface_flux(surface_temp, met: SurfaceMeteo, p: SurfaceParams):
    """Net surface energy flux R in W/m2 (positive heats the pavement).

    Evaporation uses a bulk form E = (C_E / c_p) max(0, q_sat(T_s) - q_air)
    so that C_E carries the same units as C_H.
    """
    ts = np.asarray(surface_temp, dtype=float)
    fields = [np.asarray(getattr(met, f), dtype=float) for f in _MET_FIELDS]
    if not np.all(np.isfinite(ts)) or not all(np.all(np.isfinite(f)) for f in fields):
        raise NonFiniteInput("surface_flux inputs must be finite")
    s, i, air, _wind, rh, phase = fields
    r = _net_flux(ts, s, i, air, rh, phase, p)
    return float(r) if np.ndim(r) == 0 else r


def _net_flux(ts, s, i, air, rh, phase, p: SurfaceParams):
    tk = ts + KELVIN
    sensible = p.sensible_coeff * (ts - air)
    if p.latent_coeff:
        q_air = rh / 100.0 * saturation_specific_humidity(air)
        evap = p.latent_coeff / CP_AIR * np.maximum(0.0, saturation_specific_humidity(ts) - q_air)
    else:
        evap = 0.0
    r = (
        (1.0 - p.albedo) * s
        + p.emissivity * i
        - p.emissivity * STEFAN_BOLTZMANN * tk**4
        - sensible
        - p.latent_vaporization * evap
        + p.latent_fusion * phase
        + p.anthropogenic
    )
    return r


@dataclass(frozen=True, eq=False)
class ThermalProfile:
    """Node temperatures of a conduction column.

    ``conductivity`` and ``heat_capacity`` are per layer, i.e. per interval
    between consecutive nodes. The last node is the deep Dirichlet node and
    always carries ``deep_temp``.
    """

    depths: np.ndarray
    temperatures: np.ndarray
    conductivity: np.ndarray
    heat_capacity: np.ndarray
    deep_temp: float

    def __post_init__(self):
        z = np.array(self.depths, dtype=float)
        n = len(z)
        if n < 3:
            raise OutOfRange("a column needs at least 3 nodes")
        if z[0] != 0.0 or np.any(np.diff(z) <= 0):
            raise SingularSystem("node depths must start at 0 and strictly increase")
        k = np.broadcast_to(np.asarray(self.conductivity, dtype=float), (n - 1,)).copy()
        rc = np.broadcast_to(np.asarray(self.heat_capacity, dtype=float), (n - 1,)).copy()
        if np.any(k <= 0) or np.any(rc <= 0):
            raise OutOfRange("conductivity and heat capacity must be positive")
        temps = np.array(self.temperatures, dtype=float)
        if temps.shape != (n,):
            raise OutOfRange("one temperature per node required")
        for name, arr in (("depths", z), ("temperatures", temps), ("conductivity", k), ("heat_capacity", rc)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "deep_temp", float(self.deep_temp))

    @property
    def surface(self) -> float:
        return float(self.temperatures[0])

    def node_nearest(self, depth: float) -> int:
        return int(np.argmin(np.abs(self.depths - depth)))

    def with_temperatures(self, temps) -> ThermalProfile:
        return replace(self, temperatures=np.asarray(temps, dtype=float))


@dataclass(frozen=True)
class ColumnConfig:
    depths: tuple[float, ...] = DEFAULT_DEPTHS
    asphalt_depth: float = ASPHALT_DEPTH
    asphalt: tuple[float, float] = ASPHALT
    ground: tuple[float, float] = GROUND
    deep_temp: float = 5.0
    sensor_depth: float = UNDERGROUND_SENSOR_DEPTH
    dt: float = 60.0

    def layers(self) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(self.depths, dtype=float)
        mid = 0.5 * (z[:-1] + z[1:])
        top = mid < self.asphalt_depth
        k = np.where(top, self.asphalt[0], self.ground[0])
        rc = np.where(top, self.asphalt[1], self.ground[1])
        return k, rc

    def profile(self, surface: float, underground: float) -> ThermalProfile:
        """Initial column: linear from the surface to the sensor node, uniform below."""
        z = np.asarray(self.depths, dtype=float)
        zs = z[int(np.argmin(np.abs(z - self.sensor_depth)))]
        temps = np.where(z <= zs, surface + (underground - surface) * z / zs, underground)
        temps[-1] = self.deep_temp
        k, rc = self.layers()
        return ThermalProfile(z, temps, k, rc, self.deep_temp)


class _ImplicitOperator:
    """Backward-Euler conduction operator for one column geometry and time step.

    Unknowns are nodes 0 .. n-2; node n-1 is the deep boundary. With
    ``fixed_surface`` node 0 is also prescribed.
    """

    def __init__(self, depths, conductivity, heat_capacity, dt, fixed_surface=False):
        z = np.asarray(depths, dtype=float)
        h = np.diff(z)
        if np.any(h <= 0) or not np.all(np.isfinite(h)):
            raise SingularSystem("degenerate column geometry")
        a = np.asarray(conductivity, dtype=float) / h  # inter-node conductance
        cap = np.zeros(len(z))
        cap[:-1] += 0.5 * np.asarray(heat_capacity) * h
        cap[1:] += 0.5 * np.asarray(heat_capacity) * h
        m = len(z) - 1
        c_dt = cap[:m] / dt
        diag = c_dt.copy()
        diag[:-1] += a[: m - 1]
        diag[1:] += a[: m - 1]
        diag[-1] += a[m - 1]
        upper = np.zeros(m)
        lower = np.zeros(m)
        upper[1:] = -a[: m - 1]
        lower[:-1] = -a[: m - 1]
        if fixed_surface:
            diag[0] = 1.0
            upper[1] = 0.0
        if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
            raise SingularSystem("non-positive diagonal in conduction operator")
        self.ab = np.vstack([upper, diag, lower])
        self.c_dt = c_dt
        self.a_deep = a[m - 1]
        self.a_top = a[0]
        self.fixed_surface = fixed_surface
        self.m = m

    def step(self, temps: np.ndarray, flux, deep_temp, surface_temp=None) -> np.ndarray:
        """Advance a batch of columns, ``temps`` of shape (n_nodes,) or (n_nodes, B)."""
        rhs = self.c_dt.reshape((-1,) + (1,) * (temps.ndim - 1)) * temps[: self.m]
        rhs[-1] = rhs[-1] + self.a_deep * deep_temp
        if self.fixed_surface:
            rhs[0] = surface_temp
            rhs[1] = rhs[1] + self.a_top * surface_temp
        else:
            rhs[0] = rhs[0] + flux
        sol = solve_banded((1, 1), self.ab, rhs, check_finite=False)
        out = np.empty_like(temps, dtype=float)
        out[: self.m] = sol
        out[self.m] = deep_temp
        return out


def step_profile(
    profile: ThermalProfile, dt: float, flux: float, fixed_surface: float | None = None
) -> ThermalProfile:
    """One implicit step of the column under surface flux ``flux`` (W/m2).

    With ``fixed_surface`` the top node is held at that temperature instead
    of taking the flux condition.
    """
    if not dt > 0:
        raise OutOfRange("dt must be positive")
    if dt > MAX_DT:
        raise StepTooLarge(f"dt={dt} s exceeds the {MAX_DT:.0f} s cap")
    if not math.isfinite(flux):
        raise NonFiniteInput("flux must be finite")
    op = _ImplicitOperator(
        profile.depths, profile.conductivity, profile.heat_capacity, dt, fixed_surface is not None
    )
    temps = op.step(np.array(profile.temperatures), flux, profile.deep_temp, fixed_surface)
    return profile.with_temperatures(temps)


@dataclass(frozen=True, eq=False)
class PhysicalForecast:
    """Physical-model values, ``values[channel, horizon]`` over CHANNELS x HORIZONS."""

    values: np.ndarray
    horizons: tuple[int, ...] = HORIZONS

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (len(CHANNELS), len(self.horizons)):
            raise OutOfRange("physical forecast must be a channels x horizons grid")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def get(self, channel: str, horizon: int) -> float:
        return float(self.values[CHANNELS.index(channel), self.horizons.index(horizon)])

    def by_horizon(self, channel: str) -> dict[int, float]:
        return {h: self.get(channel, h) for h in self.horizons}


def trend_forecast(recent: Sequence[float], horizon_hours, cadence_hours: float = 1.0):
    """Last value plus horizon times the mean slope of the last three observations."""
    r = np.asarray(recent, dtype=float)
    if r.shape[0] < 3:
        raise InsufficientMeteo("trend forecast needs the last three observations")
    slope = (r[-1] - r[-3]) / (2.0 * cadence_hours)
    return r[-1] + np.asarray(horizon_hours, dtype=float) * slope


def _run_column(
    temps: np.ndarray,
    op: _ImplicitOperator,
    params: SurfaceParams,
    met_fields: Sequence[np.ndarray],
    deep_temp: float,
    record_steps: Sequence[int],
    sensor_node: int,
):
    """Roll a batch of columns forward, flux recomputed from the current surface each step.

    ``met_fields`` holds per-step forcing arrays of shape (n_steps,) or
    (n_steps, B). Returns surface and sensor temperatures after each step
    count in ``record_steps``.
    """
    n_steps = max(record_steps)
    rec = {s: i for i, s in enumerate(record_steps)}
    surf = np.empty((len(record_steps),) + temps.shape[1:])
    sens = np.empty_like(surf)
    for j in range(n_steps):
        s, i, air, _wind, rh, phase = (f[j] for f in met_fields)
        flux = _net_flux(temps[0], s, i, air, rh, phase, params)
        temps = op.step(temps, flux, deep_temp)
        if j + 1 in rec:
            surf[rec[j + 1]] = temps[0]
            sens[rec[j + 1]] = temps[sensor_node]
    return temps, surf, sens


def forecast(
    profile: ThermalProfile,
    params: SurfaceParams,
    met_sequence: SurfaceMeteo,
    horizons: Sequence[int] = HORIZONS,
    dt: float = 60.0,
    recent_air: Sequence[float] | None = None,
    recent_humidity: Sequence[float] | None = None,
    sensor_depth: float = UNDERGROUND_SENSOR_DEPTH,
) -> PhysicalForecast:
    """Physical forecast from one column state.

    ``met_sequence`` holds one forcing value per model step. Air and
    humidity come from ``recent_*`` (the last three hourly observations);
    when omitted they fall back to the forcing at step 0 held constant.
    """
    if not 0 < dt <= MAX_DT:
        raise StepTooLarge(f"dt={dt} s outside (0, {MAX_DT:.0f}]")
    horizons = tuple(horizons)
    steps_per_hour = SECONDS_PER_HOUR / dt
    if abs(steps_per_hour - round(steps_per_hour)) > 1e-9:
        raise OutOfRange("dt must divide one hour")
    record = [int(round(h * steps_per_hour)) for h in horizons]
    n_met = len(met_sequence)
    if n_met < max(record):
        raise InsufficientMeteo(f"need {max(record)} forcing steps, got {n_met}")
    fields = [
        np.broadcast_to(np.asarray(getattr(met_sequence, f), dtype=float), (n_met,))
        for f in _MET_FIELDS
    ]
    op = _ImplicitOperator(profile.depths, profile.conductivity, profile.heat_capacity, dt)
    node = profile.node_nearest(sensor_depth)
    _, surf, sens = _run_column(
        np.array(profile.temperatures), op, params, fields, profile.deep_temp, record, node
    )
    air0 = float(fields[2][0])
    hum0 = float(fields[4][0])
    h = np.asarray(horizons, dtype=float)
    air = trend_forecast(recent_air, h) if recent_air is not None else np.full(len(h), air0)
    hum = trend_forecast(recent_humidity, h) if recent_humidity is not None else np.full(len(h), hum0)
    return PhysicalForecast(np.vstack([air, surf, sens, hum]), horizons)


def equilibrium_surface_temp(met: SurfaceMeteo, params: SurfaceParams) -> float:
    """Surface temperature at which the net flux vanishes under constant forcing."""
    from scipy.optimize import brentq

    return float(brentq(lambda t: surface_flux(t, met, params), -80.0, 80.0, xtol=1e-12))


# -- analysis cycle and batched forecasting over a whole station series ------

def meteo_rows(series: StationSeries) -> np.ndarray:
    """Hourly forcing rows (n, 6) in SurfaceMeteo field order, built from a series.

    Air temperature and humidity come from the observation channels; the
    radiation, wind and phase columns from the series' meteo block.
    """
    n = len(series)
    if series.meteo is None:
        return np.full((n, 6), np.nan)
    m = series.meteo
    rows = np.column_stack(
        [m[:, 0], m[:, 1], series.values[:, 0], m[:, 2], series.values[:, 3], m[:, 3]]
    )
    return rows


def _interp_forcing(row_a: np.ndarray, row_b: np.ndarray, steps: int) -> list[np.ndarray]:
    """Linear interpolation between two forcing rows at step starts j/steps, j < steps."""
    w = np.arange(steps) / steps
    if row_a.ndim == 1:
        return [row_a[k] + (row_b[k] - row_a[k]) * w for k in range(6)]
    # batched rows: (B, 6) -> list of (steps, B)
    return [row_a[:, k][None, :] + (row_b[:, k] - row_a[:, k])[None, :] * w[:, None] for k in range(6)]


@dataclass
class AnalysisColumn:
    """Running column state for one station, advanced slot by slot.

    Each slot the column is stepped through the interval with forcing
    interpolated between the slot's two endpoint meteo rows, then the
    observed road and underground temperatures are inserted into the
    surface and sensor nodes. Missing forcing holds the last valid row.
    """

    config: ColumnConfig
    params: SurfaceParams
    cadence_hours: float = 1.0
    temps: np.ndarray | None = None
    last_forcing: np.ndarray | None = None
    _op: _ImplicitOperator | None = field(default=None, repr=False)

    def __post_init__(self):
        k, rc = self.config.layers()
        self._op = _ImplicitOperator(self.config.depths, k, rc, self.config.dt)
        self._node = int(np.argmin(np.abs(np.asarray(self.config.depths) - self.config.sensor_depth)))
        self._steps = int(round(self.cadence_hours * SECONDS_PER_HOUR / self.config.dt))

    @property
    def initialized(self) -> bool:
        return self.temps is not None

    def profile(self) -> ThermalProfile:
        k, rc = self.config.layers()
        return ThermalProfile(self.config.depths, self.temps, k, rc, self.config.deep_temp)

    def _resolve(self, row) -> np.ndarray | None:
        if row is not None and np.all(np.isfinite(row)):
            self.last_forcing = np.array(row, dtype=float)
            return self.last_forcing
        return self.last_forcing

    def advance(self, start_row, end_row) -> None:
        """Step through one cadence interval; a no-op until initialized."""
        a = self._resolve(start_row)
        b = end_row if end_row is not None and np.all(np.isfinite(end_row)) else a
        if self.temps is None or a is None:
            return
        fields = _interp_forcing(a, np.asarray(b, dtype=float), self._steps)
        self.temps, _, _ = _run_column(
            self.temps, self._op, self.params, fields, self.config.deep_temp, [self._steps], self._node
        )

    def assimilate(self, road: float, underground: float) -> None:
        if self.temps is None:
            if math.isfinite(road) and math.isfinite(underground):
                self.temps = np.array(self.config.profile(road, underground).temperatures)
            return
        temps = self.temps.copy()
        if math.isfinite(road):
            temps[0] = road
        if math.isfinite(underground):
            temps[self._node] = underground
        self.temps = temps


def forecast_from_states(
    states: np.ndarray,
    forcing: np.ndarray,
    config: ColumnConfig,
    params: SurfaceParams,
    horizons: Sequence[int] = HORIZONS,
    cadence_hours: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched road/underground forecasts.

    ``states`` is (B, n_nodes); ``forcing`` is (B, max_h + 1, 6), the hourly
    forcing rows from the issue slot onward. Returns (road, underground),
    each of shape (B, len(horizons)).
    """
    horizons = tuple(horizons)
    steps = int(round(cadence_hours * SECONDS_PER_HOUR / config.dt))
    k, rc = config.layers()
    op = _ImplicitOperator(config.depths, k, rc, config.dt)
    node = int(np.argmin(np.abs(np.asarray(config.depths) - config.sensor_depth)))
    n_hours = max(horizons)
    per_step = [[] for _ in range(6)]
    for hour in range(n_hours):
        parts = _interp_forcing(forcing[:, hour, :], forcing[:, hour + 1, :], steps)
        for k_ in range(6):
            per_step[k_].append(parts[k_])
    fields = [np.concatenate(p, axis=0) for p in per_step]
    record = [h * steps for h in horizons]
    _, surf, sens = _run_column(
        np.asarray(states, dtype=float).T.copy(), op, params, fields, config.deep_temp, record, node
    )
    return surf.T, sens.T


def physical_forecasts(
    series: StationSeries,
    config: ColumnConfig | None = None,
    params: SurfaceParams | None = None,
    horizons: Sequence[int] = HORIZONS,
) -> np.ndarray:
    """Physical forecasts for every issue slot of a regular series.

    Returns an array (n_slots, 4, len(horizons)); entries are NaN where
    the column is not yet initialized, the forcing window is incomplete,
    or the trend inputs are missing.
    """
    config = config or ColumnConfig()
    params = params or SurfaceParams()
    horizons = tuple(horizons)
    cad_h = series.cadence.total_seconds() / SECONDS_PER_HOUR if series.cadence else 1.0
    n = len(series)
    rows = meteo_rows(series)
    analysis = AnalysisColumn(config, params, cad_h)
    states = np.full((n, len(config.depths)), np.nan)
    road = series.values[:, 1]
    ug = series.values[:, 2]
    for t in range(n):
        if t > 0:
            analysis.advance(rows[t - 1], rows[t])
        analysis.assimilate(float(road[t]), float(ug[t]))
        if analysis.initialized:
            states[t] = analysis.temps

    out = np.full((n, len(CHANNELS), len(horizons)), np.nan)
    max_h = max(horizons)
    h_slots = np.asarray(horizons) / cad_h
    issue = np.arange(n - max_h)
    window = np.stack([rows[issue + j] for j in range(max_h + 1)], axis=1) if len(issue) else np.empty((0, max_h + 1, 6))
    ok = np.isfinite(states[issue]).all(axis=1) & np.isfinite(window).all(axis=(1, 2))
    sel = issue[ok]
    if len(sel):
        r, u = forecast_from_states(states[sel], window[ok], config, params, horizons, cad_h)
        out[sel, 1, :] = r
        out[sel, 2, :] = u
    # persistence plus trend for air and humidity
    for c in (0, 3):
        v = series.values[:, c]
        slope = np.full(n, np.nan)
        slope[2:] = (v[2:] - v[:-2]) / (2.0 * cad_h)
        out[:, c, :] = v[:, None] + np.asarray(horizons, dtype=float)[None, :] * slope[:, None]
    return out
