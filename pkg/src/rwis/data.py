"""Station time series: CSV ingest, timeline regularization and feature assembly.

A station series is stored column-wise. ``values`` holds the four sensor
channels in ``CHANNELS`` order and ``meteo`` the optional forcing columns in
``METEO_COLUMNS`` order; missing readings are NaN. After regularization
every slot sits exactly one cadence apart and ``gap_mask`` marks the slots
whose observation is missing or incomplete.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    CadenceTooCoarse,
    EmptyInput,
    IndexOutOfBounds,
    MissingColumn,
    OutOfRange,
    UnparseableRow,
)

log = logging.getLogger(__name__)

CHANNELS = ("air", "road", "underground", "humidity")
HORIZONS = (1, 2, 3)
METEO_COLUMNS = ("shortwave_in", "longwave_in", "wind_speed", "precip_phase_flux")
REQUIRED_COLUMNS = ("station_id", "timestamp") + tuple(
    f"{c}_temp" if c != "humidity" else c for c in CHANNELS
)
CHANNEL_COLUMNS = REQUIRED_COLUMNS[2:]

TEMP_BOUNDS = (-90.0, 90.0)
HUMIDITY_BOUNDS = (0.0, 100.0)
DEFAULT_LAG_WINDOW = 6
DEFAULT_CADENCE = timedelta(hours=1)

_EPOCH = np.datetime64("1970-01-01T00:00", "m")


def channel_index(channel: str) -> int:
    try:
        return CHANNELS.index(channel)
    except ValueError:
        raise OutOfRange(f"unknown channel {channel!r}") from None


def to_datetime(ts: np.datetime64) -> datetime:
    """Minute-precision numpy instant -> aware UTC datetime."""
    minutes = int((ts - _EPOCH) // np.timedelta64(1, "m"))
    return datetime(1970, 1, 1, tzinfo=timezone.utc) + timedelta(minutes=minutes)


def to_datetime64(dt: datetime) -> np.datetime64:
    if dt.tzinfo is None:
        raise OutOfRange("naive datetime; an explicit UTC offset is required")
    dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "m")


def parse_timestamp(text: str) -> np.datetime64:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp {text!r} has no UTC offset")
    return to_datetime64(dt)


def format_timestamp(ts: np.datetime64) -> str:
    return to_datetime(ts).isoformat()


@dataclass(frozen=True)
class Observation:
    station_id: str
    timestamp: datetime
    air_temp: float
    road_temp: float
    underground_temp: float
    humidity: float

    def __post_init__(self):
        validate_reading(
            (self.air_temp, self.road_temp, self.underground_temp, self.humidity)
        )
        if self.timestamp.tzinfo is None:
            raise OutOfRange("observation timestamp must carry a UTC offset")

    def values(self) -> tuple[float, float, float, float]:
        return (self.air_temp, self.road_temp, self.underground_temp, self.humidity)


def validate_reading(values: Sequence[float]) -> None:
    """Raise OutOfRange unless the four channel values are physically plausible.

    NaN entries are allowed (they mean "missing").
    """
    lo, hi = TEMP_BOUNDS
    for name, v in zip(CHANNELS[:3], values[:3]):
        if math.isnan(v):
            continue
        if not math.isfinite(v) or not lo <= v <= hi:
            raise OutOfRange(f"{name} temperature {v} outside [{lo}, {hi}]")
    h = values[3]
    if not math.isnan(h) and not HUMIDITY_BOUNDS[0] <= h <= HUMIDITY_BOUNDS[1]:
        raise OutOfRange(f"humidity {h} outside [0, 100]")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StationSeries:
    station_id: str
    cadence: timedelta | None
    timestamps: np.ndarray
    values: np.ndarray
    gap_mask: np.ndarray
    meteo: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.timestamps)
        ts = np.asarray(self.timestamps, dtype="datetime64[m]")
        vals = np.asarray(self.values, dtype=float).reshape(n, len(CHANNELS))
        gaps = np.asarray(self.gap_mask, dtype=bool)
        if gaps.shape != (n,):
            raise ValueError("gap_mask length must equal slot count")
        object.__setattr__(self, "timestamps", _readonly(ts))
        object.__setattr__(self, "values", _readonly(vals))
        object.__setattr__(self, "gap_mask", _readonly(gaps))
        if self.meteo is not None:
            met = np.asarray(self.meteo, dtype=float).reshape(n, len(METEO_COLUMNS))
            object.__setattr__(self, "meteo", _readonly(met))

    def __len__(self):
        return len(self.timestamps)

    @property
    def observations(self) -> list[Observation]:
        out = []
        for i in np.flatnonzero(~self.gap_mask):
            v = self.values[i]
            out.append(
                Observation(
                    self.station_id,
                    to_datetime(self.timestamps[i]),
                    float(v[0]),
                    float(v[1]),
                    float(v[2]),
                    float(v[3]),
                )
            )
        return out

    @property
    def is_regular(self) -> bool:
        if self.cadence is None or len(self) < 2:
            return True
        step = np.timedelta64(int(self.cadence.total_seconds() // 60), "m")
        return bool(np.all(np.diff(self.timestamps) == step))

    def slot_time(self, t: int) -> np.datetime64:
        """Timestamp of slot ``t``; slots past the end extend the cadence grid."""
        if t < len(self):
            return self.timestamps[t]
        step = np.timedelta64(int(self.cadence.total_seconds() // 60), "m")
        return self.timestamps[-1] + (t - len(self) + 1) * step

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, channel_index(name)]

    def slice(self, start: int, stop: int) -> StationSeries:
        return StationSeries(
            self.station_id,
            self.cadence,
            self.timestamps[start:stop],
            self.values[start:stop],
            self.gap_mask[start:stop],
            None if self.meteo is None else self.meteo[start:stop],
        )

    def with_values(self, values: np.ndarray) -> StationSeries:
        """Copy with replaced channel values; gap mask is kept as is."""
        return StationSeries(
            self.station_id, self.cadence, self.timestamps, values, self.gap_mask, self.meteo
        )

    def equals(self, other: StationSeries) -> bool:
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b, equal_nan=True))

        return (
            self.station_id == other.station_id
            and self.cadence == other.cadence
            and np.array_equal(self.timestamps, other.timestamps)
            and same(self.values, other.values)
            and np.array_equal(self.gap_mask, other.gap_mask)
            and same(self.meteo, other.meteo)
        )


@dataclass
class ParseResult:
    """Outcome of :func:`parse_csv`: the series plus row-level diagnostics."""

    series: list[StationSeries]
    skipped_rows: list[int] = field(default_factory=list)
    duplicate_warnings: int = 0

    @property
    def skipped(self) -> int:
        return len(self.skipped_rows)


def _float_or_nan(text: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {text!r}")
    return v


def _infer_cadence(ts: np.ndarray) -> timedelta | None:
    if len(ts) < 2:
        return None
    diffs = np.diff(ts).astype("timedelta64[m]").astype(np.int64)
    return timedelta(minutes=int(np.median(diffs)))


def parse_csv(path, schema: Mapping[str, str] | None = None) -> ParseResult:
    """Read observations (and optional meteo forcing columns) from a CSV file.

    ``schema`` maps logical column names to header names in the file, for
    files whose headers differ from the canonical ones.
    """
    schema = dict(schema or {})
    names = {col: schema.get(col, col) for col in REQUIRED_COLUMNS + METEO_COLUMNS}
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyInput(f"{path}: file is empty") from None
        pos = {h: i for i, h in enumerate(header)}
        for col in REQUIRED_COLUMNS:
            if names[col] not in pos:
                raise MissingColumn(names[col])
        meteo_pos = [pos.get(names[c]) for c in METEO_COLUMNS]
        has_meteo = all(p is not None for p in meteo_pos)

        rows: dict[str, dict[np.datetime64, tuple]] = {}
        result = ParseResult(series=[])
        n_rows = 0
        for row_index, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            n_rows += 1
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                station = row[pos[names["station_id"]]].strip()
                if not station:
                    raise ValueError("empty station_id")
                ts = parse_timestamp(row[pos[names["timestamp"]]])
                vals = tuple(_float_or_nan(row[pos[names[c]]]) for c in CHANNEL_COLUMNS)
                validate_reading(vals)
                met = (
                    tuple(_float_or_nan(row[p]) for p in meteo_pos)
                    if has_meteo
                    else None
                )
            except (ValueError, OutOfRange) as exc:
                err = UnparseableRow(row_index, str(exc))
                log.warning("skipping %s", err)
                result.skipped_rows.append(row_index)
                continue
            per_station = rows.setdefault(station, {})
            if ts in per_station:
                log.warning(
                    "station %s: duplicate timestamp %s at row %d, keeping last",
                    station,
                    format_timestamp(ts),
                    row_index,
                )
                result.duplicate_warnings += 1
            per_station[ts] = (vals, met)
    if n_rows == 0:
        raise EmptyInput(f"{path}: no data rows")

    for station in sorted(rows):
        entries = sorted(rows[station].items())
        ts = np.array([e[0] for e in entries], dtype="datetime64[m]")
        vals = np.array([e[1][0] for e in entries], dtype=float)
        met = np.array([e[1][1] for e in entries], dtype=float) if has_meteo else None
        result.series.append(
            StationSeries(
                station,
                _infer_cadence(ts),
                ts,
                vals,
                np.isnan(vals).any(axis=1),
                met,
            )
        )
    return result


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_csv(path, series: Sequence[StationSeries], include_gaps: bool = False) -> None:
    """Write series in the canonical CSV envelope.

    Gap slots are omitted unless ``include_gaps`` is set, in which case
    they are written with empty value fields.
    """
    with_meteo = any(s.meteo is not None for s in series)
    header = list(REQUIRED_COLUMNS) + (list(METEO_COLUMNS) if with_meteo else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for s in series:
            for i in range(len(s)):
                if s.gap_mask[i] and not include_gaps:
                    continue
                row = [s.station_id, format_timestamp(s.timestamps[i])]
                row += [_fmt(v) for v in s.values[i]]
                if with_meteo:
                    met = s.meteo[i] if s.meteo is not None else [math.nan] * 4
                    row += [_fmt(v) for v in met]
                w.writerow(row)


def _nearest_slot(minutes: np.ndarray, cad: int) -> np.ndarray:
    q, r = np.divmod(minutes, cad)
    # exact half-way ties go to the earlier slot
    return np.where(2 * r <= cad, q, q + 1)


def regularize(series: StationSeries, cadence: timedelta = DEFAULT_CADENCE) -> StationSeries:
    """Snap observations onto a fixed cadence grid anchored at the epoch.

    Each row goes to its nearest slot; when several rows share a slot the
    one closest to the slot instant wins. Empty slots are flagged in the
    gap mask and left as NaN.
    """
    cad = int(cadence.total_seconds() // 60)
    if cad <= 0 or cadence.total_seconds() % 60:
        raise OutOfRange("cadence must be a positive whole number of minutes")
    n = len(series)
    if n == 0:
        raise EmptyInput(f"station {series.station_id}: no observations")
    minutes = (series.timestamps - _EPOCH).astype("timedelta64[m]").astype(np.int64)
    slots = _nearest_slot(minutes, cad)
    uniq, counts = np.unique(slots, return_counts=True)
    colliding = int(counts[counts > 1].sum())
    if colliding > 0.5 * n:
        raise CadenceTooCoarse(
            f"station {series.station_id}: {colliding}/{n} rows collide at cadence {cadence}"
        )

    first, last = int(uniq[0]), int(uniq[-1])
    n_slots = last - first + 1
    values = np.full((n_slots, len(CHANNELS)), np.nan)
    meteo = None if series.meteo is None else np.full((n_slots, len(METEO_COLUMNS)), np.nan)
    best_dist = np.full(n_slots, np.iinfo(np.int64).max)
    for i in range(n):
        k = int(slots[i]) - first
        dist = abs(int(minutes[i]) - int(slots[i]) * cad)
        if dist < best_dist[k]:
            best_dist[k] = dist
            values[k] = series.values[i]
            if meteo is not None:
                meteo[k] = series.meteo[i]
    timestamps = _EPOCH + (np.arange(first, last + 1) * cad).astype("timedelta64[m]")
    gap_mask = np.isnan(values).any(axis=1)
    return StationSeries(series.station_id, cadence, timestamps, values, gap_mask, meteo)


@dataclass(frozen=True)
class CyclicEncoding:
    day_sin: float
    day_cos: float
    hour_sin: float
    hour_cos: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.day_sin, self.day_cos, self.hour_sin, self.hour_cos)


def encode_cyclic(day_of_year: int, days_in_year: int, hour: int) -> CyclicEncoding:
    if days_in_year not in (365, 366):
        raise OutOfRange(f"days_in_year must be 365 or 366, got {days_in_year}")
    if not 1 <= day_of_year <= days_in_year:
        raise OutOfRange(f"day_of_year {day_of_year} outside [1, {days_in_year}]")
    if not 0 <= hour <= 23:
        raise OutOfRange(f"hour {hour} outside [0, 23]")
    d = 2.0 * math.pi * day_of_year / days_in_year
    h = 2.0 * math.pi * hour / 24.0
    return CyclicEncoding(math.sin(d), math.cos(d), math.sin(h), math.cos(h))


def _calendar(ts: np.datetime64) -> tuple[int, int, int]:
    dt = to_datetime(ts)
    year_days = 366 if (dt.year % 4 == 0 and (dt.year % 100 != 0 or dt.year % 400 == 0)) else 365
    return dt.timetuple().tm_yday, year_days, dt.hour


def encode_timestamp(ts: np.datetime64) -> CyclicEncoding:
    return encode_cyclic(*_calendar(ts))


def cyclic_matrix(timestamps: np.ndarray) -> np.ndarray:
    """Vectorized :func:`encode_timestamp` over an array of instants, shape (n, 4)."""
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    years = ts.astype("datetime64[Y]")
    doy = (ts.astype("datetime64[D]") - years.astype("datetime64[D]")).astype(np.int64) + 1
    year_num = years.astype(np.int64) + 1970
    leap = (year_num % 4 == 0) & ((year_num % 100 != 0) | (year_num % 400 == 0))
    ndays = np.where(leap, 366, 365)
    hour = ((ts - ts.astype("datetime64[D]")).astype("timedelta64[h]")).astype(np.int64)
    d = 2.0 * np.pi * doy / ndays
    h = 2.0 * np.pi * hour / 24.0
    return np.column_stack([np.sin(d), np.cos(d), np.sin(h), np.cos(h)])


@dataclass(frozen=True, eq=False)
class FeatureVector:
    lagged_values: np.ndarray  # (L, 4), oldest first
    cyclic: CyclicEncoding
    physical_preds: tuple[float, ...]
    target_channel: str
    horizon: int

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [
                np.asarray(self.lagged_values, dtype=float).ravel(),
                np.asarray(self.cyclic.as_tuple()),
                np.asarray(self.physical_preds, dtype=float),
            ]
        )

    def __len__(self):
        return self.lagged_values.size + 4 + len(self.physical_preds)


class _Skip:
    """Sentinel returned by :func:`build_features` when the lag window has a gap."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "SKIP"

    def __bool__(self):
        return False


SKIP = _Skip()


def feature_dim(lag_window: int, with_physical: bool) -> int:
    return lag_window * len(CHANNELS) + 4 + (1 if with_physical else 0)


def build_features(
    series: StationSeries,
    t: int,
    channel: str,
    horizon: int,
    physical_preds: Mapping[int, float] | None,
    lag_window: int = DEFAULT_LAG_WINDOW,
):
    """Feature vector for slot ``t``: lags ``t-L .. t-1``, calendar of slot ``t``.

    ``physical_preds`` maps horizon -> physical-model value; pass None for
    the detector layout, which carries no physical predictions.
    """
    channel_index(channel)
    if horizon not in HORIZONS:
        raise OutOfRange(f"horizon must be one of {HORIZONS}")
    if t < lag_window or t > len(series):
        raise IndexOutOfBounds(f"slot {t} outside [{lag_window}, {len(series)}]")
    if series.gap_mask[t - lag_window : t].any():
        return SKIP
    if physical_preds is None:
        phys: tuple[float, ...] = ()
    else:
        if horizon not in physical_preds:
            raise OutOfRange(f"no physical prediction for horizon {horizon}")
        phys = (float(physical_preds[horizon]),)
    lags = np.array(series.values[t - lag_window : t], dtype=float)
    return FeatureVector(lags, encode_timestamp(series.slot_time(t)), phys, channel, horizon)


def feature_matrix(
    series: StationSeries,
    slots: np.ndarray,
    lag_window: int = DEFAULT_LAG_WINDOW,
    physical: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`build_features` for many slots at once.

    Returns ``(X, keep)`` where ``keep`` marks which requested slots had a
    complete lag window; ``X`` holds only those rows. ``physical``, when
    given, is a per-requested-slot column appended last.
    """
    slots = np.asarray(slots, dtype=np.int64)
    if slots.size and (slots.min() < lag_window or slots.max() > len(series)):
        raise IndexOutOfBounds("requested slot outside the series")
    gaps = np.concatenate([[0], np.cumsum(series.gap_mask, dtype=np.int64)])
    keep = (gaps[slots] - gaps[slots - lag_window]) == 0
    kept = slots[keep]
    idx = kept[:, None] + np.arange(-lag_window, 0)[None, :]
    lags = series.values[idx].reshape(len(kept), -1)
    times = np.array([series.slot_time(int(t)) for t in kept], dtype="datetime64[m]")
    parts = [lags, cyclic_matrix(times)]
    if physical is not None:
        parts.append(np.asarray(physical, dtype=float)[keep][:, None])
    return np.hstack(parts) if len(kept) else np.empty((0, sum(p.shape[1] for p in parts))), keep
