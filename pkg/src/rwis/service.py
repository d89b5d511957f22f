"""Long-running forecasting service: ingest, anomaly gate, forecast, correct, persist.

State lives in memory per station and is rebuilt on start by replaying the
append-only record store, so a restart reproduces the same labels,
quarantine flags and column states. The HTTP layer speaks newline-delimited
JSON under ``/v1``:

    POST /v1/observations               one observation object per line
    POST /v1/meteo                      one forcing object per line
    GET  /v1/forecast?station=S&horizon=H
    GET  /v1/stations/<id>/status
    POST /v1/admin/quarantine/reset     {"station_id": ...}

Forcing for a slot should be posted before (or with) the observation for
that slot; forecasts need forcing, including air temperature and humidity
forecasts, for every hour up to the horizon.
"""

from __future__ import annotations

import collections
import enum
import json
import logging
import math
import threading
from dataclasses import asdict, dataclass, field
from datetime import timedelta
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .anomaly import ANOMALY, NORMAL, GateStatus, quarantine_gate
from .correction import clamp_channel
from .data import (
    CHANNELS,
    HORIZONS,
    METEO_COLUMNS,
    StationSeries,
    build_features,
    format_timestamp,
    parse_timestamp,
    validate_reading,
)
from .energy import AnalysisColumn, forecast_from_states, trend_forecast
from .errors import (
    MalformedPayload,
    MissingMeteo,
    OutOfRange,
    Quarantined,
    RwisError,
    UnknownStation,
    WarmingUp,
)
from .pipeline import Artifacts
from .store import RecordStore

log = logging.getLogger(__name__)

SLOT_MINUTES = 60


class IngestStatus(str, enum.Enum):
    ACCEPTED = "accepted"
    FLAGGED = "flagged"
    QUARANTINED_DROP = "quarantined_drop"


@dataclass(frozen=True)
class IngestResult:
    status: IngestStatus
    label: int | None
    residuals: dict[str, float] | None = None
    warning: str | None = None

    def to_dict(self) -> dict:
        d = {"status": self.status.value, "label": self.label, "residuals": self.residuals}
        if self.warning:
            d["warning"] = self.warning
        return d


@dataclass(frozen=True)
class PipelineRecord:
    station_id: str
    issue_time: str
    channel: str
    horizon: int
    physical: float
    correction: float
    corrected: float
    label: int | None
    model_version: str
    features: tuple[float, ...] = field(repr=False, default=())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        return d


def _minute(ts: np.datetime64) -> int:
    return int(ts.astype("datetime64[m]").astype(np.int64))


def _stamp(minute: int) -> np.datetime64:
    return np.datetime64(minute, "m")


@dataclass(eq=False)
class StationState:
    """Everything the service remembers about one station."""

    station_id: str
    lag_window: int
    window: int
    column: AnalysisColumn
    times: collections.deque = field(default=None)
    values: collections.deque = field(default=None)
    context: dict = field(default=None)
    prev_flag: dict = field(default=None)
    labels: collections.deque = field(default=None)
    last_label: int | None = None
    quarantined: bool = False
    last_minute: int | None = None
    last_row: np.ndarray | None = None
    meteo: dict = field(default_factory=dict)
    n_observations: int = 0

    def __post_init__(self):
        keep = max(self.lag_window, 3)
        self.times = collections.deque(maxlen=keep)
        self.values = collections.deque(maxlen=keep)
        # per channel: the detector's own view of that channel, where a
        # flagged value may stand in for its prediction
        self.context = {c: collections.deque(maxlen=keep) for c in CHANNELS}
        self.prev_flag = {c: False for c in CHANNELS}
        self.labels = collections.deque(maxlen=self.window)

    def reset_buffers(self) -> None:
        self.times.clear()
        self.values.clear()
        for q in self.context.values():
            q.clear()

    @property
    def warm(self) -> bool:
        return len(self.values) >= max(self.lag_window, 3) and self.column.initialized

    def status(self) -> dict:
        return {
            "station_id": self.station_id,
            "quarantined": self.quarantined,
            "anomalies_in_window": sum(1 for x in self.labels if x == ANOMALY),
            "label_window": list(self.labels),
            "observations": self.n_observations,
            "last_timestamp": format_timestamp(_stamp(self.last_minute)) if self.last_minute is not None else None,
            "warm": self.warm,
        }


class PipelineService:
    """Transport-independent service core; every public call is thread safe."""

    def __init__(self, artifacts: Artifacts, store: RecordStore):
        self._artifacts = artifacts
        self.store = store
        self._stations: dict[str, StationState] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        self.replayed = 0
        self._replay()

    # -- artifacts ----------------------------------------------------------

    @property
    def artifacts(self) -> Artifacts:
        return self._artifacts

    def reload(self, artifacts: Artifacts) -> None:
        """Swap in a new model snapshot; in-flight requests keep the old one."""
        self._artifacts = artifacts

    # -- station registry ---------------------------------------------------

    def _lock_for(self, station_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(station_id, threading.Lock())

    def _state(self, station_id: str, create: bool) -> tuple[StationState, bool]:
        with self._registry_lock:
            st = self._stations.get(station_id)
            if st is not None:
                return st, False
            if not create:
                raise UnknownStation(f"station {station_id!r} has no state")
            a = self._artifacts
            det = a.detector_config
            st = StationState(station_id, a.lag_window, det.window, AnalysisColumn(a.column, a.surface, 1.0))
            self._stations[station_id] = st
            return st, True

    def stations(self) -> list[str]:
        with self._registry_lock:
            return sorted(self._stations)

    # -- payload parsing ----------------------------------------------------

    @staticmethod
    def _parse_common(payload) -> tuple[str, int]:
        if not isinstance(payload, dict):
            raise MalformedPayload("payload must be a JSON object")
        sid = payload.get("station_id")
        if not isinstance(sid, str) or not sid:
            raise MalformedPayload("station_id must be a nonempty string")
        try:
            minute = _minute(parse_timestamp(str(payload.get("timestamp", ""))))
        except (RwisError, ValueError) as exc:
            raise MalformedPayload(f"bad timestamp: {exc}") from exc
        if minute % SLOT_MINUTES:
            raise MalformedPayload("timestamp is not on the hourly slot grid")
        return sid, minute

    @staticmethod
    def _number(payload: dict, key: str, required: bool = True) -> float:
        v = payload.get(key)
        if v is None and not required:
            return math.nan
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise MalformedPayload(f"{key} must be a finite number")
        return float(v)

    # -- meteo --------------------------------------------------------------

    def post_meteo(self, payload, _replay: bool = False) -> dict:
        sid, minute = self._parse_common(payload)
        row = [self._number(payload, k) for k in METEO_COLUMNS]
        extra = [self._number(payload, k, required=False) for k in ("air_temp", "humidity")]
        if row[0] < 0 or row[1] < 0 or row[2] < 0:
            raise MalformedPayload("radiation and wind speed must be non-negative")
        with self._lock_for(sid):
            st, _ = self._state(sid, create=True)
            if not _replay:
                rec = {"type": "meteo", "station_id": sid, "timestamp": format_timestamp(_stamp(minute))}
                rec.update({k: v for k, v in zip(METEO_COLUMNS, row)})
                rec.update({k: v for k, v in zip(("air_temp", "humidity"), extra) if not math.isnan(v)})
                self.store.append(rec)
            st.meteo[minute] = (row, extra)
        return {"status": "stored"}

    def _forcing_row(self, st: StationState, minute: int, air: float, humidity: float) -> np.ndarray:
        """Forcing row in column order; NaN where meteo is missing."""
        met = st.meteo.get(minute)
        if met is None:
            return np.full(6, np.nan)
        (s, i, wind, phase), (f_air, f_hum) = met
        air = f_air if math.isnan(air) else air
        humidity = f_hum if math.isnan(humidity) else humidity
        return np.array([s, i, air, wind, humidity, phase])

    # -- ingest -------------------------------------------------------------

    def ingest(self, payload, _replay: bool = False) -> IngestResult:
        sid, minute = self._parse_common(payload)
        values = [self._number(payload, k) for k in ("air_temp", "road_temp", "underground_temp", "humidity")]
        try:
            validate_reading(values)
        except OutOfRange as exc:
            raise MalformedPayload(str(exc)) from exc
        with self._lock_for(sid):
            st, _ = self._state(sid, create=True)
            if st.last_minute is not None and minute <= st.last_minute:
                raise MalformedPayload("observation is not after the station's previous one")
            # a station counts as unknown until its first observation, even if
            # forcing for it has already arrived
            first = st.n_observations == 0
            result = self._apply_observation(st, minute, np.array(values))
            if first:
                result = IngestResult(result.status, result.label, result.residuals, "unknown_station_registered")
            if not _replay:
                self.store.append(
                    {
                        "type": "observation",
                        "station_id": sid,
                        "timestamp": format_timestamp(_stamp(minute)),
                        "air_temp": values[0],
                        "road_temp": values[1],
                        "underground_temp": values[2],
                        "humidity": values[3],
                        **result.to_dict(),
                    }
                )
            return result

    def _apply_observation(self, st: StationState, minute: int, values: np.ndarray) -> IngestResult:
        a = self._artifacts
        L = a.lag_window
        if st.last_minute is not None and minute - st.last_minute != SLOT_MINUTES:
            st.reset_buffers()

        label, residuals = None, None
        if len(st.values) >= L:
            label, residuals = self._detect(st, minute, values)
        else:
            for c, q in st.context.items():
                q.append(values[CHANNELS.index(c)])

        # analysis column: step through every slot since the last one
        row = self._forcing_row(st, minute, values[0], values[3])
        if st.last_minute is not None:
            prev_row = st.last_row
            for m in range(st.last_minute + SLOT_MINUTES, minute, SLOT_MINUTES):
                gap_row = self._forcing_row(st, m, math.nan, math.nan)
                st.column.advance(prev_row, gap_row)
                prev_row = gap_row
            st.column.advance(prev_row, row)
        st.column.assimilate(float(values[1]), float(values[2]))
        st.last_row = row
        st.last_minute = minute
        st.times.append(minute)
        st.values.append(values)
        st.n_observations += 1
        for m in [m for m in st.meteo if m < minute - SLOT_MINUTES]:
            del st.meteo[m]

        st.last_label = label
        if label is not None and not st.quarantined:
            st.labels.append(label)
            if quarantine_gate(st.labels, a.detector_config) is GateStatus.QUARANTINED:
                st.quarantined = True
                log.warning("station %s quarantined", st.station_id)
        if st.quarantined:
            status = IngestStatus.QUARANTINED_DROP
        elif label == ANOMALY:
            status = IngestStatus.FLAGGED
        else:
            status = IngestStatus.ACCEPTED
        return IngestResult(status, label, residuals)

    def _detect(self, st: StationState, minute: int, values: np.ndarray):
        a = self._artifacts
        L = a.lag_window
        raw = np.array(list(st.values)[-L:])
        times = np.array([_stamp(m) for m in list(st.times)[-L:]], dtype="datetime64[m]")
        series = StationSeries(st.station_id, timedelta(minutes=SLOT_MINUTES), times, raw, np.zeros(L, dtype=bool))
        base = build_features(series, L, CHANNELS[0], HORIZONS[0], None, L).as_array()
        residuals, flags = {}, {}
        for ci, channel in enumerate(CHANNELS):
            row = base.copy()
            row[ci : 4 * L : 4] = list(st.context[channel])[-L:]
            pred = float(a.detector.predict_rows(row[None, :], channel)[0])
            r = abs(float(values[ci]) - pred)
            bad = r > a.detector_config.thresholds[channel]
            residuals[channel] = r
            flags[channel] = bad
            substitute = bad and not st.prev_flag[channel]
            st.context[channel].append(pred if substitute else float(values[ci]))
            st.prev_flag[channel] = bad
        label = ANOMALY if any(flags.values()) else NORMAL
        return label, residuals

    # -- forecasts ----------------------------------------------------------

    def forecast(self, station_id: str, horizon: int) -> list[PipelineRecord]:
        if horizon not in HORIZONS:
            raise MalformedPayload(f"horizon must be one of {HORIZONS}")
        with self._lock_for(station_id):
            st, _ = self._state(station_id, create=False)
            if st.quarantined:
                raise Quarantined(f"station {station_id} is quarantined")
            if not st.warm:
                raise WarmingUp(f"station {station_id} needs {max(self._artifacts.lag_window, 3)} consecutive observations")
            records = self._forecast_records(st, horizon)
            for rec in records:
                self.store.append({"type": "forecast", **rec.to_dict()})
            return records

    def _forecast_records(self, st: StationState, horizon: int) -> list[PipelineRecord]:
        a = self._artifacts
        L = a.lag_window
        issue = st.last_minute
        rows = [st.last_row]
        for j in range(1, horizon + 1):
            r = self._forcing_row(st, issue + j * SLOT_MINUTES, math.nan, math.nan)
            if not np.all(np.isfinite(r)):
                raise MissingMeteo(f"no complete forcing for {format_timestamp(_stamp(issue + j * SLOT_MINUTES))}")
            rows.append(r)
        if not np.all(np.isfinite(rows[0])):
            raise MissingMeteo("no complete forcing at the issue time")
        road, ug = forecast_from_states(
            st.column.temps[None, :], np.array(rows)[None, :, :], a.column, a.surface, (horizon,)
        )
        recent = np.array(st.values)
        physical = {
            "air": float(trend_forecast(recent[-3:, 0], horizon)),
            "road": float(road[0, 0]),
            "underground": float(ug[0, 0]),
            "humidity": float(trend_forecast(recent[-3:, 3], horizon)),
        }
        raw = recent[-L:]
        times = np.array([_stamp(m) for m in list(st.times)[-L:]], dtype="datetime64[m]")
        series = StationSeries(st.station_id, timedelta(minutes=SLOT_MINUTES), times, raw, np.zeros(L, dtype=bool))
        out = []
        for channel in CHANNELS:
            fv = build_features(series, L, channel, horizon, {horizon: physical[channel]}, L)
            model = a.grid[(channel, horizon)]
            delta = float(model.predict_many(fv.as_array()[None, :])[0])
            corrected = float(clamp_channel(channel, physical[channel] + delta))
            out.append(
                PipelineRecord(
                    st.station_id,
                    format_timestamp(_stamp(issue)),
                    channel,
                    horizon,
                    physical[channel],
                    delta,
                    corrected,
                    st.last_label,
                    a.version,
                    tuple(float(x) for x in fv.as_array()),
                )
            )
        return out

    # -- status and admin ---------------------------------------------------

    def status(self, station_id: str) -> dict:
        with self._lock_for(station_id):
            st, _ = self._state(station_id, create=False)
            return st.status()

    def reset_quarantine(self, station_id: str, _replay: bool = False) -> dict:
        with self._lock_for(station_id):
            st, _ = self._state(station_id, create=False)
            st.quarantined = False
            st.labels.clear()
            if not _replay:
                self.store.append({"type": "quarantine_reset", "station_id": station_id, "after": st.n_observations})
            return st.status()

    # -- replay ---------------------------------------------------------------

    def _replay(self) -> None:
        for rec in self.store.records():
            kind = rec.get("type")
            if kind == "observation":
                self.ingest(rec, _replay=True)
            elif kind == "meteo":
                self.post_meteo(rec, _replay=True)
            elif kind == "quarantine_reset":
                self.reset_quarantine(rec["station_id"], _replay=True)
            self.replayed += 1
        if self.replayed:
            log.info("replayed %d records for %d stations", self.replayed, len(self._stations))


# -- HTTP transport ------------------------------------------------------------

_ERROR_STATUS = {
    MalformedPayload: HTTPStatus.BAD_REQUEST,
    UnknownStation: HTTPStatus.NOT_FOUND,
    Quarantined: HTTPStatus.CONFLICT,
    WarmingUp: HTTPStatus.CONFLICT,
    MissingMeteo: HTTPStatus.UNPROCESSABLE_ENTITY,
}


def _error_body(exc: Exception) -> dict:
    return {"error": type(exc).__name__, "detail": str(exc)}


class _Handler(BaseHTTPRequestHandler):
    service: PipelineService  # set on the subclass built by make_server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, objects) -> None:
        body = "".join(json.dumps(o, sort_keys=True) + "\n" for o in objects).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _lines(self) -> list:
        n = int(self.headers.get("Content-Length") or 0)
        text = self.rfile.read(n).decode("utf-8", errors="replace")
        out = []
        for line in text.splitlines():
            if line.strip():
                try:
                    out.append(json.loads(line))
                except ValueError:
                    out.append(None)
        return out

    def _batch(self, fn) -> None:
        results = []
        for obj in self._lines():
            try:
                if obj is None:
                    raise MalformedPayload("line is not valid JSON")
                res = fn(obj)
                results.append(res.to_dict() if hasattr(res, "to_dict") else res)
            except RwisError as exc:
                results.append(_error_body(exc))
        self._send(HTTPStatus.OK, results)

    def do_POST(self):
        path = urlparse(self.path).path.rstrip("/")
        if path == "/v1/observations":
            return self._batch(self.service.ingest)
        if path == "/v1/meteo":
            return self._batch(self.service.post_meteo)
        if path == "/v1/admin/quarantine/reset":
            lines = self._lines()
            sid = lines[0].get("station_id") if lines and isinstance(lines[0], dict) else None
            sid = sid or parse_qs(urlparse(self.path).query).get("station", [None])[0]
            return self._call(lambda: [self.service.reset_quarantine(str(sid))] if sid else self._bad("station_id"))
        self._send(HTTPStatus.NOT_FOUND, [{"error": "NotFound", "detail": path}])

    def do_GET(self):
        url = urlparse(self.path)
        path = url.path.rstrip("/")
        query = parse_qs(url.query)
        if path == "/v1/forecast":
            sid = query.get("station", [None])[0]
            try:
                horizon = int(query.get("horizon", ["1"])[0])
            except ValueError:
                horizon = -1
            if not sid:
                return self._call(lambda: self._bad("station"))
            return self._call(lambda: [r.to_dict() for r in self.service.forecast(sid, horizon)])
        parts = path.split("/")
        if len(parts) == 5 and parts[1:3] == ["v1", "stations"] and parts[4] == "status":
            return self._call(lambda: [self.service.status(parts[3])])
        if path == "/v1/health":
            return self._send(HTTPStatus.OK, [{"status": "ok", "model_version": self.service.artifacts.version}])
        self._send(HTTPStatus.NOT_FOUND, [{"error": "NotFound", "detail": path}])

    @staticmethod
    def _bad(what: str):
        raise MalformedPayload(f"missing {what}")

    def _call(self, fn) -> None:
        try:
            self._send(HTTPStatus.OK, fn())
        except RwisError as exc:
            status = next((s for t, s in _ERROR_STATUS.items() if isinstance(exc, t)), HTTPStatus.INTERNAL_SERVER_ERROR)
            body = _error_body(exc)
            if isinstance(exc, Quarantined):
                body["status"] = "quarantined"
            elif isinstance(exc, WarmingUp):
                body["status"] = "warming_up"
            self._send(status, [body])


def make_server(service: PipelineService, host: str = "127.0.0.1", port: int = 8080) -> ThreadingHTTPServer:
    handler = type("Handler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server
