"""Offline pipeline: training, threshold tuning and batch detection/correction.

Everything the service needs is bundled in :class:`Artifacts`, saved as a
directory whose manifest carries a content hash used as the model version.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import timedelta
from pathlib import Path
from typing import Sequence

import numpy as np

from .anomaly import (
    DetectorConfig,
    LabelRecord,
    OneStepPredictor,
    label_records,
    train_one_step,
    tune_detector_threshold,
)
from .config import Settings
from .correction import GRID_CELLS, ModelGrid, build_datasets, correct_many, train_grid
from .data import CHANNELS, HORIZONS, StationSeries, channel_index, feature_matrix, format_timestamp, regularize
from .energy import ColumnConfig, SurfaceParams, physical_forecasts
from .errors import EmptyInput, FormatError
from .evaluation import default_factory, derived_seed, inject_channel, split_training_stations
from .gbdt import deserialize, serialize

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Artifacts:
    grid: ModelGrid
    detector: OneStepPredictor
    detector_config: DetectorConfig
    column: ColumnConfig = field(default_factory=ColumnConfig)
    surface: SurfaceParams = field(default_factory=SurfaceParams)
    version: str = ""

    @property
    def lag_window(self) -> int:
        return self.grid.lag_window

    def save(self, directory) -> Path:
        d = Path(directory)
        self.grid.save(d / "grid")
        det = d / "detector"
        det.mkdir(parents=True, exist_ok=True)
        for channel in CHANNELS:
            (det / f"{channel}.json").write_text(serialize(self.detector.models[channel]) + "\n")
        (det / "detector.json").write_text(
            json.dumps(
                {
                    "kind": self.detector.kind,
                    "lag_window": self.detector.lag_window,
                    "thresholds": dict(self.detector_config.thresholds),
                    "window": self.detector_config.window,
                    "count": self.detector_config.count,
                },
                sort_keys=True,
                indent=1,
            )
            + "\n"
        )
        (d / "physics.json").write_text(
            json.dumps({"column": asdict(self.column), "surface": asdict(self.surface)}, sort_keys=True, indent=1) + "\n"
        )
        self.version = content_version(d)
        (d / "manifest.json").write_text(
            json.dumps({"kind": "rwis_artifacts", "version": self.version}, sort_keys=True, indent=1) + "\n"
        )
        return d

    @classmethod
    def load(cls, directory) -> Artifacts:
        d = Path(directory)
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except FileNotFoundError as exc:
            raise FormatError(f"{d} holds no artifacts manifest") from exc
        if manifest.get("kind") != "rwis_artifacts":
            raise FormatError(f"{d} does not hold pipeline artifacts")
        grid = ModelGrid.load(d / "grid")
        meta = json.loads((d / "detector" / "detector.json").read_text())
        models = {c: deserialize((d / "detector" / f"{c}.json").read_text()) for c in CHANNELS}
        physics = json.loads((d / "physics.json").read_text())
        col = physics["column"]
        column = ColumnConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in col.items()})
        return cls(
            grid,
            OneStepPredictor(models, meta["lag_window"], meta["kind"]),
            DetectorConfig(meta["thresholds"], meta["window"], meta["count"]),
            column,
            SurfaceParams(**physics["surface"]),
            manifest["version"],
        )


def content_version(directory) -> str:
    """Hash of every artifact file except the manifest, in sorted path order."""
    d = Path(directory)
    h = hashlib.sha256()
    for p in sorted(q for q in d.rglob("*") if q.is_file() and q != d / "manifest.json"):
        h.update(p.relative_to(d).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def prepare(series_list: Sequence[StationSeries], settings: Settings) -> list[StationSeries]:
    if not series_list:
        raise EmptyInput("no station series to train on")
    cadence = timedelta(minutes=settings.features.cadence_minutes)
    return [regularize(s, cadence) for s in series_list]


def tune_thresholds(
    predictor: OneStepPredictor,
    series_list: Sequence[StationSeries],
    sigmas: dict[str, float],
    settings: Settings,
) -> dict[str, float]:
    """Per-channel thresholds tuned on injected copies of ``series_list``."""
    factory = default_factory(settings.detector.injection_rate)
    seed = settings.train.seed
    out = {}
    for channel in CHANNELS:
        ci = channel_index(channel)
        labelled = [
            inject_channel(s, channel, sigmas[channel], derived_seed(seed, 4, ci, j, r), factory)
            for j, s in enumerate(series_list)
            for r in range(settings.detector.threshold_rounds)
        ]
        out[channel] = tune_detector_threshold(predictor, labelled, channel).delta
    return out


def channel_sigmas(series_list: Sequence[StationSeries]) -> dict[str, float]:
    stacked = np.vstack([s.values for s in series_list])
    return {c: float(np.nanstd(stacked[:, i])) for i, c in enumerate(CHANNELS)}


@dataclass
class TrainReport:
    cells: list[tuple[str, int, int, float, float]]
    thresholds: dict[str, float]
    model_stations: list[str]
    threshold_stations: list[str]

    def render(self) -> str:
        lines = [f"{'cell':<16}{'rows':>7}{'MAE start':>12}{'MAE end':>12}"]
        for channel, horizon, n, a, b in self.cells:
            lines.append(f"{channel + '_' + str(horizon) + 'h':<16}{n:>7}{a:>12.4f}{b:>12.4f}")
        lines.append("detector thresholds: " + ", ".join(f"{c} {d:.4f}" for c, d in self.thresholds.items()))
        lines.append(f"detector model stations: {', '.join(self.model_stations)}; "
                     f"threshold stations: {', '.join(self.threshold_stations)}")
        return "\n".join(lines)


def train_pipeline(series_list: Sequence[StationSeries], settings: Settings) -> tuple[Artifacts, TrainReport]:
    """Regularize, forecast, fit the correction grid, then the detector and its thresholds."""
    series_list = prepare(series_list, settings)
    L = settings.features.lag_window
    phys = [physical_forecasts(s, settings.column, settings.surface) for s in series_list]
    datasets = build_datasets(series_list, phys, L)
    grid = train_grid(datasets, settings.train, L)

    model_st, thr_st = split_training_stations(series_list, settings.detector.model_fraction)
    kind = settings.detector.kind
    predictor = train_one_step(model_st, kind, settings.train, lag_window=L)
    thresholds = tune_thresholds(predictor, thr_st, channel_sigmas(series_list), settings)
    det_cfg = DetectorConfig(thresholds, settings.detector.window, settings.detector.count)
    artifacts = Artifacts(grid, predictor, det_cfg, settings.column, settings.surface)
    cells = [
        (c, h, len(datasets[(c, h)]), grid.reports[(c, h)].initial_mae, grid.reports[(c, h)].final_mae)
        for c, h in GRID_CELLS
    ]
    report = TrainReport(cells, thresholds, [s.station_id for s in model_st], [s.station_id for s in thr_st])
    return artifacts, report


def detect_labels(artifacts: Artifacts, series: StationSeries) -> list[LabelRecord]:
    """Label stream of the online detector replayed over a whole series."""
    out = []
    for channel in CHANNELS:
        delta = artifacts.detector_config.thresholds[channel]
        slots, resid, flags = artifacts.detector.detect(series, channel, delta)
        out.extend(label_records(series, channel, slots, flags, resid))
    out.sort(key=lambda r: (r.timestamp, CHANNELS.index(r.channel)))
    return out


CORRECTION_COLUMNS = ("station_id", "issue_time", "channel", "horizon", "physical", "corrected")


def correct_series(artifacts: Artifacts, series: StationSeries) -> list[tuple]:
    """(station, issue time, channel, horizon, physical, corrected) for every issue slot."""
    phys = physical_forecasts(series, artifacts.column, artifacts.surface)
    rows = []
    for channel, horizon in GRID_CELLS:
        issues, X, p = forecast_rows(series, phys, channel, horizon, artifacts.lag_window)
        if not len(issues):
            continue
        corrected = correct_many(p, X, channel, horizon, artifacts.grid)
        for t, a, b in zip(issues, p, corrected):
            rows.append((series.station_id, format_timestamp(series.timestamps[t]), channel, horizon, float(a), float(b)))
    rows.sort(key=lambda r: (r[1], CHANNELS.index(r[2]), r[3]))
    return rows


def forecast_rows(series: StationSeries, phys: np.ndarray, channel: str, horizon: int, lag_window: int):
    """Issue slots with a physical forecast and a complete lag window (actuals not required)."""
    ci, hi = channel_index(channel), HORIZONS.index(horizon)
    col = phys[:, ci, hi]
    issues = np.arange(lag_window - 1, len(series))
    issues = issues[np.isfinite(col[issues])]
    X, keep = feature_matrix(series, issues + 1, lag_window, col[issues])
    issues = issues[keep]
    return issues, X, col[issues]
