"""Residual correction of physical forecasts.

For every (channel, horizon) cell a boosted ensemble learns the residual
``actual - physical`` from lagged observations, calendar encodings and the
physical prediction itself; the corrected forecast adds it back.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import (
    CHANNELS,
    DEFAULT_LAG_WINDOW,
    HORIZONS,
    FeatureVector,
    StationSeries,
    channel_index,
    feature_dim,
    feature_matrix,
    format_timestamp,
)
from .errors import (
    AlignmentError,
    CellFitError,
    DimensionMismatch,
    EmptyInput,
    FormatError,
    MissingModelCell,
    RwisError,
)
from .gbdt import (
    FEATURE_LAYOUT_VERSION,
    BoostedEnsemble,
    FitReport,
    TrainConfig,
    deserialize,
    fit_ensemble,
    serialize,
)

log = logging.getLogger(__name__)

Cell = tuple[str, int]
GRID_CELLS: tuple[Cell, ...] = tuple((c, h) for c in CHANNELS for h in HORIZONS)
HUMIDITY_RANGE = (0.0, 100.0)


def cell_name(channel: str, horizon: int) -> str:
    return f"{channel}_{horizon}h"


def cell_rng(seed: int, channel: str, horizon: int) -> np.random.Generator:
    """Independent, reproducible stream per (seed, channel, horizon)."""
    return np.random.default_rng(np.random.SeedSequence([seed, channel_index(channel), horizon]))


def compute_residuals(actuals, physical, channel: str, horizon: int) -> np.ndarray:
    """Residuals ``actual[t + h] - physical[t]`` indexed by issue slot ``t``.

    ``actuals`` is the per-slot observed channel. ``physical`` is either the
    per-slot physical stream of shape (n, 4, 3) or an already-extracted
    per-issue-slot column of shape (n,). The last ``h`` slots, and slots
    whose actual or forecast is missing, come out as NaN.
    """
    a = np.asarray(actuals, dtype=float)
    p = np.asarray(physical, dtype=float)
    if p.ndim == 3:
        p = p[:, channel_index(channel), HORIZONS.index(horizon)]
    if a.ndim != 1 or p.shape != a.shape:
        raise AlignmentError(f"actuals {a.shape} and physical {p.shape} are not slot-aligned")
    out = np.full(a.shape, np.nan)
    if horizon < len(a):
        out[: len(a) - horizon] = a[horizon:] - p[: len(a) - horizon]
    return out


@dataclass(eq=False)
class ResidualDataset:
    channel: str
    horizon: int
    X: np.ndarray
    y: np.ndarray
    station_ids: np.ndarray
    issue_times: np.ndarray
    physical: np.ndarray
    lag_window: int = DEFAULT_LAG_WINDOW

    def __post_init__(self):
        if self.X.shape[0] != self.y.size:
            raise AlignmentError("feature rows and residuals differ in length")
        if self.y.size and not np.all(np.isfinite(self.y)):
            raise AlignmentError("residuals must be finite")
        if self.X.shape[0] and self.X.shape[1] != feature_dim(self.lag_window, True):
            raise DimensionMismatch("feature layout does not match the lag window")

    def __len__(self):
        return self.y.size

    @property
    def span(self) -> tuple[str, str] | None:
        if not len(self):
            return None
        return format_timestamp(self.issue_times.min()), format_timestamp(self.issue_times.max())

    @property
    def stations(self) -> list[str]:
        return sorted(set(self.station_ids.tolist()))

    @classmethod
    def concat(cls, parts: Sequence[ResidualDataset]) -> ResidualDataset:
        first = parts[0]
        return cls(
            first.channel,
            first.horizon,
            np.vstack([p.X for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.station_ids for p in parts]),
            np.concatenate([p.issue_times for p in parts]),
            np.concatenate([p.physical for p in parts]),
            first.lag_window,
        )


def residual_rows(
    series: StationSeries,
    physical: np.ndarray,
    channel: str,
    horizon: int,
    lag_window: int = DEFAULT_LAG_WINDOW,
    issue_mask: np.ndarray | None = None,
) -> ResidualDataset:
    """Residual dataset of one station for one cell.

    The feature vector of issue slot ``t`` uses the lags ``t-L+1 .. t`` (the
    observation at issue time is the most recent lag).
    """
    n = len(series)
    ci = channel_index(channel)
    hi = HORIZONS.index(horizon)
    phys = physical[:, ci, hi]
    resid = compute_residuals(series.values[:, ci], phys, channel, horizon)
    issues = np.arange(lag_window - 1, n)
    ok = np.isfinite(resid[issues]) & np.isfinite(phys[issues])
    if issue_mask is not None:
        ok &= np.asarray(issue_mask, dtype=bool)[issues]
    issues = issues[ok]
    X, keep = feature_matrix(series, issues + 1, lag_window, phys[issues])
    issues = issues[keep]
    return ResidualDataset(
        channel,
        horizon,
        X,
        resid[issues],
        np.full(len(issues), series.station_id, dtype=object),
        series.timestamps[issues],
        phys[issues],
        lag_window,
    )


def build_datasets(
    series_list: Sequence[StationSeries],
    physical_list: Sequence[np.ndarray],
    lag_window: int = DEFAULT_LAG_WINDOW,
    issue_masks: Sequence[np.ndarray] | None = None,
) -> dict[Cell, ResidualDataset]:
    out = {}
    for channel, horizon in GRID_CELLS:
        parts = [
            residual_rows(s, p, channel, horizon, lag_window, None if issue_masks is None else issue_masks[i])
            for i, (s, p) in enumerate(zip(series_list, physical_list))
        ]
        out[(channel, horizon)] = ResidualDataset.concat(parts)
    return out


@dataclass(eq=False)
class ModelGrid:
    models: dict[Cell, object]
    lag_window: int = DEFAULT_LAG_WINDOW
    layout_version: int = FEATURE_LAYOUT_VERSION
    metadata: dict = field(default_factory=dict)
    reports: dict[Cell, FitReport] = field(default_factory=dict, repr=False)

    def __getitem__(self, cell: Cell):
        if cell not in self.models:
            raise MissingModelCell(*cell)
        return self.models[cell]

    def __contains__(self, cell: Cell) -> bool:
        return cell in self.models

    def __len__(self):
        return len(self.models)

    @property
    def complete(self) -> bool:
        return all(c in self.models for c in GRID_CELLS)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {}
        for channel, horizon in GRID_CELLS:
            if (channel, horizon) not in self.models:
                continue
            name = f"{cell_name(channel, horizon)}.json"
            (d / name).write_text(serialize(self.models[(channel, horizon)]) + "\n")
            files[cell_name(channel, horizon)] = name
        manifest = {
            "kind": "model_grid",
            "layout_version": self.layout_version,
            "lag_window": self.lag_window,
            "cells": files,
            **self.metadata,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return d

    @classmethod
    def load(cls, directory) -> ModelGrid:
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("kind") != "model_grid":
            raise FormatError(f"{d} does not hold a model grid")
        if manifest["layout_version"] != FEATURE_LAYOUT_VERSION:
            raise FormatError(f"unsupported feature layout v{manifest['layout_version']}")
        models = {}
        for channel, horizon in GRID_CELLS:
            name = manifest["cells"].get(cell_name(channel, horizon))
            if name:
                models[(channel, horizon)] = deserialize((d / name).read_text())
        meta = {k: v for k, v in manifest.items() if k not in ("kind", "layout_version", "lag_window", "cells")}
        return cls(models, manifest["lag_window"], manifest["layout_version"], meta)

    @classmethod
    def null(cls, lag_window: int = DEFAULT_LAG_WINDOW) -> ModelGrid:
        """Grid of zero-stage ensembles predicting 0 everywhere."""
        dim = feature_dim(lag_window, True)
        return cls({cell: BoostedEnsemble(0.0, [], [], dim) for cell in GRID_CELLS}, lag_window)


def train_grid(
    datasets: Mapping[Cell, ResidualDataset],
    cfg: TrainConfig = TrainConfig(),
    lag_window: int = DEFAULT_LAG_WINDOW,
) -> ModelGrid:
    """One boosted ensemble per cell; per-stage MAE reports kept on the grid."""
    for cell in GRID_CELLS:
        if cell not in datasets:
            raise CellFitError(*cell, "no residual dataset")
        if len(datasets[cell]) == 0:
            raise CellFitError(*cell, EmptyInput("empty residual dataset"))
    models, reports = {}, {}
    for channel, horizon in GRID_CELLS:
        ds = datasets[(channel, horizon)]
        try:
            model, report = fit_ensemble(ds.X, ds.y, cfg, cell_rng(cfg.seed, channel, horizon))
        except RwisError as exc:
            raise CellFitError(channel, horizon, exc) from exc
        models[(channel, horizon)] = model
        reports[(channel, horizon)] = report
        log.info(
            "cell %s: %d rows, MAE %.4f -> %.4f",
            cell_name(channel, horizon),
            len(ds),
            report.initial_mae,
            report.final_mae,
        )
    stations = sorted({s for ds in datasets.values() for s in ds.stations})
    spans = [ds.span for ds in datasets.values() if ds.span]
    meta = {
        "stations": stations,
        "training_span": [min(s[0] for s in spans), max(s[1] for s in spans)] if spans else None,
        "train_config": {k: getattr(cfg, k) for k in cfg.__dataclass_fields__},
    }
    return ModelGrid(models, lag_window, FEATURE_LAYOUT_VERSION, meta, reports)


def clamp_channel(channel: str, value):
    if channel == "humidity":
        return np.clip(value, *HUMIDITY_RANGE)
    return value


def correct(physical_value: float, x: FeatureVector, grid: ModelGrid) -> float:
    model = grid[(x.target_channel, x.horizon)]
    arr = x.as_array()
    if arr.size != model.n_features:
        raise DimensionMismatch(f"expected {model.n_features} features, got {arr.size}")
    delta = float(model.predict_many(arr[None, :])[0])
    return float(clamp_channel(x.target_channel, physical_value + delta))


def correct_many(physical_values, X, channel: str, horizon: int, grid: ModelGrid) -> np.ndarray:
    """Vectorized :func:`correct` over rows of one cell."""
    model = grid[(channel, horizon)]
    return clamp_channel(channel, np.asarray(physical_values, dtype=float) + model.predict_many(X))
