"""Benchmarks on synthetic scenarios: forecast MAE grid and detector comparison.

Both benchmarks write per-row audit CSVs from which every reported number
can be recomputed, and both are deterministic for a fixed scenario seed.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .anomaly import (
    ANOMALY,
    InjectionSpec,
    OneStepPredictor,
    Score,
    default_injection_specs,
    inject_all,
    one_step_rows,
    score_counts,
    train_one_step,
    tune_detector_threshold,
)
from .correction import GRID_CELLS, ModelGrid, build_datasets, correct_many, residual_rows, train_grid
from .data import CHANNELS, DEFAULT_LAG_WINDOW, HORIZONS, StationSeries, channel_index, format_timestamp
from .energy import ColumnConfig, SurfaceParams, physical_forecasts
from .errors import DegenerateLabels, OverlapExhaustion, SpecInvalid
from .gbdt import TrainConfig
from .ridge import LAMBDA_GRID, select_lambda
from .scenario import ScenarioData

log = logging.getLogger(__name__)

VARIANTS = ("with_anomalies", "metro_only", "corrected")
ALGORITHMS = ("boosting", "ridge")
# field-data figures shown next to synthetic results for context only
REFERENCE_ROAD_MAE_1H = {"metro_only": 0.84, "corrected": 0.48}
REFERENCE_DETECTOR_F1 = {"boosting": 0.774, "ridge": 0.710}

InjectionFactory = Callable[[str, float, int], Sequence[InjectionSpec]]


@dataclass(frozen=True)
class ForecastRow:
    channel: str
    horizon: int
    variant: str
    mae: float
    n_rows: int


@dataclass(frozen=True)
class DetectorRow:
    algorithm: str
    precision: float
    recall: float
    f1: float
    paper_f1: float
    tp: int
    fp: int
    fn: int

    @classmethod
    def from_score(cls, algorithm: str, s: Score) -> DetectorRow:
        return cls(algorithm, s.precision, s.recall, s.f1, s.paper_f1, s.tp, s.fp, s.fn)


TABLE1_COLUMNS = ("channel", "horizon", "variant", "mae", "n_rows")
TABLE2_COLUMNS = ("algorithm", "precision", "recall", "f1", "paper_f1", "tp", "fp", "fn")
FORECAST_AUDIT_COLUMNS = ("station_id", "issue_time", "channel", "horizon", "variant", "actual", "predicted")
DETECTOR_AUDIT_COLUMNS = ("algorithm", "round", "station_id", "timestamp", "channel", "label", "truth", "residual")


@dataclass(eq=False)
class ReportTable:
    forecast_rows: list[ForecastRow] = field(default_factory=list)
    detector_rows: list[DetectorRow] = field(default_factory=list)
    thresholds: dict[str, dict[str, float]] = field(default_factory=dict)

    def mae(self, channel: str, horizon: int, variant: str) -> float:
        for r in self.forecast_rows:
            if (r.channel, r.horizon, r.variant) == (channel, horizon, variant):
                return r.mae
        raise KeyError((channel, horizon, variant))

    def detector(self, algorithm: str) -> DetectorRow:
        for r in self.detector_rows:
            if r.algorithm == algorithm:
                return r
        raise KeyError(algorithm)

    def write_table1(self, path) -> None:
        _write_rows(path, TABLE1_COLUMNS, ([r.channel, r.horizon, r.variant, repr(r.mae), r.n_rows] for r in self.forecast_rows))

    def write_table2(self, path) -> None:
        _write_rows(
            path,
            TABLE2_COLUMNS,
            ([r.algorithm, repr(r.precision), repr(r.recall), repr(r.f1), repr(r.paper_f1), r.tp, r.fp, r.fn]
             for r in self.detector_rows),
        )

    @staticmethod
    def read_table1(path) -> list[ForecastRow]:
        return [
            ForecastRow(d["channel"], int(d["horizon"]), d["variant"], float(d["mae"]), int(d["n_rows"]))
            for d in _read_rows(path)
        ]

    @staticmethod
    def read_table2(path) -> list[DetectorRow]:
        return [
            DetectorRow(d["algorithm"], float(d["precision"]), float(d["recall"]), float(d["f1"]),
                        float(d["paper_f1"]), int(d["tp"]), int(d["fp"]), int(d["fn"]))
            for d in _read_rows(path)
        ]

    def render(self) -> str:
        """Plain-text tables with the field-data reference figures alongside."""
        lines = []
        if self.forecast_rows:
            lines.append(f"{'channel':<12}{'h':>3}" + "".join(f"{v:>16}" for v in VARIANTS))
            for channel in CHANNELS:
                for h in HORIZONS:
                    try:
                        vals = [self.mae(channel, h, v) for v in VARIANTS]
                    except KeyError:
                        continue
                    lines.append(f"{channel:<12}{h:>3}" + "".join(f"{x:>16.4f}" for x in vals))
            ref = REFERENCE_ROAD_MAE_1H
            lines.append(f"reference (field data) road 1h: metro_only {ref['metro_only']}, corrected {ref['corrected']}")
        if self.detector_rows:
            lines.append(f"{'algorithm':<12}{'precision':>11}{'recall':>9}{'f1':>8}{'paper_f1':>10}")
            for r in self.detector_rows:
                lines.append(f"{r.algorithm:<12}{r.precision:>11.4f}{r.recall:>9.4f}{r.f1:>8.4f}{r.paper_f1:>10.4f}")
            lines.append(
                "reference (field data) f1: "
                + ", ".join(f"{k} {v}" for k, v in REFERENCE_DETECTOR_F1.items())
            )
        return "\n".join(lines)


def _write_rows(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _mae(actual: np.ndarray, predicted: np.ndarray) -> float:
    return float(np.mean(np.abs(actual - predicted)))


def derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class BenchmarkConfig:
    lag_window: int = DEFAULT_LAG_WINDOW
    train: TrainConfig = field(default_factory=TrainConfig)
    model_fraction: float = 0.7
    threshold_rounds: int = 10
    test_rounds: int = 10
    corruption_rounds: int = 3
    ridge_lambdas: tuple[float, ...] = LAMBDA_GRID
    max_injection_attempts: int = 20

    def validate(self) -> None:
        if not 0.0 < self.model_fraction < 1.0:
            raise SpecInvalid("model_fraction must lie in (0, 1)")
        if min(self.threshold_rounds, self.test_rounds, self.corruption_rounds) < 1:
            raise SpecInvalid("need at least one injection round per split")
        self.train.validate()


def default_factory(rate: float) -> InjectionFactory:
    def factory(channel: str, sigma: float, seed: int) -> list[InjectionSpec]:
        return default_injection_specs(channel, sigma, seed=seed, rate=rate)

    return factory


def inject_channel(
    series: StationSeries,
    channel: str,
    sigma: float,
    seed: int,
    factory: InjectionFactory,
    max_attempts: int = 20,
) -> tuple[StationSeries, np.ndarray]:
    """Inject one channel; a draw that cannot be placed is redrawn from the next seed."""
    last = None
    for attempt in range(max_attempts):
        try:
            return inject_all(series, factory(channel, sigma, derived_seed(seed, attempt)))
        except OverlapExhaustion as exc:
            last = exc
    raise last


def corrupt_all_channels(
    series: StationSeries, sigmas: dict[str, float], seed: int, factory: InjectionFactory, max_attempts: int = 20
) -> tuple[StationSeries, dict[str, np.ndarray]]:
    labels = {}
    for channel in CHANNELS:
        series, labels[channel] = inject_channel(
            series, channel, sigmas[channel], derived_seed(seed, channel_index(channel)), factory, max_attempts
        )
    return series, labels


# -- forecast benchmark ---------------------------------------------------------


@dataclass(eq=False)
class ForecastBenchmark:
    report: ReportTable
    grid: ModelGrid
    audit: list[tuple] = field(repr=False, default_factory=list)

    def write_audit(self, path) -> None:
        _write_rows(
            path,
            FORECAST_AUDIT_COLUMNS,
            ([s, t, c, h, v, repr(a), repr(p)] for s, t, c, h, v, a, p in self.audit),
        )


def run_forecast_benchmark(
    data: ScenarioData,
    cfg: BenchmarkConfig = BenchmarkConfig(),
    column: ColumnConfig | None = None,
    params: SurfaceParams | None = None,
    factory: InjectionFactory | None = None,
    grid: ModelGrid | None = None,
) -> ForecastBenchmark:
    """MAE per (channel, horizon) for the three variants on held-out data.

    The corrector trains on the training stations (truncated at the time
    cutoff). Held-out stations are scored at issue times after the cutoff,
    on the rows where all three variants are defined: physical forecasts
    from anomaly-corrupted input, from clean input, and clean-input
    forecasts plus correction. Actuals are always the clean observations.
    """
    cfg.validate()
    column = column or ColumnConfig()
    params = params or SurfaceParams()
    factory = factory or default_factory(data.spec.injection_rate)
    L = cfg.lag_window
    if grid is None:
        phys_train = [physical_forecasts(s, column, params) for s in data.train]
        grid = train_grid(build_datasets(data.train, phys_train, L), cfg.train, L)
    sigmas = data.channel_sigma()

    collected = {cell: {v: ([], []) for v in VARIANTS} for cell in GRID_CELLS}
    audit = []
    for k, held in enumerate(data.heldout):
        phys = physical_forecasts(held, column, params)
        phys_bad = []
        for r in range(cfg.corruption_rounds):
            corrupted, _ = corrupt_all_channels(
                held, sigmas, derived_seed(data.spec.seed, 1, k, r), factory, cfg.max_injection_attempts
            )
            phys_bad.append(physical_forecasts(corrupted, column, params))
        mask = data.eval_mask(held)
        for channel, horizon in GRID_CELLS:
            ci, hi = channel_index(channel), HORIZONS.index(horizon)
            ds = residual_rows(held, phys, channel, horizon, L, mask)
            issues = np.searchsorted(held.timestamps, ds.issue_times)
            bad = np.stack([pb[issues, ci, hi] for pb in phys_bad])
            ok = np.all(np.isfinite(bad), axis=0)
            issues = issues[ok]
            actual = held.values[issues + horizon, ci]
            preds = {
                "with_anomalies": bad[:, ok].ravel(),
                "metro_only": ds.physical[ok],
                "corrected": correct_many(ds.physical[ok], ds.X[ok], channel, horizon, grid),
            }
            for variant in VARIANTS:
                reps = cfg.corruption_rounds if variant == "with_anomalies" else 1
                acts = np.tile(actual, reps)
                collected[(channel, horizon)][variant][0].append(acts)
                collected[(channel, horizon)][variant][1].append(preds[variant])
                for t, a, p in zip(np.tile(issues, reps), acts, preds[variant]):
                    audit.append(
                        (held.station_id, format_timestamp(held.timestamps[t]), channel, horizon, variant, float(a), float(p))
                    )

    rows = []
    for channel, horizon in GRID_CELLS:
        for variant in VARIANTS:
            a = np.concatenate(collected[(channel, horizon)][variant][0])
            p = np.concatenate(collected[(channel, horizon)][variant][1])
            rows.append(ForecastRow(channel, horizon, variant, _mae(a, p), int(a.size)))
    return ForecastBenchmark(ReportTable(forecast_rows=rows), grid, audit)


def recompute_table1(audit_path) -> list[ForecastRow]:
    """Forecast rows recomputed from a persisted forecast audit CSV."""
    groups: dict[tuple, tuple[list, list]] = {}
    for d in _read_rows(audit_path):
        key = (d["channel"], int(d["horizon"]), d["variant"])
        g = groups.setdefault(key, ([], []))
        g[0].append(float(d["actual"]))
        g[1].append(float(d["predicted"]))
    return [
        ForecastRow(c, h, v, _mae(np.array(g[0]), np.array(g[1])), len(g[0]))
        for (c, h, v), g in groups.items()
    ]


# -- detector benchmark ---------------------------------------------------------


@dataclass(eq=False)
class DetectorBenchmark:
    report: ReportTable
    predictors: dict[str, OneStepPredictor]
    audit: list[tuple] = field(repr=False, default_factory=list)

    def write_audit(self, path) -> None:
        _write_rows(
            path,
            DETECTOR_AUDIT_COLUMNS,
            ([a, r, s, t, c, lab, tr, repr(res)] for a, r, s, t, c, lab, tr, res in self.audit),
        )


def split_training_stations(train: Sequence[StationSeries], model_fraction: float):
    """(model stations, threshold stations), both nonempty, in station order."""
    if len(train) < 2:
        raise SpecInvalid("detector benchmark needs at least two training stations")
    n_model = min(max(1, int(round(model_fraction * len(train)))), len(train) - 1)
    return list(train[:n_model]), list(train[n_model:])


def _ridge_lambdas(model_st, thr_st, cfg: BenchmarkConfig) -> dict[str, float]:
    """Per-channel lambda chosen on clean threshold-station rows."""
    L = cfg.lag_window
    out = {}
    for channel in CHANNELS:
        ci = channel_index(channel)
        tr = [one_step_rows(s, channel, L) for s in model_st]
        va = [one_step_rows(s, channel, L) for s in thr_st]
        Xt = np.vstack([p[0] for p in tr])
        Xv = np.vstack([p[0] for p in va])
        last = 4 * (L - 1) + ci
        yt = np.concatenate([p[1] for p in tr]) - Xt[:, last]
        yv = np.concatenate([p[1] for p in va]) - Xv[:, last]
        out[channel] = select_lambda(Xt, yt, Xv, yv, cfg.ridge_lambdas)
    return out


def run_detector_benchmark(
    data: ScenarioData,
    cfg: BenchmarkConfig = BenchmarkConfig(),
    factory: InjectionFactory | None = None,
) -> DetectorBenchmark:
    """Boosting- and ridge-backed detectors tuned and scored on injected faults.

    Training stations split into model stations (the one-step predictors)
    and threshold stations (per-channel threshold tuning on injected
    copies). Held-out stations receive the same injection process over
    their full span, and slots after the time cutoff are scored. Each
    round injects one channel at a time so labels stay per channel;
    confusion counts are pooled over channels, rounds and stations.
    Both backbones see identical injected data.
    """
    cfg.validate()
    factory = factory or default_factory(data.spec.injection_rate)
    model_st, thr_st = split_training_stations(data.train, cfg.model_fraction)
    sigmas = data.channel_sigma()
    seed = data.spec.seed

    tuning = {
        channel: [
            inject_channel(s, channel, sigmas[channel], derived_seed(seed, 2, channel_index(channel), j, r), factory,
                           cfg.max_injection_attempts)
            for j, s in enumerate(thr_st)
            for r in range(cfg.threshold_rounds)
        ]
        for channel in CHANNELS
    }
    testing = {
        channel: [
            (k, r, *inject_channel(s, channel, sigmas[channel], derived_seed(seed, 3, channel_index(channel), k, r),
                                   factory, cfg.max_injection_attempts))
            for k, s in enumerate(data.heldout)
            for r in range(cfg.test_rounds)
        ]
        for channel in CHANNELS
    }
    n_test_anom = sum(
        int(np.sum(labels[data.eval_mask(s)] == ANOMALY)) for rows in testing.values() for (_, _, s, labels) in rows
    )
    if n_test_anom == 0:
        raise DegenerateLabels("held-out data drew no injected anomalies after the cutoff")

    lambdas = _ridge_lambdas(model_st, thr_st, cfg)
    predictors = {
        "boosting": train_one_step(model_st, "gbdt", cfg.train, lag_window=cfg.lag_window),
        "ridge": train_one_step(model_st, "ridge", lam=lambdas, lag_window=cfg.lag_window),
    }
    rows, thresholds, audit = [], {}, []
    for algorithm in ALGORITHMS:
        pr = predictors[algorithm]
        tp = fp = fn = 0
        thresholds[algorithm] = {}
        for channel in CHANNELS:
            delta = tune_detector_threshold(pr, tuning[channel], channel).delta
            thresholds[algorithm][channel] = delta
            for k, r, series, labels in testing[channel]:
                slots, resid, flags = pr.detect(series, channel, delta)
                m = data.eval_mask(series)[slots]
                slots, resid, flags = slots[m], resid[m], flags[m]
                truth = labels[slots]
                pa, ta = flags == ANOMALY, truth == ANOMALY
                tp += int(np.sum(pa & ta))
                fp += int(np.sum(pa & ~ta))
                fn += int(np.sum(~pa & ta))
                for t, lab, tr, res in zip(slots, flags, truth, resid):
                    audit.append(
                        (algorithm, r, series.station_id, format_timestamp(series.timestamps[t]), channel,
                         int(lab), int(tr), float(res))
                    )
        rows.append(DetectorRow.from_score(algorithm, score_counts(tp, fp, fn)))
        log.info("detector %s: f1 %.4f", algorithm, rows[-1].f1)
    return DetectorBenchmark(ReportTable(detector_rows=rows, thresholds=thresholds), predictors, audit)


def recompute_table2(audit_path) -> list[DetectorRow]:
    """Detector rows recomputed from a persisted detector audit CSV."""
    counts: dict[str, list[int]] = {}
    for d in _read_rows(audit_path):
        c = counts.setdefault(d["algorithm"], [0, 0, 0])
        pa, ta = int(d["label"]) == ANOMALY, int(d["truth"]) == ANOMALY
        c[0] += pa and ta
        c[1] += pa and not ta
        c[2] += ta and not pa
    return [DetectorRow.from_score(a, score_counts(*c)) for a, c in counts.items()]


def write_thresholds(path, thresholds: dict[str, dict[str, float]]) -> None:
    _write_rows(
        path,
        ("algorithm", "channel", "delta"),
        ([a, c, repr(d)] for a, per in thresholds.items() for c, d in per.items()),
    )
