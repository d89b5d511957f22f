"""Broken-sensor detection by thresholding one-step prediction residuals.

Thresholds are tuned on data carrying synthetic faults of three kinds:
isolated uniform spikes, short Poisson bursts and long Gaussian segments.
Anomalies (label -1) are the positive class when scoring.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import CHANNELS, DEFAULT_LAG_WINDOW, StationSeries, channel_index, feature_matrix, format_timestamp
from .errors import (
    DegenerateLabels,
    LengthMismatch,
    NonFiniteInput,
    OutOfRange,
    OverlapExhaustion,
    SpanTooShort,
)
from .gbdt import TrainConfig, fit_ensemble
from .ridge import fit_ridge

NORMAL = 1
ANOMALY = -1

KINDS = ("single", "short_term", "long_term")
DEFAULT_RATE = 10.0  # events per 1000 slots, all kinds together
DEFAULT_WINDOW = 24
DEFAULT_COUNT = 3


@dataclass(frozen=True)
class InjectionSpec:
    """One synthetic fault family for one channel.

    Ranges are inclusive ``(lo, hi)`` pairs. ``amplitude`` and ``sigma``
    are in channel units; ``lam`` is the dimensionless Poisson intensity,
    multiplied by ``scale`` (channel units) once centred.
    """

    kind: str
    channel: str
    rate: float
    amplitude: tuple[float, float] = (3.0, 6.0)
    lam: tuple[float, float] = (1.0, 4.0)
    scale: float = 1.0
    sigma: tuple[float, float] = (1.0, 3.0)
    length: tuple[int, int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise OutOfRange(f"unknown anomaly kind {self.kind!r}")
        channel_index(self.channel)
        if not self.rate > 0:
            raise OutOfRange("rate must be positive")
        for name in ("amplitude", "lam", "sigma"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise OutOfRange(f"empty {name} range")
        if self.length is None:
            object.__setattr__(self, "length", {"single": (1, 1), "short_term": (2, 6), "long_term": (24, 96)}[self.kind])
        lo, hi = self.length
        min_len = {"single": 1, "short_term": 2, "long_term": 24}[self.kind]
        if lo > hi or lo < min_len:
            raise OutOfRange(f"{self.kind} lengths must satisfy {min_len} <= lo <= hi")


def default_injection_specs(
    channel: str, sigma_ch: float, seed: int = 0, rate: float = DEFAULT_RATE
) -> list[InjectionSpec]:
    """The three fault families with magnitudes scaled to the channel's spread."""
    per_kind = rate / len(KINDS)
    return [
        InjectionSpec("single", channel, per_kind, amplitude=(3 * sigma_ch, 6 * sigma_ch), seed=seed),
        InjectionSpec("short_term", channel, per_kind, lam=(1.0, 4.0), scale=sigma_ch, seed=seed + 1),
        InjectionSpec("long_term", channel, per_kind, sigma=(1 * sigma_ch, 3 * sigma_ch), seed=seed + 2),
    ]


def _event_noise(spec: InjectionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "single":
        a = rng.uniform(*spec.amplitude)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return np.full(n, sign * a)
    if spec.kind == "short_term":
        lam = rng.uniform(*spec.lam)
        return spec.scale * (rng.poisson(lam, size=n) - lam)
    sigma = rng.uniform(*spec.sigma)
    return rng.normal(0.0, sigma, size=n)


def inject(
    series: StationSeries,
    spec: InjectionSpec,
    labels: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[StationSeries, np.ndarray]:
    """Corrupt one channel of ``series``; returns (corrupted copy, labels).

    Draw order per call: event count ~ Poisson(rate * n / 1000); then per
    event its length, its start among the free positions, and its noise.
    Events never overlap each other, slots already labelled in ``labels``,
    or gaps.
    """
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n = len(series)
    lo, hi = spec.length
    if n < lo:
        raise SpanTooShort(f"series of {n} slots cannot hold a {lo}-slot {spec.kind} event")
    labels = np.full(n, NORMAL, dtype=np.int8) if labels is None else np.array(labels, dtype=np.int8)
    if labels.shape != (n,):
        raise LengthMismatch("labels must have one entry per slot")
    values = np.array(series.values)
    ci = channel_index(spec.channel)
    blocked = (labels == ANOMALY) | series.gap_mask
    n_events = int(rng.poisson(spec.rate * n / 1000.0))
    for _ in range(n_events):
        length = int(rng.integers(lo, hi + 1))
        if length > n:
            raise OverlapExhaustion(f"no room for a {length}-slot event")
        # a start is free when the window [s, s + length) holds no blocked slot
        csum = np.concatenate([[0], np.cumsum(blocked, dtype=np.int64)])
        starts = np.flatnonzero(csum[length:] - csum[:-length] == 0)
        if starts.size == 0:
            raise OverlapExhaustion(f"cannot place {spec.kind} event of length {length} without overlap")
        s = int(starts[rng.integers(starts.size)])
        values[s : s + length, ci] += _event_noise(spec, length, rng)
        labels[s : s + length] = ANOMALY
        blocked[s : s + length] = True
    return series.with_values(values), labels


def inject_all(
    series: StationSeries, specs: Sequence[InjectionSpec], labels: np.ndarray | None = None
) -> tuple[StationSeries, np.ndarray]:
    """Apply several specs in order; each keeps its own seeded stream."""
    for spec in specs:
        series, labels = inject(series, spec, labels)
    if labels is None:
        labels = np.full(len(series), NORMAL, dtype=np.int8)
    return series, labels


def detect(actual: float, predicted: float, delta: float) -> int:
    if not (math.isfinite(actual) and math.isfinite(predicted) and math.isfinite(delta)):
        raise NonFiniteInput("detect inputs must be finite")
    if not delta > 0:
        raise OutOfRange("threshold must be positive")
    return NORMAL if abs(actual - predicted) <= delta else ANOMALY


def detect_residuals(residuals, delta: float) -> np.ndarray:
    """Vectorized :func:`detect` on precomputed absolute residuals."""
    r = np.asarray(residuals, dtype=float)
    if not delta > 0:
        raise OutOfRange("threshold must be positive")
    return np.where(r <= delta, NORMAL, ANOMALY).astype(np.int8)


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float
    paper_f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0


def score_counts(tp: int, fp: int, fn: int) -> Score:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    denom = 2 * tp + fp + fn
    # 2pr/(p+r) == 2tp/(2tp+fp+fn) whenever p + r > 0, and it is exact in floats
    f1 = 2 * tp / denom if tp else 0.0
    paper_f1 = tp / denom if tp else 0.0
    return Score(precision, recall, f1, paper_f1, tp, fp, fn)


def score(labels_pred, labels_true) -> Score:
    p = np.asarray(labels_pred)
    t = np.asarray(labels_true)
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predicted vs {t.size} true labels")
    pa = p == ANOMALY
    ta = t == ANOMALY
    return score_counts(int(np.sum(pa & ta)), int(np.sum(pa & ~ta)), int(np.sum(~pa & ta)))


@dataclass(frozen=True)
class ThresholdResult:
    delta: float
    score: Score
    candidates: np.ndarray = field(repr=False, default=None)
    objective_values: np.ndarray = field(repr=False, default=None)


def threshold_candidates(residuals) -> np.ndarray:
    u = np.unique(np.abs(np.asarray(residuals, dtype=float)))
    mids = 0.5 * (u[:-1] + u[1:])
    lower = [u[0] / 2.0] if u[0] > 0 else []
    upper = [2.0 * u[-1] if u[-1] > 0 else 1.0]
    return np.concatenate([lower, mids, upper])


def sweep_counts(residuals, labels_true, deltas) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(tp, fp, fn) for each threshold, flagging residual > delta."""
    r = np.abs(np.asarray(residuals, dtype=float))
    t = np.asarray(labels_true) == ANOMALY
    ra = np.sort(r[t])
    rn = np.sort(r[~t])
    d = np.asarray(deltas, dtype=float)
    tp = ra.size - np.searchsorted(ra, d, side="right")
    fp = rn.size - np.searchsorted(rn, d, side="right")
    fn = ra.size - tp
    return tp, fp, fn


def tune_threshold(residuals, labels_true, objective: str = "f1") -> ThresholdResult:
    """Threshold maximizing F1 over midpoints of the sorted residual magnitudes.

    Ties go to the larger threshold. ``objective="paper_f1"`` uses
    p r / (p + r) instead; it has the same maximizers.
    """
    r = np.asarray(residuals, dtype=float)
    t = np.asarray(labels_true)
    if r.shape != t.shape:
        raise LengthMismatch("residuals and labels differ in length")
    if not np.all(np.isfinite(r)):
        raise NonFiniteInput("residuals must be finite")
    n_anom = int(np.sum(t == ANOMALY))
    if n_anom == 0 or n_anom == t.size:
        raise DegenerateLabels("threshold tuning needs both normal and anomalous slots")
    cands = threshold_candidates(r)
    tp, fp, fn = sweep_counts(r, t, cands)
    denom = 2 * tp + fp + fn
    if objective == "f1":
        values = np.where(tp > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    elif objective == "paper_f1":
        values = np.where(tp > 0, tp / np.maximum(denom, 1), 0.0)
    else:
        raise OutOfRange(f"unknown objective {objective!r}")
    best = int(np.flatnonzero(values == values.max())[-1])
    return ThresholdResult(
        float(cands[best]), score_counts(int(tp[best]), int(fp[best]), int(fn[best])), cands, values
    )


class GateStatus(str, enum.Enum):
    PASS = "pass"
    QUARANTINED = "quarantined"


@dataclass(frozen=True)
class DetectorConfig:
    thresholds: Mapping[str, float]
    window: int = DEFAULT_WINDOW
    count: int = DEFAULT_COUNT

    def __post_init__(self):
        for ch, d in self.thresholds.items():
            channel_index(ch)
            if not d > 0:
                raise OutOfRange(f"threshold for {ch} must be positive")
        if not 1 <= self.count <= self.window:
            raise OutOfRange("quarantine count must satisfy 1 <= k <= W")


def quarantine_gate(recent_labels: Sequence[int], cfg: DetectorConfig) -> GateStatus:
    labels = list(recent_labels)
    if len(labels) > cfg.window:
        raise OutOfRange(f"window holds {len(labels)} labels, more than W={cfg.window}")
    n_anom = sum(1 for x in labels if x == ANOMALY)
    return GateStatus.QUARANTINED if n_anom >= cfg.count else GateStatus.PASS


# -- one-step-ahead predictors backing the detector --------------------------

def one_step_rows(
    series: StationSeries, channel: str, lag_window: int = DEFAULT_LAG_WINDOW
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, y, slots): predict slot t of ``channel`` from lags t-L .. t-1.

    No physical-model inputs; rows whose lag window has a gap, or whose
    target is missing, are dropped.
    """
    ci = channel_index(channel)
    slots = np.arange(lag_window, len(series))
    y_all = series.values[slots, ci]
    slots = slots[np.isfinite(y_all)]
    X, keep = feature_matrix(series, slots, lag_window)
    slots = slots[keep]
    return X, series.values[slots, ci], slots


def _last_lag(X: np.ndarray, ci: int, lag_window: int) -> np.ndarray:
    # lags are time-major with 4 channels each; the newest block comes last
    return X[:, 4 * (lag_window - 1) + ci]


@dataclass(eq=False)
class OneStepPredictor:
    """Per-channel one-step models (boosted or ridge) on the detector layout.

    Each model learns the step ``y[t] - y[t-1]``; the prediction adds it to
    the newest lag, so both backbones refine the same persistence baseline.
    """

    models: dict[str, object]
    lag_window: int = DEFAULT_LAG_WINDOW
    kind: str = "gbdt"

    def predict_rows(self, X, channel: str) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if not len(X):
            return np.empty(0)
        return _last_lag(X, channel_index(channel), self.lag_window) + self.models[channel].predict_many(X)

    def predict_series(self, series: StationSeries, channel: str):
        """(slots, predictions, actuals) for every predictable slot."""
        X, y, slots = one_step_rows(series, channel, self.lag_window)
        return slots, self.predict_rows(X, channel), y

    def residuals(self, series: StationSeries, channel: str):
        slots, pred, y = self.predict_series(series, channel)
        return slots, np.abs(y - pred)

    def detect_series(self, series: StationSeries, channel: str, deltas):
        """Run the online detector over ``series`` once per threshold in ``deltas``.

        Slots are visited in time order. A slot whose residual exceeds the
        threshold is flagged, and inside the detector's own lag context its
        value is replaced by the prediction, so one fault does not poison
        the next ``L`` predictions. The stored series is never modified.

        Returns ``(slots, residuals, flags)`` with residuals and flags of
        shape (len(deltas), len(slots)); flags use the label convention.
        """
        deltas = np.atleast_1d(np.asarray(deltas, dtype=float))
        if not np.all(deltas > 0):
            raise OutOfRange("thresholds must be positive")
        ci = channel_index(channel)
        L = self.lag_window
        X, y, slots = one_step_rows(series, channel, L)
        K, m = len(deltas), len(slots)
        base = self.predict_rows(X, channel)
        resid = np.empty((K, m))
        flags = np.full((K, m), NORMAL, dtype=np.int8)
        work = np.tile(series.values[:, ci], (K, 1))
        last_sub = np.full(K, -(10**9))
        prev_bad = np.zeros(K, dtype=bool)
        lag_cols = 4 * np.arange(L) + ci
        for i, t in enumerate(slots):
            pred = np.full(K, base[i])
            hot = np.flatnonzero(t - last_sub <= L)
            if hot.size:
                rows = np.repeat(X[i : i + 1], hot.size, axis=0)
                rows[:, lag_cols] = work[hot, t - L : t]
                pred[hot] = self.predict_rows(rows, channel)
            r = np.abs(y[i] - pred)
            resid[:, i] = r
            bad = r > deltas
            flags[bad, i] = ANOMALY
            sub = bad & ~prev_bad
            work[sub, t] = pred[sub]
            last_sub[sub] = t
            prev_bad = bad
        return slots, resid, flags

    def detect(self, series: StationSeries, channel: str, delta: float):
        """(slots, residuals, labels) of the online detector at one threshold."""
        slots, resid, flags = self.detect_series(series, channel, [delta])
        return slots, resid[0], flags[0]


def tune_detector_threshold(
    predictor: OneStepPredictor,
    labelled: Sequence[tuple[StationSeries, np.ndarray]],
    channel: str,
    n_coarse: int = 64,
    n_fine: int = 32,
) -> ThresholdResult:
    """F1-optimal threshold of the online detector on labelled series.

    Residuals of the online detector depend on the threshold (flagged values
    leave its lag context), so every candidate is scored by running the
    detector. Candidates are quantiles of the pooled one-step residuals,
    then a finer grid around the best one; ties go to the larger threshold.
    """
    plain, truth = [], []
    for series, labels in labelled:
        slots, r = predictor.residuals(series, channel)
        plain.append(r)
        truth.append(np.asarray(labels)[slots])
    plain = np.concatenate(plain)
    if not np.all(np.isfinite(plain)):
        raise NonFiniteInput("residuals must be finite")
    t_all = np.concatenate(truth)
    n_anom = int(np.sum(t_all == ANOMALY))
    if n_anom == 0 or n_anom == t_all.size:
        raise DegenerateLabels("threshold tuning needs both normal and anomalous slots")

    def evaluate(deltas):
        tp = np.zeros(len(deltas), dtype=np.int64)
        fp = np.zeros_like(tp)
        fn = np.zeros_like(tp)
        for (series, labels) in labelled:
            slots, _, flags = predictor.detect_series(series, channel, deltas)
            ta = np.asarray(labels)[slots] == ANOMALY
            pa = flags == ANOMALY
            tp += np.sum(pa & ta, axis=1)
            fp += np.sum(pa & ~ta, axis=1)
            fn += np.sum(~pa & ta, axis=1)
        return tp, fp, fn

    floor = max(float(np.min(plain[plain > 0])) / 2.0 if np.any(plain > 0) else 1e-6, 1e-12)
    coarse = np.unique(np.maximum(np.quantile(plain, np.linspace(0.0, 1.0, n_coarse)), floor))
    tp, fp, fn = evaluate(coarse)
    f1 = np.where(tp > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    j = int(np.flatnonzero(f1 == f1.max())[-1])
    lo = coarse[max(j - 1, 0)]
    hi = coarse[min(j + 1, len(coarse) - 1)]
    fine = np.unique(np.concatenate([np.linspace(lo, hi, n_fine), [coarse[j]]]))
    tp2, fp2, fn2 = evaluate(fine)
    cands = np.concatenate([coarse, fine])
    tp, fp, fn = np.concatenate([tp, tp2]), np.concatenate([fp, fp2]), np.concatenate([fn, fn2])
    order = np.argsort(cands, kind="stable")
    cands, tp, fp, fn = cands[order], tp[order], fp[order], fn[order]
    values = np.where(tp > 0, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 0.0)
    best = int(np.flatnonzero(values == values.max())[-1])
    return ThresholdResult(
        float(cands[best]), score_counts(int(tp[best]), int(fp[best]), int(fn[best])), cands, values
    )


def train_one_step(
    series_list: Sequence[StationSeries],
    kind: str = "gbdt",
    cfg: TrainConfig = TrainConfig(),
    lam: float | Mapping[str, float] = 1.0,
    lag_window: int = DEFAULT_LAG_WINDOW,
    channels: Iterable[str] = CHANNELS,
) -> OneStepPredictor:
    models = {}
    for channel in channels:
        parts = [one_step_rows(s, channel, lag_window) for s in series_list]
        X = np.vstack([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        step = y - _last_lag(X, channel_index(channel), lag_window)
        if kind == "gbdt":
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, channel_index(channel), 0]))
            models[channel], _ = fit_ensemble(X, step, cfg, rng)
        elif kind == "ridge":
            lam_c = lam[channel] if isinstance(lam, Mapping) else lam
            models[channel] = fit_ridge(X, step, lam_c)
        else:
            raise OutOfRange(f"unknown predictor kind {kind!r}")
    return OneStepPredictor(models, lag_window, kind)


# -- label streams -----------------------------------------------------------

LABEL_COLUMNS = ("station_id", "timestamp", "channel", "label", "residual")


@dataclass(frozen=True)
class LabelRecord:
    station_id: str
    timestamp: str
    channel: str
    label: int
    residual: float


def label_records(series: StationSeries, channel: str, slots, labels, residuals) -> list[LabelRecord]:
    return [
        LabelRecord(series.station_id, format_timestamp(series.timestamps[s]), channel, int(lab), float(r))
        for s, lab, r in zip(slots, labels, residuals)
    ]


def write_labels(path, records: Iterable[LabelRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        for r in records:
            w.writerow([r.station_id, r.timestamp, r.channel, r.label, repr(r.residual)])


def read_labels(path) -> list[LabelRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            LabelRecord(row["station_id"], row["timestamp"], row["channel"], int(row["label"]), float(row["residual"]))
            for row in reader
        ]
