import itertools

import numpy as np
import pytest

from conftest import random_series
from rwis.anomaly import ANOMALY, InjectionSpec
from rwis.correction import GRID_CELLS
from rwis.data import DEFAULT_LAG_WINDOW
from rwis.energy import physical_forecasts
from rwis.errors import ConfigInvalid, DegenerateLabels, OverlapExhaustion, SpecInvalid
from rwis.evaluation import (
    ALGORITHMS,
    VARIANTS,
    BenchmarkConfig,
    DetectorRow,
    ForecastRow,
    ReportTable,
    derived_seed,
    inject_channel,
    recompute_table1,
    recompute_table2,
    run_detector_benchmark,
    run_forecast_benchmark,
    split_training_stations,
)
from rwis.gbdt import TrainConfig
from rwis.scenario import BenchmarkScenario, generate_scenario

FAST = BenchmarkConfig(train=TrainConfig(n_stages=10, seed=0), threshold_rounds=1, test_rounds=1, corruption_rounds=1)


@pytest.fixture(scope="module")
def forecast(scenario, trained):
    return run_forecast_benchmark(scenario, FAST, grid=trained[0].grid)


@pytest.fixture(scope="module")
def detector(scenario):
    return run_detector_benchmark(scenario, FAST)


# -- splits -----------------------------------------------------------------------------


def test_scenario_split_sizes(scenario):
    spec = scenario.spec
    assert len(scenario.train) == spec.n_stations - spec.n_holdout
    assert len(scenario.heldout) == spec.n_holdout
    for s in scenario.train:
        assert len(s) == (spec.days - spec.holdout_days) * 24
        assert s.timestamps[-1] < scenario.cutoff
    for s in scenario.heldout:
        assert len(s) == spec.days * 24
        assert int(scenario.eval_mask(s).sum()) == spec.holdout_days * 24
    train_ids = {s.station_id for s in scenario.train}
    assert train_ids.isdisjoint(s.station_id for s in scenario.heldout)


@pytest.mark.parametrize("n, fraction, want", [(3, 0.7, 2), (4, 0.7, 3), (2, 0.99, 1), (2, 0.01, 1), (5, 0.5, 2)])
def test_training_station_split(rng, n, fraction, want):
    stations = [random_series(rng, 10, station=f"T{i}") for i in range(n)]
    model, thr = split_training_stations(stations, fraction)
    assert len(model) == want and len(thr) == n - want
    assert [s.station_id for s in model + thr] == [f"T{i}" for i in range(n)]


def test_single_station_cannot_split(rng):
    with pytest.raises(SpecInvalid):
        split_training_stations([random_series(rng, 10)], 0.5)


@pytest.mark.parametrize(
    "cfg",
    [
        BenchmarkConfig(model_fraction=0.0),
        BenchmarkConfig(model_fraction=1.0),
        BenchmarkConfig(test_rounds=0),
    ],
)
def test_invalid_benchmark_config(cfg):
    with pytest.raises(SpecInvalid):
        cfg.validate()


def test_invalid_training_config_is_checked():
    with pytest.raises(ConfigInvalid):
        BenchmarkConfig(train=TrainConfig(shrinkage=0.0)).validate()


@pytest.mark.parametrize("spec", [dict(n_stations=3), dict(n_holdout=4), dict(days=10), dict(holdout_days=28)])
def test_invalid_scenario(spec):
    with pytest.raises(SpecInvalid):
        generate_scenario(BenchmarkScenario(**spec))


def test_derived_seeds_are_stable_and_distinct():
    seeds = {derived_seed(a, b, c) for a, b, c in itertools.product(range(3), range(3), range(3))}
    assert len(seeds) == 27
    assert derived_seed(1, 2, 3) == derived_seed(1, 2, 3)


# -- fault injection helpers ------------------------------------------------------------


def test_injection_redraws_after_exhaustion(rng):
    s = random_series(rng, 40)
    calls = []

    def factory(channel, sigma, seed):
        calls.append(seed)
        if len(calls) == 1:
            return [InjectionSpec("long_term", channel, 1000.0, length=(30, 30), seed=seed)]
        return [InjectionSpec("single", channel, 50.0, seed=seed)]

    out, labels = inject_channel(s, "air", 1.0, 5, factory)
    assert len(calls) == 2 and calls[0] != calls[1]
    assert len(out) == 40 and labels.shape == (40,)


def test_injection_gives_up(rng):
    s = random_series(rng, 40)

    def factory(channel, sigma, seed):
        return [InjectionSpec("long_term", channel, 1000.0, length=(30, 30), seed=seed)]

    with pytest.raises(OverlapExhaustion):
        inject_channel(s, "air", 1.0, 5, factory, max_attempts=3)


# -- forecast benchmark ----------------------------------------------------------------


def test_forecast_rows_cover_the_grid(forecast):
    rows = forecast.report.forecast_rows
    assert {(r.channel, r.horizon, r.variant) for r in rows} == {(c, h, v) for c, h in GRID_CELLS for v in VARIANTS}
    for channel, horizon in GRID_CELLS:
        n = {r.variant: r.n_rows for r in rows if (r.channel, r.horizon) == (channel, horizon)}
        assert n["metro_only"] == n["corrected"] == n["with_anomalies"] // FAST.corruption_rounds > 0


def test_metro_only_matches_direct_computation(scenario, forecast):
    # oracle: score the raw physical stream at every scoreable issue slot
    held = scenario.heldout[0]
    phys = physical_forecasts(held)
    mask = scenario.eval_mask(held)
    for channel, horizon in [("road", 1), ("air", 3), ("humidity", 2)]:
        ci, hi = ("air", "road", "underground", "humidity").index(channel), horizon - 1
        errs = [
            abs(held.values[t + horizon, ci] - phys[t, ci, hi])
            for t in range(DEFAULT_LAG_WINDOW - 1, len(held) - horizon)
            if mask[t] and np.isfinite(phys[t, ci, hi])
        ]
        assert forecast.report.mae(channel, horizon, "metro_only") == pytest.approx(np.mean(errs), abs=1e-12)


def test_audit_is_held_out_and_after_cutoff(scenario, forecast):
    held_ids = {s.station_id for s in scenario.heldout}
    times = {t for _, t, *_ in forecast.audit}
    assert {s for s, *_ in forecast.audit} <= held_ids
    assert min(np.datetime64(t[:16], "m") for t in times) >= scenario.cutoff


def test_tables_recompute_from_the_audit(tmp_path, forecast):
    forecast.write_audit(tmp_path / "audit.csv")
    again = {(r.channel, r.horizon, r.variant): r for r in recompute_table1(tmp_path / "audit.csv")}
    for r in forecast.report.forecast_rows:
        got = again[(r.channel, r.horizon, r.variant)]
        assert got.n_rows == r.n_rows
        assert got.mae == pytest.approx(r.mae, rel=1e-12)


def test_correction_beats_metro_on_the_road(forecast):
    rep = forecast.report
    for h in (1, 2, 3):
        assert rep.mae("road", h, "corrected") < 0.7 * rep.mae("road", h, "metro_only")


def test_anomalies_hurt_the_physical_model(forecast):
    rep = forecast.report
    assert rep.mae("road", 1, "with_anomalies") > rep.mae("road", 1, "metro_only")


def test_road_bias_is_a_calendar_signal(scenario):
    # regression oracle: the metro residual on the road is explained by hour of day
    held = scenario.heldout[0]
    phys = physical_forecasts(held)
    t = np.arange(DEFAULT_LAG_WINDOW, len(held) - 1)
    t = t[np.isfinite(phys[t, 1, 0])]
    resid = held.values[t + 1, 1] - phys[t, 1, 0]
    hour = (t + 1) % 24
    design = np.eye(24)[hour]
    fit = design @ np.linalg.lstsq(design, resid, rcond=None)[0]
    r2 = 1 - np.sum((resid - fit) ** 2) / np.sum((resid - resid.mean()) ** 2)
    assert r2 > 0.9


def test_forecast_benchmark_is_deterministic(scenario, forecast, trained):
    again = run_forecast_benchmark(scenario, FAST, grid=trained[0].grid)
    assert again.report.forecast_rows == forecast.report.forecast_rows


def test_no_signal_means_no_gain():
    data = generate_scenario(BenchmarkScenario(seed=1, bias_amplitude=0.0))
    rep = run_forecast_benchmark(data, FAST).report
    # with nothing to learn the correction stays close to the physical model
    for h in (1, 2, 3):
        assert rep.mae("road", h, "corrected") < 1.5 * rep.mae("road", h, "metro_only") + 0.05


# -- detector benchmark ----------------------------------------------------------------


def test_detector_rows_and_thresholds(detector):
    rows = detector.report.detector_rows
    assert [r.algorithm for r in rows] == list(ALGORITHMS)
    for r in rows:
        assert 0.0 <= r.f1 <= 1.0 and r.paper_f1 == pytest.approx(r.f1 / 2)
        assert r.tp + r.fn > 0
    for per in detector.report.thresholds.values():
        assert set(per) == {"air", "road", "underground", "humidity"}
        assert all(d > 0 for d in per.values())


def test_detector_table_recomputes_from_the_audit(tmp_path, detector):
    detector.write_audit(tmp_path / "audit.csv")
    assert recompute_table2(tmp_path / "audit.csv") == detector.report.detector_rows


def test_detector_audit_only_scores_after_cutoff(scenario, detector):
    times = {row[3] for row in detector.audit}
    assert min(np.datetime64(t[:16], "m") for t in times) >= scenario.cutoff
    assert any(row[6] == ANOMALY for row in detector.audit)


def test_no_injected_anomalies_is_degenerate(scenario):
    def nothing(channel, sigma, seed):
        return [InjectionSpec("single", channel, 1e-9, seed=seed)]

    with pytest.raises(DegenerateLabels):
        run_detector_benchmark(scenario, FAST, factory=nothing)


# -- report tables -----------------------------------------------------------------------


def test_table_files_round_trip(tmp_path):
    rep = ReportTable(
        [ForecastRow("road", 1, "corrected", 0.1 / 3, 12), ForecastRow("air", 2, "metro_only", 1.25, 7)],
        [DetectorRow("boosting", 0.8, 0.7, 0.7466666666666667, 0.37333333333333335, 7, 2, 3)],
    )
    rep.write_table1(tmp_path / "t1.csv")
    rep.write_table2(tmp_path / "t2.csv")
    assert ReportTable.read_table1(tmp_path / "t1.csv") == rep.forecast_rows
    assert ReportTable.read_table2(tmp_path / "t2.csv") == rep.detector_rows
    text = rep.render()
    assert "0.84" in text and "0.774" in text
