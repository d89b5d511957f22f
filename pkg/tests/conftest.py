from dataclasses import replace
from datetime import timedelta

import numpy as np
import pytest

from rwis.config import Settings
from rwis.data import CHANNELS, METEO_COLUMNS, StationSeries
from rwis.gbdt import TrainConfig
from rwis.pipeline import train_pipeline
from rwis.scenario import BenchmarkScenario, generate_scenario


def make_series(values, start="2021-03-01T00:00", station="T1", meteo=None, gaps=None):
    """Hourly series from an (n, 4) value array; gap slots become NaN."""
    values = np.array(values, dtype=float).reshape(-1, len(CHANNELS))
    n = len(values)
    ts = np.datetime64(start, "m") + np.arange(n) * np.timedelta64(60, "m")
    gap_mask = np.zeros(n, dtype=bool) if gaps is None else np.asarray(gaps, dtype=bool)
    values[gap_mask] = np.nan
    met = None if meteo is None else np.asarray(meteo, dtype=float).reshape(n, len(METEO_COLUMNS))
    return StationSeries(station, timedelta(hours=1), ts, values, gap_mask, met)


def random_series(rng, n, station="T1", start="2021-03-01T00:00"):
    t = np.arange(n)
    base = np.column_stack(
        [
            5 + 3 * np.sin(2 * np.pi * t / 24),
            6 + 5 * np.sin(2 * np.pi * (t - 2) / 24),
            4 + 0.5 * np.sin(2 * np.pi * (t - 6) / 24),
            70 + 10 * np.cos(2 * np.pi * t / 24),
        ]
    )
    return make_series(base + rng.normal(scale=0.2, size=base.shape), start, station)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def scenario():
    return generate_scenario(BenchmarkScenario(seed=0))


@pytest.fixture(scope="session")
def fast_settings():
    train = TrainConfig(n_stages=25, seed=0)
    s = Settings()
    return replace(
        s,
        train=train,
        detector=replace(s.detector, threshold_rounds=3),
        benchmark=replace(s.benchmark, train=train),
    )


@pytest.fixture(scope="session")
def trained(scenario, fast_settings):
    """(artifacts, report) fitted on the training stations of the default scenario."""
    return train_pipeline(scenario.train, fast_settings)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
