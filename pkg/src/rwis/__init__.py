"""Road weather forecasting: physical model, residual correction and anomaly gating."""

from .anomaly import DetectorConfig, OneStepPredictor, quarantine_gate, train_one_step
from .correction import ModelGrid, correct, correct_many, train_grid
from .data import CHANNELS, HORIZONS, StationSeries, build_features, parse_csv, write_csv
from .energy import ColumnConfig, SurfaceParams, physical_forecasts
from .gbdt import BoostedEnsemble, TrainConfig, fit_ensemble, predict
from .pipeline import Artifacts, train_pipeline
from .scenario import BenchmarkScenario, generate_scenario

__version__ = "0.1.0"

__all__ = [
    "CHANNELS",
    "HORIZONS",
    "Artifacts",
    "BenchmarkScenario",
    "BoostedEnsemble",
    "ColumnConfig",
    "DetectorConfig",
    "ModelGrid",
    "OneStepPredictor",
    "StationSeries",
    "SurfaceParams",
    "TrainConfig",
    "build_features",
    "correct",
    "correct_many",
    "fit_ensemble",
    "generate_scenario",
    "parse_csv",
    "physical_forecasts",
    "predict",
    "quarantine_gate",
    "train_grid",
    "train_one_step",
    "train_pipeline",
    "write_csv",
]
