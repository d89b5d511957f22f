"""Closed-form ridge regression with an unpenalized intercept."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import DimensionMismatch, EmptyInput, FormatError, OutOfRange, SingularSystem
from .gbdt import FEATURE_LAYOUT_VERSION, FORMAT_VERSION

LAMBDA_GRID = (0.01, 0.1, 1.0, 10.0)


@dataclass(eq=False)
class RidgeModel:
    weights: np.ndarray
    intercept: float
    lam: float
    layout_version: int = FEATURE_LAYOUT_VERSION

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def predict_many(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        return X @ self.weights + self.intercept

    def to_dict(self) -> dict:
        return {
            "kind": "ridge",
            "format_version": FORMAT_VERSION,
            "layout_version": self.layout_version,
            "lambda": float(self.lam),
            "intercept": float(self.intercept),
            "weights": [float(w) for w in self.weights],
        }

    @classmethod
    def from_dict(cls, d: dict) -> RidgeModel:
        if d.get("kind") != "ridge" or d.get("format_version") != FORMAT_VERSION:
            raise FormatError("not a ridge model")
        return cls(np.array(d["weights"], dtype=float), d["intercept"], d["lambda"], d["layout_version"])


def fit_ridge(X, y, lam: float = 1.0) -> RidgeModel:
    """Solve (Xc'Xc + lam I) w = Xc'yc on centered data by Cholesky."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DimensionMismatch("X rows must match y")
    if y.size == 0:
        raise EmptyInput("ridge fit on zero rows")
    if lam < 0:
        raise OutOfRange("lambda must be >= 0")
    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    Xc = X - x_mean
    yc = y - y_mean
    gram = Xc.T @ Xc
    gram[np.diag_indices_from(gram)] += lam
    if lam == 0.0:
        # Cholesky succeeds on numerically singular PSD matrices, so check rank
        rank = np.linalg.matrix_rank(Xc)
        if rank < X.shape[1]:
            raise SingularSystem(f"rank {rank} < {X.shape[1]} features at lambda = 0")
    try:
        factor = cho_factor(gram, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    w = cho_solve(factor, Xc.T @ yc)
    return RidgeModel(w, y_mean - float(w @ x_mean), float(lam))


def predict_ridge(model: RidgeModel, x) -> float:
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    if arr.ndim != 1 or arr.size != model.n_features:
        raise DimensionMismatch(f"expected {model.n_features} features, got {arr.size}")
    return float(arr @ model.weights + model.intercept)


def select_lambda(X_train, y_train, X_val, y_val, grid=LAMBDA_GRID) -> float:
    """Lambda from ``grid`` with the lowest validation MAE; ties go to the larger value."""
    best_lam, best = None, np.inf
    for lam in sorted(grid):
        m = fit_ridge(X_train, y_train, lam)
        err = float(np.mean(np.abs(m.predict_many(X_val) - np.asarray(y_val))))
        if err <= best:
            best_lam, best = lam, err
    return float(best_lam)
