"""Gradient boosting over least-squares regression trees with absolute loss.

Each stage fits a tree to the negative subgradient of the MAE at the
current predictions, then scales it by an exact 1-D line search on the
absolute loss, shrunk by the learning rate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import (
    ConfigInvalid,
    DegenerateInput,
    DimensionMismatch,
    EmptyInput,
    FormatError,
    LengthMismatch,
)

FORMAT_VERSION = 1
FEATURE_LAYOUT_VERSION = 1


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=float).ravel()
    y = np.asarray(targets, dtype=float).ravel()
    if p.shape != y.shape:
        raise LengthMismatch(f"{p.size} predictions vs {y.size} targets")
    return p, y


def mae_loss(predictions, targets) -> float:
    p, y = _pair(predictions, targets)
    if p.size == 0:
        raise EmptyInput("mae_loss of zero samples")
    return float(np.mean(np.abs(y - p)))


def loss_negative_gradient(predictions, targets) -> np.ndarray:
    """Negative subgradient of |y - z| at z = prediction; zero at exact ties."""
    p, y = _pair(predictions, targets)
    return -np.sign(p - y)


@dataclass(frozen=True)
class TreeConfig:
    max_depth: int = 3
    min_samples_leaf: int = 5


@dataclass(eq=False)
class RegressionTree:
    """Binary tree in flat arrays; node 0 is the root, nodes are in preorder.

    Leaves have ``feature == -1``. A sample goes left when
    ``x[feature] <= threshold``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int
    min_samples_leaf: int
    n_features: int

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))

        return rec(0)

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by each row."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            rows = np.flatnonzero(inner)
            nd = node[rows]
            go_left = X[rows, self.feature[nd]] <= self.threshold[nd]
            node[rows] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_nodes(self) -> list[dict]:
        out = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                out.append({"leaf": float(self.value[i])})
            else:
                out.append({"feature": int(self.feature[i]), "threshold": float(self.threshold[i])})
        return out

    @classmethod
    def from_nodes(cls, nodes: list[dict], max_depth, min_samples_leaf, n_features) -> RegressionTree:
        n = len(nodes)
        feature = np.full(n, -1, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        value = np.zeros(n)

        def rec(i):
            if i >= n:
                raise FormatError("tree node list ends inside a subtree")
            nd = nodes[i]
            if "leaf" in nd:
                value[i] = nd["leaf"]
                return i + 1
            feature[i] = nd["feature"]
            threshold[i] = nd["threshold"]
            left[i] = i + 1
            nxt = rec(i + 1)
            right[i] = nxt
            return rec(nxt)

        if rec(0) != n:
            raise FormatError("tree node list is not a complete preorder traversal")
        return cls(feature, threshold, left, right, value, max_depth, min_samples_leaf, n_features)


def best_split(X: np.ndarray, g: np.ndarray, min_samples_leaf: int):
    """Best least-squares split of the rows (feature, threshold, gain) or None.

    Candidates are midpoints between consecutive distinct sorted values of
    each feature, restricted to splits leaving ``min_samples_leaf`` rows on
    both sides. Gain is the reduction in sum of squared errors.
    """
    n, d = X.shape
    if n < 2 * min_samples_leaf:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    gs = g[order]
    csum = np.cumsum(gs, axis=0)[:-1]
    total = g.sum()
    n_left = np.arange(1, n, dtype=float)[:, None]
    n_right = n - n_left
    # SSE = sum g^2 - S_L^2/n_L - S_R^2/n_R; the g^2 term is split-independent
    score = csum**2 / n_left + (total - csum) ** 2 / n_right
    valid = xs[1:] > xs[:-1]
    pos = np.arange(1, n)[:, None]
    valid &= (pos >= min_samples_leaf) & (n - pos >= min_samples_leaf)
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    flat = int(np.argmax(score))
    i, f = divmod(flat, d)
    gain = float(score[i, f] - total**2 / n)
    scale = max(1.0, float(np.dot(g, g)))
    if not gain > 1e-12 * scale:
        return None
    thr = 0.5 * (xs[i, f] + xs[i + 1, f])
    # guard against midpoint rounding onto the upper value
    if thr >= xs[i + 1, f]:
        thr = xs[i, f]
    return f, float(thr), gain


def fit_tree(X, g, cfg: TreeConfig = TreeConfig()) -> RegressionTree:
    """Greedy least-squares regression tree on targets ``g``; leaves hold means."""
    X = np.asarray(X, dtype=float)
    g = np.asarray(g, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != g.size:
        raise DimensionMismatch("X must be (n_samples, n_features) matching g")
    if g.size == 0:
        raise DegenerateInput("cannot fit a tree on zero samples")
    if cfg.max_depth < 0 or cfg.min_samples_leaf < 1:
        raise ConfigInvalid("max_depth >= 0 and min_samples_leaf >= 1 required")

    feature, threshold, left, right, value = [], [], [], [], []

    def grow(rows: np.ndarray, depth: int) -> int:
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(g[rows].mean()))
        if depth >= cfg.max_depth:
            return i
        split = best_split(X[rows], g[rows], cfg.min_samples_leaf)
        if split is None:
            return i
        f, thr, _ = split
        mask = X[rows, f] <= thr
        feature[i] = f
        threshold[i] = thr
        left[i] = grow(rows[mask], depth + 1)
        right[i] = grow(rows[~mask], depth + 1)
        return i

    grow(np.arange(g.size), 0)
    return RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value),
        cfg.max_depth,
        cfg.min_samples_leaf,
        X.shape[1],
    )


def line_search_alpha(current_preds, tree_preds, targets) -> float:
    """Exact minimizer of sum |y - (current + alpha * h)| over alpha.

    The objective is sum_t |h_t| * |alpha - b_t| (plus a constant) with
    breakpoints b_t = (y_t - current_t) / h_t, so its minimum sits at a
    weighted median of the breakpoints. Among equally good breakpoints the
    one with the smallest |alpha| is returned.
    """
    c, y = _pair(current_preds, targets)
    h, _ = _pair(tree_preds, targets)
    nz = h != 0
    if not nz.any():
        return 0.0
    r = (y - c)[nz]
    w = np.abs(h[nz])
    b = r / h[nz]
    order = np.argsort(b, kind="stable")
    b = b[order]
    w = w[order]
    wb = w * b
    cw = np.cumsum(w)
    cwb = np.cumsum(wb)
    tw, twb = cw[-1], cwb[-1]
    # loss(b_k) = sum_{j<=k} w_j (b_k - b_j) + sum_{j>k} w_j (b_j - b_k)
    loss = b * cw - cwb + (twb - cwb) - b * (tw - cw)
    best = loss.min()
    tol = 1e-12 * max(1.0, float(np.sum(w * np.abs(b))))
    cands = b[loss <= best + tol]
    alpha = cands[np.argmin(np.abs(cands))]
    return float(alpha)


@dataclass(frozen=True)
class TrainConfig:
    n_stages: int = 100
    max_depth: int = 3
    min_samples_leaf: int = 5
    shrinkage: float = 0.1
    subsample: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if self.n_stages < 0:
            raise ConfigInvalid("n_stages must be >= 0")
        if self.max_depth < 0 or self.min_samples_leaf < 1:
            raise ConfigInvalid("max_depth >= 0 and min_samples_leaf >= 1 required")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ConfigInvalid("shrinkage must lie in (0, 1]")
        if not 0.0 < self.subsample <= 1.0:
            raise ConfigInvalid("subsample must lie in (0, 1]")


@dataclass(eq=False)
class BoostedEnsemble:
    base_value: float
    weights: list[float]
    trees: list[RegressionTree]
    n_features: int
    config: TrainConfig = field(default_factory=TrainConfig)
    loss: str = "mae"
    layout_version: int = FEATURE_LAYOUT_VERSION

    @property
    def stages(self) -> list[tuple[float, RegressionTree]]:
        return list(zip(self.weights, self.trees))

    def _stacked(self):
        # all trees padded into (n_trees, max_nodes) arrays so every row
        # descends every tree in one vectorized pass per depth level
        cache = getattr(self, "_stack_cache", None)
        if cache is not None and cache[0] == len(self.trees):
            return cache[1]
        width = max(t.n_nodes for t in self.trees)
        T = len(self.trees)
        feat = np.full((T, width), -1, dtype=np.int64)
        thr = np.zeros((T, width))
        left = np.zeros((T, width), dtype=np.int64)
        right = np.zeros((T, width), dtype=np.int64)
        val = np.zeros((T, width))
        for i, (w, t) in enumerate(zip(self.weights, self.trees)):
            k = t.n_nodes
            feat[i, :k] = t.feature
            thr[i, :k] = t.threshold
            left[i, :k] = t.left
            right[i, :k] = t.right
            val[i, :k] = w * t.value
        depth = max(t.depth() for t in self.trees)
        stack = (feat, thr, left, right, val, depth)
        self._stack_cache = (T, stack)
        return stack

    def predict_many(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.full(len(X), float(self.base_value))
        if not self.trees or not len(X):
            return out
        feat, thr, left, right, val, depth = self._stacked()
        tree_idx = np.arange(len(self.trees))[:, None]
        rows = np.arange(len(X))[None, :]
        node = np.zeros((len(self.trees), len(X)), dtype=np.int64)
        for _ in range(depth):
            f = feat[tree_idx, node]
            x = X[rows, np.maximum(f, 0)]
            nxt = np.where(x <= thr[tree_idx, node], left[tree_idx, node], right[tree_idx, node])
            node = np.where(f >= 0, nxt, node)
        # accumulate in tree order so the result does not depend on batch shape
        leaf = val[tree_idx, node]
        for t in range(len(self.trees)):
            out += leaf[t]
        return out

    def to_dict(self) -> dict:
        return {
            "kind": "gbdt",
            "format_version": FORMAT_VERSION,
            "layout_version": self.layout_version,
            "loss": self.loss,
            "n_features": self.n_features,
            "config": asdict(self.config),
            "base_value": float(self.base_value),
            "stages": [
                {"weight": float(w), "nodes": t.to_nodes()} for w, t in zip(self.weights, self.trees)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> BoostedEnsemble:
        if d.get("kind") != "gbdt" or d.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"not a v{FORMAT_VERSION} gbdt model: {d.get('kind')!r}")
        cfg = TrainConfig(**d["config"])
        trees = [
            RegressionTree.from_nodes(s["nodes"], cfg.max_depth, cfg.min_samples_leaf, d["n_features"])
            for s in d["stages"]
        ]
        return cls(
            d["base_value"],
            [s["weight"] for s in d["stages"]],
            trees,
            d["n_features"],
            cfg,
            d["loss"],
            d["layout_version"],
        )


def serialize(model) -> str:
    return json.dumps(model.to_dict(), sort_keys=True, indent=1)


def deserialize(text: str):
    d = json.loads(text)
    if d.get("kind") == "ridge":
        from .ridge import RidgeModel

        return RidgeModel.from_dict(d)
    return BoostedEnsemble.from_dict(d)


def predict(ensemble: BoostedEnsemble, x) -> float:
    """base_value + sum_i alpha_i h_i(x) for a single feature vector."""
    arr = x.as_array() if hasattr(x, "as_array") else np.asarray(x, dtype=float)
    if arr.ndim != 1 or arr.size != ensemble.n_features:
        raise DimensionMismatch(f"expected {ensemble.n_features} features, got {arr.size}")
    return float(ensemble.predict_many(arr[None, :])[0])


@dataclass
class FitReport:
    stage_mae: list[float]

    @property
    def initial_mae(self) -> float:
        return self.stage_mae[0]

    @property
    def final_mae(self) -> float:
        return self.stage_mae[-1]

    def is_non_increasing(self, tol: float = 1e-12) -> bool:
        m = np.asarray(self.stage_mae)
        return bool(np.all(np.diff(m) <= tol * max(1.0, float(m[0]))))


def fit_ensemble(X, y, cfg: TrainConfig = TrainConfig(), rng: np.random.Generator | None = None):
    """Fit a boosted ensemble; returns ``(ensemble, report)``."""
    cfg.validate()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise DimensionMismatch("X must be (n_samples, n_features) matching y")
    if y.size == 0:
        raise DegenerateInput("no training samples")
    if y.size < 2 * cfg.min_samples_leaf and cfg.n_stages > 0:
        raise DegenerateInput(f"need >= {2 * cfg.min_samples_leaf} samples, got {y.size}")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise DegenerateInput("non-finite training data")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    tree_cfg = TreeConfig(cfg.max_depth, cfg.min_samples_leaf)

    base = float(np.median(y))
    current = np.full(y.size, base)
    weights: list[float] = []
    trees: list[RegressionTree] = []
    report = FitReport([mae_loss(current, y)])
    n_sub = max(2 * cfg.min_samples_leaf, int(round(cfg.subsample * y.size)))
    for _ in range(cfg.n_stages):
        grad = loss_negative_gradient(current, y)
        if cfg.subsample < 1.0 and n_sub < y.size:
            rows = np.sort(rng.choice(y.size, size=n_sub, replace=False))
        else:
            rows = np.arange(y.size)
        tree = fit_tree(X[rows], grad[rows], tree_cfg)
        h = tree.predict(X)
        alpha = line_search_alpha(current[rows], h[rows], y[rows])
        w = cfg.shrinkage * alpha
        current = current + w * h
        weights.append(w)
        trees.append(tree)
        report.stage_mae.append(mae_loss(current, y))
    return BoostedEnsemble(base, weights, trees, X.shape[1], cfg), report
