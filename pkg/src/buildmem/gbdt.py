"""Gradient-boosted regression trees for conditional quantiles.

Each boosting round fits a least-squares tree to the negative pinball
subgradient (histogram split search over equal-frequency bins) and then
replaces every leaf value with the empirical alpha-quantile of the residuals
that fall into it. The pinball subgradient only takes two values, so the
refit is what actually moves the model towards the conditional quantile.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from buildmem.errors import ConsistencyError
from buildmem.features import FeatureMatrix
from buildmem.stats import nearest_rank


@njit(cache=True)
def _predict_packed(rows, feat, thr, left, right, val, base, lr, out):
    n_trees = feat.shape[0]
    for i in range(rows.shape[0]):
        acc = 0.0
        for t in range(n_trees):
            node = 0
            while feat[t, node] >= 0:
                if rows[i, feat[t, node]] <= thr[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            acc += val[t, node]
        out[i] = base + lr * acc


def pinball_loss(y, yhat, alpha):
    """Quantile loss: alpha * (y - yhat) above the prediction, (1 - alpha) * (yhat - y) below."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    diff = np.asarray(y, dtype=np.float64) - np.asarray(yhat, dtype=np.float64)
    out = np.where(diff >= 0, alpha * diff, (alpha - 1.0) * diff)
    return float(out) if out.ndim == 0 else out


def pinball_gradient(y, yhat, alpha):
    """Subgradient of :func:`pinball_loss` with respect to ``yhat`` (0 at ties)."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must be in (0, 1), got {alpha}")
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    out = np.where(y > yhat, -alpha, np.where(y < yhat, 1.0 - alpha, 0.0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.95
    n_trees: int = 300
    learning_rate: float = 0.1
    max_depth: int = 6
    min_samples_leaf: int = 20
    subsample: float = 0.8
    colsample: float = 0.8
    n_bins: int = 256
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("alpha", 0.90, 0.99), ("n_trees", 50, 600), ("learning_rate", 0.01, 0.3),
            ("max_depth", 1, 12), ("min_samples_leaf", 5, 100),
            ("subsample", 0.5, 1.0), ("colsample", 0.5, 1.0),
        ]
        for name, lo, hi in checks:
            v = getattr(self, name)
            # tolerate float noise from config files and samplers
            if not lo - 1e-9 <= v <= hi + 1e-9:
                raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
        for name in ("n_trees", "max_depth", "min_samples_leaf", "n_bins"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ValueError(f"{name} must be an integer")
        if not 2 <= self.n_bins <= 65536:
            raise ValueError("n_bins must be in [2, 65536]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RegressionTree:
    """Flat binary tree; ``feature[i] < 0`` marks node ``i`` as a leaf."""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, rows: np.ndarray) -> np.ndarray:
        """Leaf node index for every row of ``rows``."""
        node = np.zeros(rows.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = rows[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("feature", "threshold", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d) -> "RegressionTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold=np.asarray(d["threshold"], dtype=np.float64),
            left=np.asarray(d["left"], dtype=np.int64),
            right=np.asarray(d["right"], dtype=np.int64),
            value=np.asarray(d["value"], dtype=np.float64),
            gain=np.asarray(d["gain"], dtype=np.float64),
        )


class QuantileModel:
    """A fitted forest; prediction is ``base_score + learning_rate * sum(leaf values)``.

    Trees are packed into padded 2-D node arrays (one row per tree) so the
    compiled traversal can walk the whole forest without Python overhead.
    """

    def __init__(self, base_score, trees, learning_rate, alpha, feature_schema_hash,
                 column_names, importances=None, train_loss=None):
        self.base_score = float(base_score)
        self.trees = list(trees)
        self.learning_rate = float(learning_rate)
        self.alpha = float(alpha)
        self.feature_schema_hash = feature_schema_hash
        self.column_names = list(column_names)
        if importances is None:
            importances = np.zeros(len(self.column_names))
        self.importances = np.asarray(importances, dtype=np.float64)
        self.train_loss = list(train_loss or [])
        self._pack()

    @property
    def n_features(self) -> int:
        return len(self.column_names)

    def _pack(self):
        n_trees = len(self.trees)
        width = max((t.n_nodes for t in self.trees), default=1)
        self._feat = np.full((n_trees, width), -1, dtype=np.int64)
        self._thr = np.zeros((n_trees, width))
        self._left = np.zeros((n_trees, width), dtype=np.int64)
        self._right = np.zeros((n_trees, width), dtype=np.int64)
        self._val = np.zeros((n_trees, width))
        for i, t in enumerate(self.trees):
            k = t.n_nodes
            self._feat[i, :k] = t.feature
            self._thr[i, :k] = t.threshold
            self._left[i, :k] = t.left
            self._right[i, :k] = t.right
            self._val[i, :k] = t.value

    def predict(self, rows) -> np.ndarray:
        """Predict for a 2-D batch (or a single 1-D feature vector)."""
        if isinstance(rows, FeatureMatrix):
            if rows.schema_hash and rows.schema_hash != self.feature_schema_hash:
                raise ConsistencyError("feature matrix schema does not match the model")
            rows = rows.rows
        rows = np.asarray(rows, dtype=np.float64)
        single = rows.ndim == 1
        if single:
            rows = rows[None, :]
        if rows.ndim != 2 or rows.shape[1] != self.n_features:
            raise ConsistencyError(
                f"expected {self.n_features} features, got shape {rows.shape}")
        out = np.empty(rows.shape[0])
        _predict_packed(np.ascontiguousarray(rows), self._feat, self._thr, self._left,
                        self._right, self._val, self.base_score, self.learning_rate, out)
        return out[0] if single else out

    def to_dict(self) -> dict:
        return {
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "alpha": self.alpha,
            "feature_schema_hash": self.feature_schema_hash,
            "column_names": self.column_names,
            "importances": self.importances.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d) -> "QuantileModel":
        return cls(
            base_score=d["base_score"],
            trees=[RegressionTree.from_dict(t) for t in d["trees"]],
            learning_rate=d["learning_rate"],
            alpha=d["alpha"],
            feature_schema_hash=d["feature_schema_hash"],
            column_names=d["column_names"],
            importances=d["importances"],
        )


def predict(model: QuantileModel, rows) -> np.ndarray:
    return model.predict(rows)


def feature_importance(model: QuantileModel) -> dict[str, float]:
    """Share of total split gain attributed to each feature."""
    total = model.importances.sum()
    if not model.trees or total <= 0:
        return {}
    return {name: float(g / total)
            for name, g in zip(model.column_names, model.importances)}


# --- training ---------------------------------------------------------------

def bin_edges(column: np.ndarray, n_bins: int) -> np.ndarray:
    """At most ``n_bins - 1`` split thresholds placed at equal-frequency cut points."""
    uniq = np.unique(column)
    if len(uniq) <= n_bins:
        return (uniq[:-1] + uniq[1:]) / 2.0
    qs = np.quantile(column, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
    edges = np.unique(qs)
    # the top edge must leave something on its right
    return edges[edges < uniq[-1]]


def _bin_matrix(rows: np.ndarray, n_bins: int):
    edges = [bin_edges(rows[:, j], n_bins) for j in range(rows.shape[1])]
    dtype = np.uint8 if n_bins <= 256 else np.uint16
    codes = np.empty(rows.shape, dtype=dtype)
    for j, e in enumerate(edges):
        # code b <=> e[b-1] < x <= e[b], so x <= e[b] iff code <= b
        codes[:, j] = np.searchsorted(e, rows[:, j], side="left")
    return codes, edges


@dataclass
class _Grower:
    codes: np.ndarray          # in-bag rows x selected features
    features: np.ndarray       # column index of each selected feature
    edges: list
    grad: np.ndarray           # pseudo-targets of in-bag rows
    max_depth: int
    min_samples_leaf: int
    n_bins: int
    feature: list = field(default_factory=list)
    split_bin: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    gain: list = field(default_factory=list)
    members: list = field(default_factory=list)

    def _new_node(self, idx):
        self.feature.append(-1)
        self.split_bin.append(0)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.gain.append(0.0)
        self.members.append(idx)
        return len(self.feature) - 1

    def best_split(self, idx):
        if len(idx) < 2 * self.min_samples_leaf:
            return None
        fpos, b, gain, sq = _best_split(self.codes, idx, self.grad, self.n_bins,
                                        self.min_samples_leaf)
        if fpos < 0 or not gain > 1e-10 * sq + 1e-300:
            return None
        return fpos, b, gain

    def grow(self):
        root = self._new_node(np.arange(len(self.grad)))
        frontier = [(root, 0)]
        while frontier:
            nxt = []
            for node, depth in frontier:
                if depth >= self.max_depth:
                    continue
                idx = self.members[node]
                split = self.best_split(idx)
                if split is None:
                    continue
                fpos, b, gain = split
                go_left = self.codes[idx, fpos] <= b
                lnode = self._new_node(idx[go_left])
                rnode = self._new_node(idx[~go_left])
                col = int(self.features[fpos])
                self.feature[node] = col
                self.split_bin[node] = b
                self.threshold[node] = float(self.edges[col][b])
                self.left[node], self.right[node] = lnode, rnode
                self.gain[node] = gain
                nxt += [(lnode, depth + 1), (rnode, depth + 1)]
            frontier = nxt


@njit(cache=True)
def _best_split(codes, idx, grad, n_bins, min_leaf):
    """Histogram split search over the rows ``idx`` of ``codes``.

    Returns (feature position, bin, gain, sum of squared gradients). Scanning
    features and bins in ascending order and replacing only on a strictly
    larger gain breaks ties towards the lower feature, then lower threshold.
    """
    m = idx.shape[0]
    k = codes.shape[1]
    sums = np.zeros((k, n_bins))
    counts = np.zeros((k, n_bins), dtype=np.int64)
    total = 0.0
    sq = 0.0
    for r in range(m):
        i = idx[r]
        g = grad[i]
        total += g
        sq += g * g
        for f in range(k):
            b = codes[i, f]
            sums[f, b] += g
            counts[f, b] += 1
    parent = total * total / m
    best_gain = -np.inf
    best_f = -1
    best_b = -1
    for f in range(k):
        s_left = 0.0
        n_left = 0
        for b in range(n_bins - 1):
            s_left += sums[f, b]
            n_left += counts[f, b]
            n_right = m - n_left
            if n_right < min_leaf:
                break
            if n_left < min_leaf:
                continue
            s_right = total - s_left
            gain = s_left * s_left / n_left + s_right * s_right / n_right - parent
            if gain > best_gain:
                best_gain = gain
                best_f = f
                best_b = b
    return best_f, best_b, best_gain, sq


def _check_features(features: FeatureMatrix):
    rows = np.asarray(features.rows, dtype=np.float64)
    y = np.asarray(features.target, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] != y.shape[0]:
        raise ValueError("rows and target must have matching lengths")
    if np.isnan(rows).any() or np.isnan(y).any():
        raise ValueError("features contain NaN")
    return rows, y


def fit(features: FeatureMatrix, config: TrainConfig) -> QuantileModel:
    """Train a quantile forest on ``features`` under ``config``."""
    rows, y = _check_features(features)
    n, d = rows.shape
    if n < 2 * config.min_samples_leaf:
        raise ValueError(
            f"need at least {2 * config.min_samples_leaf} rows, got {n}")
    alpha, lr = config.alpha, config.learning_rate
    base = nearest_rank(y, alpha)
    model_args = dict(learning_rate=lr, alpha=alpha,
                      feature_schema_hash=features.schema_hash,
                      column_names=features.column_names or [f"f{j}" for j in range(d)])
    if np.all(y == y[0]):
        return QuantileModel(base, [], train_loss=[0.0], **model_args)

    codes, edges = _bin_matrix(rows, config.n_bins)
    n_bins = max(len(e) for e in edges) + 1
    rng = np.random.default_rng(config.seed)
    n_sub = max(2 * config.min_samples_leaf, int(round(config.subsample * n)))
    n_cols = max(1, int(round(config.colsample * d)))

    pred = np.full(n, base)
    losses = [float(pinball_loss(y, pred, alpha).sum())]
    importances = np.zeros(d)
    trees = []
    for _ in range(config.n_trees):
        in_bag = (np.arange(n) if n_sub >= n
                  else np.sort(rng.choice(n, size=n_sub, replace=False)))
        cols = (np.arange(d) if n_cols >= d
                else np.sort(rng.choice(d, size=n_cols, replace=False)))
        resid = y - pred
        pseudo = -pinball_gradient(y[in_bag], pred[in_bag], alpha)
        grower = _Grower(codes[np.ix_(in_bag, cols)], cols, edges, pseudo,
                         config.max_depth, config.min_samples_leaf, n_bins)
        grower.grow()

        feature = np.asarray(grower.feature, dtype=np.int64)
        value = np.zeros(len(feature))
        for node in np.flatnonzero(feature < 0):
            value[node] = nearest_rank(resid[in_bag[grower.members[node]]], alpha)
        tree = RegressionTree(
            feature=feature,
            threshold=np.asarray(grower.threshold, dtype=np.float64),
            left=np.asarray(grower.left, dtype=np.int64),
            right=np.asarray(grower.right, dtype=np.int64),
            value=value,
            gain=np.asarray(grower.gain, dtype=np.float64),
        )
        np.add.at(importances, feature[feature >= 0], tree.gain[feature >= 0])
        trees.append(tree)
        pred = pred + lr * value[tree.apply(rows)]
        losses.append(float(pinball_loss(y, pred, alpha).sum()))

    return QuantileModel(base, trees, importances=importances, train_loss=losses,
                         **model_args)
