import math
from fractions import Fraction

import numpy as np
import pytest

from buildmem.errors import ConsistencyError
from buildmem.features import FeatureMatrix
from buildmem.gbdt import (
    QuantileModel,
    RegressionTree,
    TrainConfig,
    bin_edges,
    feature_importance,
    fit,
    pinball_gradient,
    pinball_loss,
    predict,
)


def small_cfg(**kw):
    base = dict(alpha=0.9, n_trees=50, learning_rate=0.1, max_depth=3,
                min_samples_leaf=5, subsample=1.0, colsample=1.0)
    base.update(kw)
    return TrainConfig(**base)


def toy(n=300, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.exp(1.0 + 0.8 * X[:, 0] + 0.3 * rng.normal(size=n))
    return FeatureMatrix.from_arrays(X, y)


def test_pinball_examples():
    assert pinball_loss(10, 10, 0.95) == 0
    assert pinball_loss(10, 8, 0.95) == pytest.approx(1.9)
    assert pinball_loss(8, 10, 0.95) == pytest.approx(0.1)


def test_pinball_gradient_examples():
    assert pinball_gradient(10, 8, 0.95) == -0.95
    assert pinball_gradient(8, 10, 0.95) == pytest.approx(0.05)
    assert pinball_gradient(10, 10, 0.95) == 0.0


def test_pinball_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    y = rng.normal(size=200)
    yhat = rng.normal(size=200)
    h = 1e-6
    fd = (pinball_loss(y, yhat + h, 0.9) - pinball_loss(y, yhat - h, 0.9)) / (2 * h)
    np.testing.assert_allclose(pinball_gradient(y, yhat, 0.9), fd, atol=1e-6)


@pytest.mark.parametrize("alpha", [0.0, 1.0, 1.5])
def test_pinball_rejects_alpha(alpha):
    with pytest.raises(ValueError):
        pinball_loss(1, 1, alpha)


def test_config_ranges():
    with pytest.raises(ValueError):
        TrainConfig(alpha=0.5)
    with pytest.raises(ValueError):
        TrainConfig(n_trees=10)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.5)
    with pytest.raises(ValueError):
        TrainConfig(min_samples_leaf=2)


def test_constant_target():
    fm = FeatureMatrix.from_arrays(np.random.default_rng(0).normal(size=(40, 3)), np.full(40, 7.5))
    model = fit(fm, small_cfg())
    assert model.trees == []
    np.testing.assert_array_equal(model.predict(fm.rows), 7.5)
    assert feature_importance(model) == {}


def test_too_few_rows():
    fm = toy(n=9)
    with pytest.raises(ValueError):
        fit(fm, small_cfg(min_samples_leaf=5))


def test_nan_rejected():
    fm = toy(n=40)
    fm.rows[3, 1] = np.nan
    with pytest.raises(ValueError):
        fit(fm, small_cfg())


def test_base_score_is_nearest_rank_quantile():
    fm = toy(n=101)
    model = fit(fm, small_cfg(alpha=0.95))
    k = math.ceil(Fraction("0.95") * 101)
    assert model.base_score == sorted(fm.target)[k - 1]


def _tree(feature, threshold, left, right, value):
    n = len(feature)
    return RegressionTree(np.array(feature), np.array(threshold, dtype=float),
                          np.array(left), np.array(right), np.array(value, dtype=float),
                          np.zeros(n))


def test_zero_tree_model_predicts_base():
    m = QuantileModel(12.5, [], 0.1, 0.9, "h", ["a", "b"])
    assert m.predict(np.array([1.0, 2.0])) == 12.5


def test_single_leaf_tree():
    m = QuantileModel(10.0, [_tree([-1], [0], [-1], [-1], [4.0])], 0.25, 0.9, "h", ["a"])
    assert m.predict(np.array([3.0])) == 10.0 + 0.25 * 4.0


def test_hand_built_tree_routing():
    t = _tree([0, -1, -1], [0.5, 0, 0], [1, -1, -1], [2, -1, -1], [0, -1.0, 3.0])
    m = QuantileModel(0.0, [t], 1.0, 0.9, "h", ["x"])
    np.testing.assert_array_equal(m.predict(np.array([[0.5], [0.50001], [-3.0]])),
                                  [-1.0, 3.0, -1.0])


def test_batch_equals_row_by_row():
    fm = toy()
    model = fit(fm, small_cfg(subsample=0.7, colsample=0.75))
    batch = predict(model, fm.rows)
    single = np.array([predict(model, r) for r in fm.rows])
    np.testing.assert_array_equal(batch, single)


def test_schema_mismatch():
    fm = toy()
    model = fit(fm, small_cfg())
    with pytest.raises(ConsistencyError):
        model.predict(fm.rows[:, :2])
    other = FeatureMatrix(fm.rows, fm.target, fm.row_ids, fm.column_names, "different")
    with pytest.raises(ConsistencyError):
        model.predict(other)


def test_determinism():
    fm = toy()
    cfg = small_cfg(subsample=0.6, colsample=0.5, seed=42)
    a, b = fit(fm, cfg), fit(fm, cfg)
    assert a.to_dict() == b.to_dict()
    np.testing.assert_array_equal(a.predict(fm.rows), b.predict(fm.rows))


def test_split_invariants():
    fm = toy(n=400)
    cfg = small_cfg(max_depth=5, min_samples_leaf=17)
    model = fit(fm, cfg)
    for tree in model.trees:
        inner = tree.feature >= 0
        assert (tree.gain[inner] > 0).all()
        assert tree.depth <= cfg.max_depth
        leaves, counts = np.unique(tree.apply(fm.rows), return_counts=True)
        assert (tree.feature[leaves] < 0).all()
        assert counts.min() >= cfg.min_samples_leaf
        # every leaf reachable from the root
        reachable, stack = set(), [0]
        while stack:
            n = stack.pop()
            reachable.add(n)
            if tree.feature[n] >= 0:
                stack += [tree.left[n], tree.right[n]]
        assert reachable == set(range(tree.n_nodes))


def test_importance_single_feature():
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(200, 1))
    y = np.where(x[:, 0] > 0.5, 100.0, 10.0) + rng.normal(size=200)
    model = fit(FeatureMatrix.from_arrays(x, y, ["only"]), small_cfg())
    assert feature_importance(model) == {"only": 1.0}


def test_importance_ranks_true_driver(synth_small):
    rng = np.random.default_rng(4)
    X = rng.normal(size=(2000, 5))
    y = np.exp(2 + X[:, 3] + 0.2 * rng.normal(size=2000))
    fm = FeatureMatrix.from_arrays(X, y, list("abcde"))
    imp = feature_importance(fit(fm, small_cfg(colsample=0.8, subsample=0.8)))
    assert sum(imp.values()) == pytest.approx(1.0, abs=1e-9)
    assert max(imp, key=imp.get) == "d"


def test_bin_edges_equal_frequency():
    x = np.arange(1000, dtype=float)
    edges = bin_edges(x, 10)
    assert len(edges) == 9
    counts = np.bincount(np.searchsorted(edges, x, side="left"))
    assert counts.max() - counts.min() <= 1
    few = bin_edges(np.array([1.0, 1.0, 2.0, 3.0]), 256)
    np.testing.assert_array_equal(few, [1.5, 2.5])


def test_coverage_increases_with_alpha(small_matrices):
    train, hold, _ = small_matrices
    cov = {}
    for a in (0.90, 0.99):
        m = fit(train, TrainConfig(alpha=a, n_trees=60, max_depth=3, min_samples_leaf=20,
                                   seed=1))
        cov[a] = np.mean(m.predict(hold) >= hold.target)
    assert cov[0.99] >= cov[0.90]


def test_serialization_round_trip():
    fm = toy()
    model = fit(fm, small_cfg(subsample=0.8))
    back = QuantileModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.predict(fm.rows), model.predict(fm.rows))
