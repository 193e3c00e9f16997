import csv
import math

import numpy as np
import pytest

from buildmem.tuner import (
    Categorical,
    IntUniform,
    SearchSpace,
    Trial,
    TunerState,
    Uniform,
    ensemble_search_space,
    evaluate_trial,
    params_to_configs,
    run_search,
    split_good_bad,
    suggest,
    time_folds,
)
from buildmem.metrics import pooled_report
from conftest import surface, surface_space

MIXED = SearchSpace({
    "u": Uniform(0.5, 2.0),
    "lg": Uniform(0.01, 0.3, log=True),
    "i": IntUniform(3, 12),
    "il": IntUniform(5, 100, log=True),
    "c": Categorical(("gcc", "clang", "icc")),
})


def mixed_objective(p, trial_id=None):
    return (p["u"] - 1.0) ** 2 + abs(math.log(p["lg"] / 0.05)) + abs(p["i"] - 6) \
        + (0 if p["c"] == "clang" else 1)


def test_empty_space():
    with pytest.raises(ValueError):
        SearchSpace({})
    with pytest.raises(ValueError):
        SearchSpace({"x": Uniform(2.0, 1.0)})


def test_prior_sample_in_bounds():
    s = suggest(TunerState(seed=1), MIXED)
    assert MIXED.contains(s)


def test_good_set_size():
    hist = [Trial(i, {}, float(i)) for i in range(20)]
    good, bad = split_good_bad(hist, 0.25)
    assert len(good) == 5 and len(bad) == 15
    assert [t.trial_id for t in good] == [0, 1, 2, 3, 4]


def test_suggest_deterministic():
    _, hist = run_search(None, MIXED, 15, seed=3, objective=mixed_objective)
    a = suggest(TunerState(seed=3, history=list(hist)), MIXED)
    b = suggest(TunerState(seed=3, history=list(hist)), MIXED)
    assert a == b


def test_suggestions_valid():
    _, hist = run_search(None, MIXED, 40, seed=7, objective=mixed_objective)
    for t in hist:
        assert MIXED.contains(t.params)
        assert isinstance(t.params["i"], int) and isinstance(t.params["il"], int)


def test_fold_partition():
    folds = time_folds(101)
    cat = np.concatenate(folds)
    np.testing.assert_array_equal(cat, np.arange(101))
    for f in folds:
        np.testing.assert_array_equal(f, np.arange(f[0], f[-1] + 1))
    assert len(folds) == 3


def test_pooled_counting():
    folds_a = [np.full(n, 10.0) for n in (100, 100, 100)]
    folds_p = [np.where(np.arange(n) < k, 5.0, 20.0) for n, k in zip((100, 100, 100), (1, 2, 3))]
    assert pooled_report(folds_p, folds_a).under_fraction == 6 / 300


def test_n_trials_one_and_argmin():
    best, hist = run_search(None, surface_space(), 1, seed=0, objective=surface)
    assert len(hist) == 1 and best is hist[0]
    best, hist = run_search(None, surface_space(), 30, seed=0, objective=surface)
    assert best.cost == min(t.cost for t in hist)


def test_failure_marker(tmp_path):
    def flaky(p, trial_id=None):
        if trial_id == 2:
            raise RuntimeError("boom")
        return surface(p)
    log = tmp_path / "trials.csv"
    best, hist = run_search(None, surface_space(), 5, seed=0, objective=flaky, log_path=log)
    assert hist[2].failed and hist[2].cost == math.inf
    assert best.cost < math.inf
    rows = list(csv.DictReader(open(log)))
    assert len(rows) == 5
    assert rows[2]["status"] == "failed"
    assert set(rows[0]) >= {"trial_id", "x", "y", "cost", "under_fraction", "over_ratio",
                            "wall_time_seconds"}


def test_reproducible_history():
    _, h1 = run_search(None, surface_space(), 25, seed=5, objective=surface)
    _, h2 = run_search(None, surface_space(), 25, seed=5, objective=surface)
    assert [t.params for t in h1] == [t.params for t in h2]
    assert [t.cost for t in h1] == [t.cost for t in h2]


def test_params_to_configs():
    space = ensemble_search_space()
    p = suggest(TunerState(seed=0), space)
    a, b, s = params_to_configs(p, seed=4)
    assert a.alpha == b.alpha and (a.seed, b.seed) == (4, 5)
    assert 1.0 <= s <= 1.15


def test_evaluate_trial(small_matrices):
    train, _, _ = small_matrices
    p = {"alpha": 0.95, "safety_factor": 1.05}
    for m in "ab":
        p.update({f"{m}_n_trees": 50, f"{m}_learning_rate": 0.1, f"{m}_max_depth": 3,
                  f"{m}_min_samples_leaf": 20, f"{m}_subsample": 1.0, f"{m}_colsample": 1.0})
    t = evaluate_trial(p, train)
    assert sum(t.fold_sizes) == len(train)
    assert t.cost == pytest.approx(5 * t.under_fraction + t.over_ratio)
    # pooled fraction is the size-weighted mix of the fold fractions
    mix = sum(n * u for n, u in zip(t.fold_sizes, t.fold_under)) / len(train)
    assert t.under_fraction == pytest.approx(mix)
    with pytest.raises(ValueError):
        evaluate_trial(p, train.take(np.arange(50)))
