import copy
import math
from datetime import datetime, timezone
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from buildmem.data import BuildRecord, Dataset
from buildmem.errors import ConsistencyError
from buildmem.features import (
    DEFAULT_SCHEMA,
    HISTORY_FEATURES,
    FeatureSchema,
    compute_grouped_history,
    derive_temporal,
    encode_job,
    fit_encoders,
    parse_build_profile,
    transform,
)
from buildmem.stats import nearest_rank

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc).timestamp()


def rec(t, rss, profile="linuxx86_64-gcc9-opt", make="full", branch="main", jobs=4):
    return BuildRecord(time=float(t), build_profile=profile, make_type=make, jobs=jobs,
                       branch_id=branch, memory_fail_count=0, max_rss=float(rss),
                       memreq=2048.0)


def hist(ds, median=999.0):
    h = compute_grouped_history(ds, median)
    return {name: h[:, i] for i, name in enumerate(HISTORY_FEATURES)}


def brute_nearest_rank(values, q):
    k = math.ceil(Fraction(str(q)) * len(values))
    return sorted(values)[k - 1]


def test_parse_build_profile():
    assert parse_build_profile("linuxx86_64-gcc9-opt") == ("linuxx86_64", "gcc9", "opt")
    assert parse_build_profile("") == ("unknown", "unknown", "unknown")
    assert parse_build_profile("onlyarch") == ("onlyarch", "unknown", "unknown")
    assert parse_build_profile("a_b_c", delimiter="_") == ("a", "b", "c")


def test_temporal_calendar_facts():
    hour, dow, week, month, weekend = derive_temporal(T0)
    assert (hour, dow, week, month, weekend) == (0, 0, 1, 1, 0)
    sat = datetime(2024, 1, 6, 12, tzinfo=timezone.utc).timestamp()
    assert derive_temporal(sat)[4] == 1
    assert derive_temporal(sat)[0] == 12


@given(st.integers(min_value=0, max_value=2_000_000_000))
def test_weekly_periodicity(t):
    assert derive_temporal(t)[1] == derive_temporal(t + 7 * 86400)[1]


def test_lag_is_direct_predecessor():
    ds = Dataset((rec(T0, 512), rec(T0 + 60, 600), rec(T0 + 120, 700)))
    h = hist(ds)
    assert h["lag_1_grouped"][2] == 600
    assert h["lag_2_grouped"][2] == 512
    assert h["lag_3_grouped"][2] == 999.0
    assert h["lag_1_grouped"][0] == 999.0
    assert list(h["group_seq_index"]) == [0, 1, 2]


def test_rolling_p95_nearest_rank():
    values = [1, 2, 3, 4, 100]
    ds = Dataset(tuple(rec(T0 + i, v) for i, v in enumerate(values + [5])))
    h = hist(ds)
    assert h["rolling_p95_rss_g1_w5"][5] == 100
    assert h["rolling_max_rss_g1_w5"][5] == 100
    assert h["rolling_mean_rss_g1_w5"][5] == pytest.approx(22.0)
    assert h["rolling_std_rss_g1_w5"][5] == pytest.approx(np.std(values))


@given(st.lists(st.floats(min_value=1, max_value=1e6), min_size=1, max_size=5))
def test_nearest_rank_matches_sort_oracle(values):
    assert nearest_rank(values, 0.95) == brute_nearest_rank(values, 0.95)


@pytest.mark.parametrize("q", [0.05, 0.1, 0.5, 0.9, 0.95, 0.99, 0.07, 1.0])
@pytest.mark.parametrize("n", [1, 2, 3, 7, 10, 20, 100])
def test_nearest_rank_grid(q, n):
    values = list(np.random.default_rng(n).normal(size=n))
    assert nearest_rank(values, q) == brute_nearest_rank(values, q)


def test_groups_are_separate_and_window_is_five():
    rows = []
    for i in range(8):
        rows.append(rec(T0 + 2 * i, 100 + i, make="full"))
        rows.append(rec(T0 + 2 * i + 1, 5000 + i, make="test"))
    h = hist(Dataset(tuple(rows)))
    # last "full" row (index 14) has predecessors 100..106, window is 102..106
    assert h["lag_1_grouped"][14] == 106
    assert h["rolling_mean_rss_g1_w5"][14] == pytest.approx(104.0)
    assert h["group_expanding_median"][14] == pytest.approx(103.0)
    assert h["lag_1_grouped"][15] == 5006


def test_same_timestamp_is_not_history():
    ds = Dataset((rec(T0, 100), rec(T0 + 10, 200), rec(T0 + 10, 300), rec(T0 + 20, 400)))
    h = hist(ds)
    assert h["lag_1_grouped"][1] == 100
    assert h["lag_1_grouped"][2] == 100
    assert h["lag_1_grouped"][3] == 300
    assert h["group_seq_index"][2] == 1


def test_first_row_imputed(synth_small):
    ds = Dataset((rec(T0, 512),))
    state = fit_encoders(ds)
    fm = transform(ds, state)
    row = dict(zip(fm.column_names, fm.rows[0]))
    for name in ("lag_1_grouped", "lag_2_grouped", "lag_3_grouped",
                 "rolling_mean_rss_g1_w5", "rolling_max_rss_g1_w5",
                 "rolling_p95_rss_g1_w5", "group_expanding_median"):
        assert row[name] == 512.0
    assert row["group_seq_index"] == 0


def test_causality(synth_small):
    ds, _ = synth_small
    full = compute_grouped_history(ds, 777.0)
    for cut in (1, 37, 400, 999):
        t = ds[cut].time
        keep = [r for r in ds.records if r.time <= t]
        part = compute_grouped_history(Dataset(tuple(keep)), 777.0)
        np.testing.assert_array_equal(part, full[:len(keep)])


def test_fit_encoders_counts():
    ds = Dataset((rec(T0, 1, branch="a"), rec(T0 + 1, 2, branch="a"), rec(T0 + 2, 3, branch="b")))
    state = fit_encoders(ds)
    assert state.frequency_tables["branch_id_str"] == {"a": 2 / 3, "b": 1 / 3}
    assert state.global_target_median == 2


def test_fit_encoders_empty():
    with pytest.raises(ValueError):
        fit_encoders(Dataset(()))


def test_unseen_categories():
    train = Dataset((rec(T0, 1, branch="a", make="full"), rec(T0 + 1, 2, branch="a", make="test")))
    state = fit_encoders(train)
    test = Dataset((rec(T0 + 5, 3, branch="zzz", make="weird"),))
    fm = transform(test, state)
    row = dict(zip(fm.column_names, fm.rows[0]))
    assert row["branch_id_str"] == 0.0
    assert row["make_type=full"] == 0.0 and row["make_type=test"] == 0.0


def test_high_cardinality_falls_back_to_frequency():
    rows = tuple(rec(T0 + i, 100, make=f"m{i}") for i in range(20))
    state = fit_encoders(Dataset(rows))
    assert state.kinds["make_type"] == "frequency"
    assert state.kinds["arch"] == "one-hot"


def test_feature_count_and_names(small_matrices):
    names = DEFAULT_SCHEMA.names
    assert len(names) == 21
    for n in ("lag_1_grouped", "rolling_p95_rss_g1_w5", "jobs", "branch_id_str",
              "ts_weekofyear"):
        assert n in names
    train, _, state = small_matrices
    assert list(state.kinds) == names
    assert train.rows.shape[1] == len(state.column_names())


def test_transform_determinism_and_purity(synth_small):
    ds, _ = synth_small
    state = fit_encoders(ds.subset(0, 1000))
    before = copy.deepcopy(state.to_dict())
    a = transform(ds, state)
    b = transform(ds.subset(1000, len(ds)), state)
    c = transform(ds, state)
    assert state.to_dict() == before
    np.testing.assert_array_equal(a.rows, c.rows)
    np.testing.assert_array_equal(a.row_ids, np.arange(len(ds)))
    assert not np.isnan(a.rows).any() and not np.isnan(b.rows).any()


def test_schema_mismatch():
    ds = Dataset((rec(T0, 1), rec(T0 + 1, 2)))
    state = fit_encoders(ds)
    other = FeatureSchema(profile_delimiter="_")
    with pytest.raises(ConsistencyError):
        transform(ds, state, other)


def test_encode_job_matches_transform(synth_small):
    ds, _ = synth_small
    state = fit_encoders(ds.subset(0, 1000))
    fm = transform(ds, state)
    target = ds[1200]
    group = (target.build_profile, target.make_type)
    prior = [r.max_rss for r in ds.records[:1200]
             if (r.build_profile, r.make_type) == group and r.time < target.time]
    row = encode_job(target, prior, state)
    np.testing.assert_array_equal(row, fm.rows[1200])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=1, max_value=1e5), min_size=0, max_size=12))
def test_history_window_property(values):
    rows = tuple(rec(T0 + i, v) for i, v in enumerate(values + [1.0]))
    h = hist(Dataset(rows), median=42.0)
    last = len(values)
    window = values[-5:]
    if window:
        assert h["rolling_p95_rss_g1_w5"][last] == brute_nearest_rank(window, 0.95)
        assert h["rolling_max_rss_g1_w5"][last] == max(window)
        assert h["group_expanding_median"][last] == pytest.approx(float(np.median(values)))
    else:
        assert h["rolling_p95_rss_g1_w5"][last] == 42.0
