"""Feature engineering for build-job telemetry.

Twenty-one base features are derived from each record: calendar
decomposition of the timestamp, the parsed build profile, workload
descriptors, and history statistics of the same job group. History features
only ever look at rows with a strictly earlier timestamp, so a matrix built
over a whole time-ordered dataset carries no future information.
"""
from __future__ import annotations

import bisect
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Mapping, Sequence

import numpy as np

from buildmem.data import BuildRecord, Dataset, temporal_split
from buildmem.errors import ConsistencyError
from buildmem.stats import nearest_rank

ONEHOT = "one-hot"
FREQUENCY = "frequency"
NUMERIC = "numeric"

TEMPORAL_FEATURES = ("ts_hour", "ts_dayofweek", "ts_weekofyear", "ts_month", "ts_is_weekend")
HISTORY_FEATURES = (
    "lag_1_grouped", "lag_2_grouped", "lag_3_grouped",
    "rolling_mean_rss_g1_w5", "rolling_max_rss_g1_w5",
    "rolling_p95_rss_g1_w5", "rolling_std_rss_g1_w5",
    "group_seq_index", "group_expanding_median",
)
N_LAGS = 3
WINDOW = 5
MAX_ONEHOT_CARDINALITY = 16
UNKNOWN = "unknown"

_DEFAULT_ENCODINGS = (
    *((name, NUMERIC) for name in TEMPORAL_FEATURES),
    ("arch", ONEHOT),
    ("compiler", ONEHOT),
    ("opt_level", ONEHOT),
    ("make_type", ONEHOT),
    ("jobs", NUMERIC),
    ("branch_id_str", FREQUENCY),
    ("memreq_mb", NUMERIC),
    *((name, NUMERIC) for name in HISTORY_FEATURES),
)


@dataclass(frozen=True)
class FeatureSchema:
    encodings: tuple[tuple[str, str], ...] = _DEFAULT_ENCODINGS
    group_key: tuple[str, ...] = ("build_profile", "make_type")
    profile_delimiter: str = "-"

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.encodings]

    def to_dict(self) -> dict:
        return {
            "encodings": [list(e) for e in self.encodings],
            "group_key": list(self.group_key),
            "profile_delimiter": self.profile_delimiter,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FeatureSchema":
        return cls(
            encodings=tuple((str(n), str(k)) for n, k in d["encodings"]),
            group_key=tuple(d["group_key"]),
            profile_delimiter=d["profile_delimiter"],
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


DEFAULT_SCHEMA = FeatureSchema()


@dataclass(frozen=True)
class EncoderState:
    kinds: Mapping[str, str]
    frequency_tables: Mapping[str, Mapping[str, float]]
    one_hot_vocabularies: Mapping[str, Sequence[str]]
    global_target_median: float
    schema_digest: str

    def column_names(self) -> list[str]:
        """Names of the expanded (post one-hot) matrix columns."""
        cols = []
        for name, kind in self.kinds.items():
            if kind == ONEHOT:
                cols.extend(f"{name}={v}" for v in self.one_hot_vocabularies[name])
            else:
                cols.append(name)
        return cols

    def to_dict(self) -> dict:
        return {
            "kinds": [[k, v] for k, v in self.kinds.items()],
            "frequency_tables": {k: dict(v) for k, v in self.frequency_tables.items()},
            "one_hot_vocabularies": {k: list(v) for k, v in self.one_hot_vocabularies.items()},
            "global_target_median": self.global_target_median,
            "schema_digest": self.schema_digest,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderState":
        return cls(
            kinds=dict((k, v) for k, v in d["kinds"]),
            frequency_tables={k: dict(v) for k, v in d["frequency_tables"].items()},
            one_hot_vocabularies={k: list(v) for k, v in d["one_hot_vocabularies"].items()},
            global_target_median=float(d["global_target_median"]),
            schema_digest=d["schema_digest"],
        )


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    target: np.ndarray
    row_ids: np.ndarray
    column_names: list[str]
    schema_hash: str = ""

    @classmethod
    def from_arrays(cls, rows, target, column_names=None) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[:, None]
        names = list(column_names or [f"f{j}" for j in range(rows.shape[1])])
        return cls(rows, np.asarray(target, dtype=np.float64),
                   np.arange(rows.shape[0]), names, columns_hash(names, ""))

    def __len__(self):
        return self.rows.shape[0]

    def take(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx)
        return FeatureMatrix(self.rows[idx], self.target[idx], self.row_ids[idx],
                             self.column_names, self.schema_hash)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.rows).tobytes())
        h.update(np.ascontiguousarray(self.target).tobytes())
        return h.hexdigest()


def columns_hash(column_names: Sequence[str], schema_digest: str) -> str:
    blob = json.dumps([schema_digest, list(column_names)]).encode()
    return hashlib.sha256(blob).hexdigest()


def parse_build_profile(profile: str, delimiter: str = "-") -> tuple[str, str, str]:
    """Split a build profile into (arch, compiler, opt_level)."""
    parts = [p.strip() for p in (profile or "").split(delimiter, 2)]
    parts = [p if p else UNKNOWN for p in parts]
    parts += [UNKNOWN] * (3 - len(parts))
    return parts[0], parts[1], parts[2]


def derive_temporal(t: float) -> tuple[int, int, int, int, int]:
    """(hour, day of week with Monday=0, ISO week, month, is_weekend)."""
    dt = datetime.fromtimestamp(t, tz=timezone.utc)
    dow = dt.weekday()
    return dt.hour, dow, dt.isocalendar()[1], dt.month, int(dow >= 5)


def history_features(prior: Sequence[float], prior_sorted: Sequence[float],
                     median: float) -> tuple[float, ...]:
    """History statistics for one row given its group's earlier values.

    ``prior`` is in chronological order (most recent last); ``prior_sorted``
    holds the same values sorted ascending.
    """
    n = len(prior)
    lags = [float(prior[-j]) if n >= j else median for j in range(1, N_LAGS + 1)]
    window = prior[-WINDOW:]
    if window:
        w = np.asarray(window, dtype=np.float64)
        rolling = [float(w.mean()), float(w.max()), nearest_rank(w, 0.95), float(w.std())]
    else:
        rolling = [median, median, median, 0.0]
    if n:
        mid = n // 2
        exp_median = (float(prior_sorted[mid]) if n % 2
                      else (prior_sorted[mid - 1] + prior_sorted[mid]) / 2.0)
    else:
        exp_median = median
    return (*lags, *rolling, float(n), float(exp_median))


def _group_of(record: BuildRecord, schema: FeatureSchema) -> tuple:
    return tuple(getattr(record, k) for k in schema.group_key)


def compute_grouped_history(ds: Dataset, median: float,
                            schema: FeatureSchema = DEFAULT_SCHEMA) -> np.ndarray:
    """History features for every row of a time-sorted dataset.

    Returns an ``(n, len(HISTORY_FEATURES))`` array. A row's history is the
    set of same-group rows with a strictly earlier timestamp.
    """
    out = np.empty((len(ds), len(HISTORY_FEATURES)))
    # group -> [chronological values, sorted values, pending (time, value)]
    groups: dict[tuple, list] = {}
    for i, rec in enumerate(ds.records):
        g = groups.setdefault(_group_of(rec, schema), [[], [], []])
        chrono, ordered, pending = g
        if pending and pending[0][0] < rec.time:
            for _, v in pending:
                chrono.append(v)
                bisect.insort(ordered, v)
            pending.clear()
        out[i] = history_features(chrono, ordered, median)
        pending.append((rec.time, rec.max_rss))
    return out


def fit_encoders(train: Dataset, schema: FeatureSchema = DEFAULT_SCHEMA,
                 max_onehot: int = MAX_ONEHOT_CARDINALITY) -> EncoderState:
    """Fit categorical encoders and the imputation median on training rows.

    Features declared one-hot fall back to frequency encoding when they take
    more than ``max_onehot`` distinct values in the training set.
    """
    if len(train) == 0:
        raise ValueError("cannot fit encoders on an empty training set")
    raw = [_categorical_values(r, schema) for r in train.records]
    kinds, freq, vocab = {}, {}, {}
    n = len(raw)
    for name, kind in schema.encodings:
        if kind == NUMERIC:
            kinds[name] = NUMERIC
            continue
        counts = Counter(row[name] for row in raw)
        if kind == ONEHOT and len(counts) <= max_onehot:
            kinds[name] = ONEHOT
            vocab[name] = sorted(counts)
        else:
            kinds[name] = FREQUENCY
            freq[name] = {v: c / n for v, c in sorted(counts.items())}
    median = float(np.median([r.max_rss for r in train.records]))
    return EncoderState(kinds, freq, vocab, median, schema.digest())


def _categorical_values(rec: BuildRecord, schema: FeatureSchema) -> dict[str, str]:
    arch, compiler, opt = parse_build_profile(rec.build_profile, schema.profile_delimiter)
    return {"arch": arch, "compiler": compiler, "opt_level": opt,
            "make_type": rec.make_type or UNKNOWN, "branch_id_str": rec.branch_id}


def _raw_values(rec: BuildRecord, history: Sequence[float],
                schema: FeatureSchema) -> dict:
    values = dict(zip(TEMPORAL_FEATURES, derive_temporal(rec.time)))
    values.update(_categorical_values(rec, schema))
    values["jobs"] = float(rec.jobs)
    values["memreq_mb"] = rec.memreq
    values.update(zip(HISTORY_FEATURES, history))
    return values


def _encode(values: Mapping, state: EncoderState) -> list[float]:
    row = []
    for name, kind in state.kinds.items():
        v = values[name]
        if kind == NUMERIC:
            row.append(float(v))
        elif kind == FREQUENCY:
            row.append(state.frequency_tables[name].get(v, 0.0))
        else:
            row.extend(1.0 if v == c else 0.0 for c in state.one_hot_vocabularies[name])
    return row


def _check(state: EncoderState, schema: FeatureSchema) -> None:
    if state.schema_digest != schema.digest() or list(state.kinds) != schema.names:
        raise ConsistencyError("encoder state was fitted for a different feature schema")


def transform(ds: Dataset, state: EncoderState,
              schema: FeatureSchema = DEFAULT_SCHEMA) -> FeatureMatrix:
    """Build the feature matrix for ``ds``; row order follows the dataset."""
    _check(state, schema)
    history = compute_grouped_history(ds, state.global_target_median, schema)
    cols = state.column_names()
    rows = np.empty((len(ds), len(cols)))
    for i, rec in enumerate(ds.records):
        rows[i] = _encode(_raw_values(rec, history[i], schema), state)
    target = np.array([r.max_rss for r in ds.records], dtype=np.float64)
    return FeatureMatrix(rows, target, np.arange(len(ds)), cols,
                         columns_hash(cols, schema.digest()))


def encode_job(record: BuildRecord, history: Sequence[float], state: EncoderState,
               schema: FeatureSchema = DEFAULT_SCHEMA) -> np.ndarray:
    """Feature vector for a single job given its group's recent peak memory.

    ``history`` lists earlier same-group ``max_rss`` values in MiB,
    oldest first.
    """
    _check(state, schema)
    prior = [float(v) for v in history]
    hist = history_features(prior, sorted(prior), state.global_target_median)
    return np.array(_encode(_raw_values(record, hist, schema), state))


def prepare_matrices(ds: Dataset, holdout_fraction: float,
                     schema: FeatureSchema = DEFAULT_SCHEMA):
    """Split ``ds`` in time, fit encoders on the earlier part, build both matrices.

    History features are computed over the full chronology, so hold-out rows
    see the training rows that precede them but never anything later.
    Returns ``(train_matrix, holdout_matrix, encoder_state)``.
    """
    train_ds, _ = temporal_split(ds, holdout_fraction)
    state = fit_encoders(train_ds, schema)
    full = transform(ds, state, schema)
    n_train = len(train_ds)
    return full.take(np.arange(n_train)), full.take(np.arange(n_train, len(ds))), state
