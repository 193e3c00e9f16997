"""Hyperparameter search with a tree-structured Parzen estimator.

Every trial is scored by 3-fold cross-validation over contiguous time blocks.
The out-of-fold predictions of all folds are pooled and the cost is computed
once on the pooled vectors, so each job carries the same weight no matter
how large its fold was.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Mapping, Union

import numpy as np
from scipy.special import ndtr, ndtri

from buildmem.ensemble import SAFETY_BOUNDS, train_ensemble
from buildmem.features import FeatureMatrix
from buildmem.gbdt import TrainConfig
from buildmem.metrics import pooled_report, underallocation_fraction, overallocation_ratio

logger = logging.getLogger(__name__)

N_FOLDS = 3
N_STARTUP_TRIALS = 10
GAMMA = 0.25
N_CANDIDATES = 24


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float
    log: bool = False


@dataclass(frozen=True)
class IntUniform:
    low: int
    high: int
    log: bool = False


@dataclass(frozen=True)
class Categorical:
    choices: tuple


Distribution = Union[Uniform, IntUniform, Categorical]


@dataclass(frozen=True)
class SearchSpace:
    params: Mapping[str, Distribution]

    def __post_init__(self):
        if not self.params:
            raise ValueError("search space is empty")
        for name, dist in self.params.items():
            if isinstance(dist, Categorical):
                if not dist.choices:
                    raise ValueError(f"{name}: no categorical choices")
                continue
            if not (math.isfinite(dist.low) and math.isfinite(dist.high)
                    and dist.low <= dist.high):
                raise ValueError(f"{name}: invalid bounds [{dist.low}, {dist.high}]")
            if dist.log and dist.low <= (0.5 if isinstance(dist, IntUniform) else 0):
                raise ValueError(f"{name}: log scale needs a positive lower bound")

    def contains(self, params: Mapping) -> bool:
        for name, dist in self.params.items():
            v = params[name]
            if isinstance(dist, Categorical):
                if v not in dist.choices:
                    return False
            elif not dist.low <= v <= dist.high:
                return False
            elif isinstance(dist, IntUniform) and int(v) != v:
                return False
        return True


def ensemble_search_space(alpha=(0.90, 0.99), safety=SAFETY_BOUNDS) -> SearchSpace:
    """Joint space over the quantile level, safety factor and both members."""
    params: dict[str, Distribution] = {
        "alpha": Uniform(*alpha),
        "safety_factor": Uniform(*safety),
    }
    for m in ("a", "b"):
        params.update({
            f"{m}_n_trees": IntUniform(50, 600),
            f"{m}_learning_rate": Uniform(0.01, 0.3, log=True),
            f"{m}_max_depth": IntUniform(3, 12),
            f"{m}_min_samples_leaf": IntUniform(5, 100, log=True),
            f"{m}_subsample": Uniform(0.5, 1.0),
            f"{m}_colsample": Uniform(0.5, 1.0),
        })
    return SearchSpace(params)


def params_to_configs(params: Mapping, seed: int = 0, n_bins: int = 256):
    """Turn a flat parameter assignment into ``(cfg_a, cfg_b, safety_factor)``."""
    alpha = round(float(params["alpha"]), 12)
    cfgs = []
    for i, m in enumerate(("a", "b")):
        cfgs.append(TrainConfig(
            alpha=alpha,
            n_trees=int(params[f"{m}_n_trees"]),
            learning_rate=float(params[f"{m}_learning_rate"]),
            max_depth=int(params[f"{m}_max_depth"]),
            min_samples_leaf=int(params[f"{m}_min_samples_leaf"]),
            subsample=float(params[f"{m}_subsample"]),
            colsample=float(params[f"{m}_colsample"]),
            n_bins=n_bins,
            seed=seed + i,
        ))
    return cfgs[0], cfgs[1], float(params["safety_factor"])


@dataclass
class Trial:
    trial_id: int
    params: dict
    cost: float
    under_fraction: float = math.nan
    over_ratio: float = math.nan
    fold_sizes: list = field(default_factory=list)
    fold_under: list = field(default_factory=list)
    fold_over: list = field(default_factory=list)
    wall_time_seconds: float = 0.0
    failed: bool = False
    error: str = ""


@dataclass
class TunerState:
    seed: int = 0
    n_startup_trials: int = N_STARTUP_TRIALS
    gamma: float = GAMMA
    n_candidates: int = N_CANDIDATES
    history: list = field(default_factory=list)


# --- sampling ---------------------------------------------------------------

def _internal_bounds(dist):
    lo, hi = float(dist.low), float(dist.high)
    if isinstance(dist, IntUniform):
        lo, hi = lo - 0.5, hi + 0.5
    if dist.log:
        lo, hi = math.log(lo), math.log(hi)
    return lo, hi


def _to_internal(dist, v):
    return math.log(v) if dist.log else float(v)


def _from_internal(dist, x):
    v = math.exp(x) if dist.log else float(x)
    if isinstance(dist, IntUniform):
        return int(min(max(round(v), dist.low), dist.high))
    return min(max(v, dist.low), dist.high)


def _sample_prior(dist, rng):
    if isinstance(dist, Categorical):
        return dist.choices[int(rng.integers(len(dist.choices)))]
    lo, hi = _internal_bounds(dist)
    return _from_internal(dist, rng.uniform(lo, hi))


class _Parzen:
    """Mixture of a uniform prior and truncated Gaussians at the observations."""

    def __init__(self, obs, lo, hi):
        self.lo, self.hi = lo, hi
        self.mu = np.asarray(obs, dtype=np.float64)
        n = self.mu.size
        width = hi - lo
        if width <= 0:
            self.sigma = 1.0
        else:
            spread = float(self.mu.std()) if n >= 2 else width
            # floor shrinks with evidence so a few lucky trials cannot
            # collapse the search onto one point
            floor = width / min(100.0, 1.0 + n)
            self.sigma = float(np.clip(1.06 * spread * (n + 1) ** -0.2, floor, width))
        self.weights = np.full(n + 1, 1.0 / (n + 1))  # [prior, kernels...]
        self._mass = ndtr((hi - self.mu) / self.sigma) - ndtr((lo - self.mu) / self.sigma)

    def log_pdf(self, x):
        x = np.asarray(x, dtype=np.float64)
        width = self.hi - self.lo
        if width <= 0:
            return np.zeros_like(x)
        z = (x[:, None] - self.mu[None, :]) / self.sigma
        kern = np.exp(-0.5 * z * z) / (self.sigma * math.sqrt(2 * math.pi))
        kern = kern / np.maximum(self._mass, 1e-300)
        dens = self.weights[0] / width + kern @ self.weights[1:]
        return np.log(np.maximum(dens, 1e-300))

    def sample(self, rng, size):
        if self.hi - self.lo <= 0:
            return np.full(size, self.lo)
        comp = rng.choice(self.mu.size + 1, size=size, p=self.weights)
        u = rng.uniform(size=size)
        out = np.empty(size)
        for i, (c, ui) in enumerate(zip(comp, u)):
            if c == 0:
                out[i] = self.lo + ui * (self.hi - self.lo)
                continue
            mu = self.mu[c - 1]
            a = ndtr((self.lo - mu) / self.sigma)
            b = ndtr((self.hi - mu) / self.sigma)
            if b - a < 1e-12:
                out[i] = min(max(mu, self.lo), self.hi)
            else:
                out[i] = mu + self.sigma * ndtri(a + ui * (b - a))
        return np.clip(out, self.lo, self.hi)


def _tpe_numeric(dist, good, bad, rng, n_candidates):
    lo, hi = _internal_bounds(dist)
    l_est = _Parzen([_to_internal(dist, v) for v in good], lo, hi)
    g_est = _Parzen([_to_internal(dist, v) for v in bad], lo, hi)
    cand = l_est.sample(rng, n_candidates)
    score = l_est.log_pdf(cand) - g_est.log_pdf(cand)
    return _from_internal(dist, cand[int(np.argmax(score))])


def _tpe_categorical(dist, good, bad, rng, n_candidates):
    k = len(dist.choices)
    index = {c: i for i, c in enumerate(dist.choices)}
    p_good = np.ones(k)
    p_bad = np.ones(k)
    for v in good:
        p_good[index[v]] += 1
    for v in bad:
        p_bad[index[v]] += 1
    p_good /= p_good.sum()
    p_bad /= p_bad.sum()
    cand = rng.choice(k, size=n_candidates, p=p_good)
    score = np.log(p_good[cand]) - np.log(p_bad[cand])
    return dist.choices[int(cand[int(np.argmax(score))])]


def split_good_bad(history, gamma):
    """Trials ordered by cost; the best ``ceil(gamma * n)`` form the good set."""
    order = sorted(history, key=lambda t: (t.cost, t.trial_id))
    n_good = math.ceil(gamma * len(history))
    return order[:n_good], order[n_good:]


def suggest(state: TunerState, space: SearchSpace, trial_id: int | None = None) -> dict:
    """Propose the next parameter assignment.

    The result depends only on the history, the seed and ``trial_id`` (which
    defaults to the next trial number), so it is reproducible.
    """
    if not isinstance(space, SearchSpace):
        space = SearchSpace(space)
    tid = len(state.history) if trial_id is None else trial_id
    rng = np.random.default_rng([state.seed, tid])
    if len(state.history) < state.n_startup_trials:
        return {name: _sample_prior(d, rng) for name, d in space.params.items()}

    good, bad = split_good_bad(state.history, state.gamma)
    out = {}
    for name, dist in space.params.items():
        g = [t.params[name] for t in good if name in t.params]
        b = [t.params[name] for t in bad if name in t.params]
        if isinstance(dist, Categorical):
            out[name] = _tpe_categorical(dist, g, b, rng, state.n_candidates)
        else:
            out[name] = _tpe_numeric(dist, g, b, rng, state.n_candidates)
    return out


def random_search(objective: Callable[[dict], float], space: SearchSpace,
                  n_trials: int, seed: int) -> list[float]:
    """Uniform prior sampling; the baseline the TPE sampler is measured against."""
    rng = np.random.default_rng([seed, 0x5EED])
    return [float(objective({n: _sample_prior(d, rng) for n, d in space.params.items()}))
            for _ in range(n_trials)]


# --- evaluation ---------------------------------------------------------------

def time_folds(n: int, n_folds: int = N_FOLDS) -> list[np.ndarray]:
    """Contiguous, time-ordered blocks covering ``range(n)``."""
    return np.array_split(np.arange(n), n_folds)


def evaluate_trial(params: Mapping, train: FeatureMatrix, seed: int = 0,
                   trial_id: int = 0, n_bins: int = 256) -> Trial:
    """Cross-validate one ensemble configuration and score the pooled OOF predictions."""
    start = time.perf_counter()
    cfg_a, cfg_b, s = params_to_configs(params, seed, n_bins)
    min_fold = max(cfg_a.min_samples_leaf, cfg_b.min_samples_leaf)
    n = len(train)
    if n < N_FOLDS * min_fold:
        raise ValueError(
            f"need at least {N_FOLDS * min_fold} rows for {N_FOLDS}-fold CV, got {n}")

    fold_preds, fold_actuals = [], []
    folds = time_folds(n)
    for k, held in enumerate(folds):
        rest = np.concatenate([f for j, f in enumerate(folds) if j != k])
        model = train_ensemble(train.take(rest), cfg_a, cfg_b, s)
        fold_preds.append(model.predict(train.rows[held]))
        fold_actuals.append(train.target[held])

    report = pooled_report(fold_preds, fold_actuals)
    return Trial(
        trial_id=trial_id,
        params=dict(params),
        cost=report.cost,
        under_fraction=report.under_fraction,
        over_ratio=report.over_ratio,
        fold_sizes=[len(f) for f in folds],
        fold_under=[underallocation_fraction(p, a) for p, a in zip(fold_preds, fold_actuals)],
        fold_over=[overallocation_ratio(p, a) for p, a in zip(fold_preds, fold_actuals)],
        wall_time_seconds=time.perf_counter() - start,
    )


def _run_one(objective, params, trial_id) -> Trial:
    start = time.perf_counter()
    try:
        result = objective(params, trial_id=trial_id)
    except Exception as exc:  # a broken trial must not end the search
        logger.warning("trial %d failed: %s", trial_id, exc)
        return Trial(trial_id, dict(params), math.inf, failed=True, error=str(exc),
                     wall_time_seconds=time.perf_counter() - start)
    if isinstance(result, Trial):
        return result
    return Trial(trial_id, dict(params), float(result),
                 wall_time_seconds=time.perf_counter() - start)


class TrialsLog:
    """Append-only CSV of finished trials."""

    def __init__(self, path, param_names):
        self.path = path
        self.columns = (["trial_id"] + list(param_names)
                        + ["cost", "under_fraction", "over_ratio", "wall_time_seconds", "status"])
        if not os.path.exists(path) or os.path.getsize(path) == 0:
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def append(self, trial: Trial) -> None:
        row = [trial.trial_id] + [trial.params.get(p, "") for p in self.columns[1:-5]]
        row += [trial.cost, trial.under_fraction, trial.over_ratio,
                trial.wall_time_seconds, "failed" if trial.failed else "ok"]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)


def run_search(train: FeatureMatrix | None, space: SearchSpace, n_trials: int,
               seed: int = 0, *, objective=None, log_path=None, jobs: int = 1,
               state: TunerState | None = None):
    """Suggest/evaluate loop. Returns ``(best_trial, history)``.

    ``objective(params, trial_id=...)`` may return a :class:`Trial` or a bare
    cost; by default it is :func:`evaluate_trial` on ``train``. With
    ``jobs > 1`` suggestions are drawn in batches of ``jobs`` before any of
    the batch is evaluated, which changes the trajectory compared with the
    sequential mode.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if objective is None:
        objective = partial(evaluate_trial, train=train, seed=seed)
    state = state or TunerState(seed=seed)
    log = TrialsLog(log_path, space.params) if log_path else None

    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        while len(state.history) < n_trials:
            base = len(state.history)
            batch = min(jobs, n_trials - base)
            ids = list(range(base, base + batch))
            suggestions = [suggest(state, space, trial_id=i) for i in ids]
            if pool is None:
                results = [_run_one(objective, p, i) for p, i in zip(suggestions, ids)]
            else:
                results = list(pool.map(_run_one, [objective] * batch, suggestions, ids))
            for trial in results:
                state.history.append(trial)
                if log is not None:
                    log.append(trial)
                logger.info("trial %d cost=%.5f", trial.trial_id, trial.cost)
    finally:
        if pool is not None:
            pool.shutdown()

    best = min(state.history, key=lambda t: (t.cost, t.trial_id))
    return best, state.history
