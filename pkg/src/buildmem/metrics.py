"""Allocation quality metrics and the under/over-allocation cost."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from buildmem.data import Dataset

UNDER_PENALTY = 5.0
DEFAULT_HEADROOM_EDGES = (0.25, 0.5, 1.0)


def _pair(preds, actuals):
    p = np.asarray(preds, dtype=np.float64).ravel()
    a = np.asarray(actuals, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {a.size} actuals")
    if p.size == 0:
        raise ValueError("need at least one job")
    return p, a


def underallocation_fraction(preds, actuals) -> float:
    """Fraction of jobs whose allocation is strictly below peak usage."""
    p, a = _pair(preds, actuals)
    return float(np.count_nonzero(p < a)) / p.size


def overallocation_ratio(preds, actuals) -> float:
    """Total allocated memory over total peak memory."""
    p, a = _pair(preds, actuals)
    total = a.sum()
    if not total > 0:
        raise ValueError("total actual memory must be positive")
    return float(p.sum() / total)


def cost(under_fraction: float, over_ratio: float) -> float:
    """``5 * under_fraction + over_ratio``; under is a fraction, not a percentage."""
    for name, v in (("under_fraction", under_fraction), ("over_ratio", over_ratio)):
        if not (math.isfinite(v) and v >= 0):
            raise ValueError(f"{name} must be finite and non-negative, got {v}")
    return UNDER_PENALTY * under_fraction + over_ratio


def _bin_labels(edges):
    pct = [f"{round(e * 100):d}%" for e in edges]
    labels = ["under", f"[0%,{pct[0]})"]
    labels += [f"[{lo},{hi})" for lo, hi in zip(pct, pct[1:])]
    labels.append(f">={pct[-1]}")
    return labels


def quality_histogram(preds, actuals, edges=DEFAULT_HEADROOM_EDGES,
                      under_mask=None) -> list[tuple[str, int]]:
    """Count jobs by headroom ``(pred - actual) / actual``.

    Bins are ``under`` (negative headroom), then left-closed intervals
    between 0 and the given edges, and a final open-ended bin. A custom
    ``under_mask`` overrides which jobs land in the ``under`` bin.
    """
    p, a = _pair(preds, actuals)
    edges = tuple(edges)
    if list(edges) != sorted(edges) or edges[0] <= 0:
        raise ValueError("edges must be positive and increasing")
    headroom = (p - a) / a
    under = headroom < 0 if under_mask is None else np.asarray(under_mask, bool)
    # bin k for headroom in [edges[k-1], edges[k]), bin 0 for [0, edges[0])
    idx = np.searchsorted(np.asarray(edges), headroom, side="right")
    counts = [int(np.count_nonzero(under))]
    counts += [int(np.count_nonzero(~under & (idx == k))) for k in range(len(edges) + 1)]
    return list(zip(_bin_labels(edges), counts))


@dataclass
class EvalReport:
    n_jobs: int
    under_fraction: float
    over_ratio: float
    over_percent: float
    cost: float
    histogram: list = field(default_factory=list)
    mean_inference_seconds: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["histogram"] = [{"bin": b, "count": c} for b, c in self.histogram]
        return d

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_label", "count", "fraction"])
        for label, count in self.histogram:
            w.writerow([label, count, count / self.n_jobs if self.n_jobs else 0.0])
        return buf.getvalue()


def evaluate(preds, actuals, *, under_mask=None, edges=DEFAULT_HEADROOM_EDGES,
             mean_inference_seconds=None) -> EvalReport:
    p, a = _pair(preds, actuals)
    under = (float(np.count_nonzero(under_mask)) / p.size if under_mask is not None
             else underallocation_fraction(p, a))
    over = overallocation_ratio(p, a)
    return EvalReport(
        n_jobs=int(p.size),
        under_fraction=under,
        over_ratio=over,
        over_percent=(over - 1.0) * 100.0,
        cost=cost(under, over),
        histogram=quality_histogram(p, a, edges, under_mask),
        mean_inference_seconds=mean_inference_seconds,
    )


def baseline_under_mask(holdout: Dataset) -> np.ndarray:
    """Jobs the developer-requested limit under-served: a recorded allocation
    failure, or peak usage above the request."""
    fails = holdout.column("memory_fail_count")
    return (fails > 0) | (holdout.column("max_rss") > holdout.column("memreq"))


def baseline_report(holdout: Dataset) -> EvalReport:
    """Score the developers' own ``memreq`` values as if they were predictions."""
    return evaluate(holdout.column("memreq"), holdout.column("max_rss"),
                    under_mask=baseline_under_mask(holdout))


def pooled_report(fold_preds, fold_actuals) -> EvalReport:
    """Metrics on the concatenation of per-fold predictions.

    Every job counts once regardless of the size of the fold it came from.
    """
    return evaluate(np.concatenate([np.ravel(p) for p in fold_preds]),
                    np.concatenate([np.ravel(a) for a in fold_actuals]))
