"""Operating points over (alpha, safety factor) and their Pareto frontier."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace

from buildmem.ensemble import SAFETY_BOUNDS, combine, train_ensemble
from buildmem.features import FeatureMatrix
from buildmem.metrics import cost, overallocation_ratio, underallocation_fraction

ALPHA_BOUNDS = (0.90, 0.99)


@dataclass(frozen=True)
class OperatingPoint:
    alpha: float
    safety_factor: float
    under_fraction: float
    over_percent: float
    cost: float
    model_ref: str = ""


@dataclass
class Frontier:
    points: list
    frontier_indices: list
    named: dict

    def to_rows(self) -> list[dict]:
        on_front = set(self.frontier_indices)
        roles = {}
        for role, i in self.named.items():
            roles.setdefault(i, []).append(role)
        return [{
            "alpha": p.alpha,
            "s": p.safety_factor,
            "under_fraction": p.under_fraction,
            "over_percent": p.over_percent,
            "cost": p.cost,
            "is_frontier": int(i in on_front),
            "named_role": "|".join(roles.get(i, [])),
        } for i, p in enumerate(self.points)]

    def write_csv(self, path) -> None:
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def grid(lo: float, hi: float, step: float) -> list[float]:
    """Inclusive grid rounded to the step's precision (0.90, 0.91, ... 0.99)."""
    n = int(math.floor((hi - lo) / step + 1e-9))
    digits = max(0, -int(math.floor(math.log10(step))) + 2)
    return [round(lo + i * step, digits) for i in range(n + 1)]


def _check_grid(values, bounds, name):
    if not values:
        raise ValueError(f"{name} grid is empty")
    lo, hi = bounds
    for v in values:
        if not lo - 1e-9 <= v <= hi + 1e-9:
            raise ValueError(f"{name}={v} outside [{lo}, {hi}]")


def points_for_predictions(pred_a, pred_b, actuals, alpha, s_grid, model_ref="",
                           floor=1.0) -> list[OperatingPoint]:
    """Score one member pair at every safety factor by rescaling its predictions."""
    out = []
    for s in s_grid:
        preds = combine(pred_a, pred_b, s, floor)
        under = underallocation_fraction(preds, actuals)
        over = overallocation_ratio(preds, actuals)
        out.append(OperatingPoint(alpha, s, under, (over - 1.0) * 100.0,
                                  cost(under, over), model_ref))
    return out


def sweep(train: FeatureMatrix, holdout: FeatureMatrix, base_configs,
          alpha_grid, s_grid, *, on_model=None) -> list[OperatingPoint]:
    """Train one member pair per alpha and evaluate every safety factor on the hold-out.

    ``base_configs`` is the tuned ``(cfg_a, cfg_b)`` pair; only alpha is
    overridden. ``on_model(alpha, model)`` is called for every trained pair.
    """
    _check_grid(list(alpha_grid), ALPHA_BOUNDS, "alpha")
    _check_grid(list(s_grid), SAFETY_BOUNDS, "safety_factor")
    cfg_a, cfg_b = base_configs
    points = []
    for alpha in alpha_grid:
        model = train_ensemble(train, replace(cfg_a, alpha=alpha),
                               replace(cfg_b, alpha=alpha), 1.0)
        if on_model is not None:
            on_model(alpha, model)
        pa, pb = model.member_predictions(holdout.rows)
        points += points_for_predictions(pa, pb, holdout.target, alpha, s_grid,
                                         model_ref=f"alpha={alpha}",
                                         floor=model.floor_mib)
    return points


def non_dominated(points) -> list[int]:
    """Indices of points not dominated in (under_fraction, over_percent).

    Of exact duplicates only the lowest index is kept. The result is sorted
    by under_fraction ascending, which makes over_percent strictly decreasing.
    """
    if not points:
        raise ValueError("no points")
    order = sorted(range(len(points)),
                   key=lambda i: (points[i].under_fraction, points[i].over_percent, i))
    front, best_over = [], math.inf
    for i in order:
        if points[i].over_percent < best_over:
            front.append(i)
            best_over = points[i].over_percent
    return front


def _argmin(indices, key, points):
    return min(indices, key=lambda i: (key(points[i]), points[i].cost, i))


def select_named(points, frontier_indices=None) -> dict[str, int]:
    """Indices of the balanced, low-waste and low-underallocation points."""
    if not points:
        raise ValueError("no points")
    if frontier_indices is None:
        frontier_indices = non_dominated(points)
    everything = range(len(points))
    return {
        "balanced": min(everything, key=lambda i: (points[i].cost, i)),
        "low_waste": _argmin(frontier_indices, lambda p: p.over_percent, points),
        "low_under": _argmin(frontier_indices, lambda p: p.under_fraction, points),
    }


def build_frontier(points) -> Frontier:
    front = non_dominated(points)
    return Frontier(list(points), front, select_named(points, front))


def write_manifest(frontier: Frontier, model_paths: dict, path) -> None:
    """Deployment manifest: each named point with its metrics and model file."""
    doc = {role: {**asdict(frontier.points[i]), "model_path": str(model_paths.get(role, ""))}
           for role, i in frontier.named.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
