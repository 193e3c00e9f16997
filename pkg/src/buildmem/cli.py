"""Command-line entry points.

Every command accepts ``--config`` pointing to an INI file. Values given as
flags win over the config file, which wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from buildmem import data, ensemble, features, metrics, pareto, tuner
from buildmem.gbdt import TrainConfig

logger = logging.getLogger("buildmem")

DEFAULT_HOLDOUT = 0.2


class Settings:
    """Flag > config > default lookup."""

    def __init__(self, args, path=None):
        self.args = args
        self.cfg = configparser.ConfigParser()
        self.cfg.optionxform = str
        if path:
            with open(path, encoding="utf-8") as fh:
                self.cfg.read_file(fh)
            self.base = Path(path).parent
        else:
            self.base = Path(".")

    def get(self, flag, section, key, default=None, cast=str):
        v = getattr(self.args, flag, None)
        if v is not None:
            return v
        if self.cfg.has_option(section, key):
            return cast(self.cfg.get(section, key))
        return default

    def path(self, flag, section, key, default=None):
        v = getattr(self.args, flag, None)
        if v is not None:
            return v
        if self.cfg.has_option(section, key):
            return str(self.base / self.cfg.get(section, key))
        return default

    def member_config(self, member: str, **overrides) -> TrainConfig:
        section = f"member_{member}"
        kwargs = {}
        for f in fields(TrainConfig):
            if self.cfg.has_option(section, f.name):
                raw = self.cfg.get(section, f.name)
                kwargs[f.name] = int(raw) if f.type in ("int", int) else float(raw)
        if self.cfg.has_option("ensemble", "alpha"):
            kwargs["alpha"] = self.cfg.getfloat("ensemble", "alpha")
        kwargs.setdefault("seed", 0 if member == "a" else 1)
        kwargs.update(overrides)
        return TrainConfig(**kwargs)


def _load_dataset(s: Settings):
    path = s.path("data", "data", "path")
    if not path:
        raise ValueError("no dataset given (--data or [data] path)")
    mapping_path = s.path("mapping", "data", "mapping")
    mapping = data.load_mapping(mapping_path) if mapping_path else {}
    if s.cfg.has_section("columns"):
        mapping = dict(s.cfg.items("columns")) | mapping
    return data.load_csv(path, mapping)


def _matrices(s: Settings):
    ds = _load_dataset(s)
    frac = s.get("holdout_fraction", "data", "holdout_fraction", DEFAULT_HOLDOUT, float)
    train, holdout, state = features.prepare_matrices(ds, frac)
    return ds, train, holdout, state, frac


def _member_configs(s: Settings):
    """Member configs and safety factor, from tuned params if given, else config."""
    params_path = s.path("params", "train", "params")
    if params_path:
        with open(params_path) as fh:
            params = json.load(fh)["params"]
        seed = s.get("seed", "train", "seed", 0, int)
        return tuner.params_to_configs(params, seed)
    alpha = s.get("alpha", "ensemble", "alpha", None, float)
    extra = {"alpha": alpha} if alpha is not None else {}
    safety = s.get("safety_factor", "ensemble", "safety_factor", 1.05, float)
    return s.member_config("a", **extra), s.member_config("b", **extra), safety


def _emit(obj, out=None):
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_ingest(args):
    s = Settings(args, args.config)
    ds = _load_dataset(s)
    summary = ds.summary()
    _emit(summary, args.out)
    return summary


def cmd_train(args):
    s = Settings(args, args.config)
    _, train, _, state, _ = _matrices(s)
    cfg_a, cfg_b, safety = _member_configs(s)
    model = ensemble.train_ensemble(train, cfg_a, cfg_b, safety, encoder_state=state)
    out = s.path("out", "train", "out", "model.json")
    ensemble.save(model, out)
    _emit({"model": str(out), "model_id": model.model_id, "rows": len(train),
           "alpha": model.alpha, "safety_factor": model.safety_factor})
    return model


def cmd_tune(args):
    s = Settings(args, args.config)
    _, train, _, _, _ = _matrices(s)
    n_trials = s.get("trials", "tune", "trials", 50, int)
    seed = s.get("seed", "tune", "seed", 0, int)
    jobs = s.get("jobs", "tune", "jobs", 1, int)
    log_path = s.path("out", "tune", "log", "trials.csv")
    space = tuner.ensemble_search_space()
    best, history = tuner.run_search(train, space, n_trials, seed,
                                     log_path=log_path, jobs=jobs)
    best_doc = {"trial_id": best.trial_id, "params": best.params, "cost": best.cost,
                "under_fraction": best.under_fraction, "over_ratio": best.over_ratio}
    best_path = s.path("best", "tune", "best", f"{log_path}.best.json")
    _emit(best_doc, best_path)
    return best, history


def cmd_evaluate(args):
    s = Settings(args, args.config)
    model = ensemble.load(args.model)
    ds = _load_dataset(s)
    frac = s.get("holdout_fraction", "data", "holdout_fraction", DEFAULT_HOLDOUT, float)
    train_ds, holdout_ds = data.temporal_split(ds, frac)
    full = features.transform(ds, model.encoder_state, model.feature_schema)
    holdout = full.take(np.arange(len(train_ds), len(ds)))

    start = time.perf_counter()
    preds = model.predict(holdout)
    per_row = (time.perf_counter() - start) / max(1, len(holdout))
    report = metrics.evaluate(preds, holdout.target, mean_inference_seconds=per_row)
    baseline = metrics.baseline_report(holdout_ds)
    doc = {"model_id": model.model_id, "holdout_rows": len(holdout),
           "model": report.to_dict(), "baseline": baseline.to_dict()}
    if args.histogram_csv:
        Path(args.histogram_csv).write_text(_side_by_side(report, baseline))
    _emit(doc, args.out)
    return doc


def _side_by_side(report, baseline) -> str:
    lines = ["source,bin_label,count,fraction"]
    for name, r in (("model", report), ("baseline", baseline)):
        for row in r.histogram_csv().splitlines()[1:]:
            lines.append(f"{name},{row}")
    return "\n".join(lines) + "\n"


def cmd_pareto(args):
    s = Settings(args, args.config)
    _, train, holdout, state, _ = _matrices(s)
    cfg_a, cfg_b, _ = _member_configs(s)
    a_step = s.get("alpha_step", "pareto", "alpha_step", 0.01, float)
    s_step = s.get("s_step", "pareto", "s_step", 0.01, float)
    alphas = pareto.grid(*pareto.ALPHA_BOUNDS, a_step)
    safeties = pareto.grid(*ensemble.SAFETY_BOUNDS, s_step)
    out_dir = Path(s.path("out_dir", "pareto", "out_dir", "pareto_out"))
    out_dir.mkdir(parents=True, exist_ok=True)

    models = {}
    points = pareto.sweep(train, holdout, (cfg_a, cfg_b), alphas, safeties,
                          on_model=lambda a, m: models.__setitem__(a, m))
    front = pareto.build_frontier(points)
    front.write_csv(out_dir / "frontier.csv")
    paths = {}
    for role, i in front.named.items():
        p = front.points[i]
        model = replace(models[p.alpha], encoder_state=state).with_safety_factor(p.safety_factor)
        paths[role] = out_dir / f"model_{role}.json"
        ensemble.save(model, paths[role])
    pareto.write_manifest(front, paths, out_dir / "manifest.json")
    summary = {role: {"alpha": front.points[i].alpha,
                      "safety_factor": front.points[i].safety_factor,
                      "under_percent": 100 * front.points[i].under_fraction,
                      "over_percent": front.points[i].over_percent}
               for role, i in front.named.items()}
    _emit(summary)
    return front


def cmd_predict(args):
    model = ensemble.load(args.model)
    if args.features:
        with open(args.input, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in model.column_names if c not in (reader.fieldnames or [])]
            if missing:
                raise ValueError(f"input lacks feature columns: {missing[:5]}")
            rows = np.array([[float(r[c]) for c in model.column_names] for r in reader])
        ids = list(range(len(rows)))
    else:
        mapping = data.load_mapping(args.mapping) if args.mapping else {}
        ds = data.load_csv(args.input, mapping)
        fm = features.transform(ds, model.encoder_state, model.feature_schema)
        rows, ids = fm.rows, fm.row_ids.tolist()
    preds = model.predict(rows) if len(rows) else np.array([])
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row_id", "allocation_mib"])
        for i, p in zip(ids, preds):
            w.writerow([i, repr(float(p))])
    logger.info("wrote %d predictions to %s", len(preds), args.output)
    return preds


def cmd_serve(args):
    from buildmem.service import serve

    serve(ensemble.load(args.model), args.bind)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="buildmem", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--config")
        sp.add_argument("--data", help="build-job CSV")
        sp.add_argument("--mapping", help="INI file with a [columns] section")
        sp.add_argument("--holdout-fraction", dest="holdout_fraction", type=float)

    sp = sub.add_parser("ingest", help="load and validate a dataset")
    data_args(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="train and save an ensemble")
    data_args(sp)
    sp.add_argument("--params", help="best-trial JSON written by tune")
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--safety-factor", dest="safety_factor", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("tune", help="hyperparameter search")
    data_args(sp)
    sp.add_argument("--trials", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--out", help="trials log (CSV)")
    sp.add_argument("--best", help="where to write the best trial (JSON)")
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("evaluate", help="score a model and the baseline on the hold-out")
    data_args(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out")
    sp.add_argument("--histogram-csv", dest="histogram_csv")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("pareto", help="sweep (alpha, s) and export the frontier")
    data_args(sp)
    sp.add_argument("--params", help="best-trial JSON written by tune")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--alpha-step", dest="alpha_step", type=float)
    sp.add_argument("--s-step", dest="s_step", type=float)
    sp.add_argument("--out-dir", dest="out_dir")
    sp.set_defaults(func=cmd_pareto)

    sp = sub.add_parser("predict", help="batch predictions to CSV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--mapping")
    sp.add_argument("--features", action="store_true",
                    help="input holds precomputed feature columns")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("serve", help="run the HTTP prediction service")
    sp.add_argument("--model", required=True)
    sp.add_argument("--bind", default="127.0.0.1:8080")
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError) as exc:
        logger.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
