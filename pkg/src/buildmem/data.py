"""Loading, validation and splitting of build-job telemetry.

All memory quantities are held in MiB internally. The source CSV reports
``max_rss`` in bytes and ``memreq`` in (SI) megabytes; both are converted at
ingestion time so nothing downstream has to care about source units.
"""
from __future__ import annotations

import configparser
import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from statistics import NormalDist
from typing import Callable, Mapping, Sequence

import numpy as np

from buildmem.errors import DataQualityError, SchemaError

logger = logging.getLogger(__name__)

MIB = 2**20
MANDATORY_COLUMNS = (
    "time",
    "build_profile",
    "make_type",
    "jobs",
    "branch_id",
    "memory_fail_count",
    "max_rss",
    "memreq",
)
MAX_REJECTED_FRACTION = 0.5


def bytes_to_mib(n_bytes: float) -> float:
    return n_bytes / MIB


def mib_to_bytes(mib: float) -> float:
    return mib * MIB


def mb_to_mib(mb: float) -> float:
    # MB here means 10**6 bytes.
    return mb * 1e6 / MIB


def mib_to_mb(mib: float) -> float:
    return mib * MIB / 1e6


def parse_time(value) -> float:
    """Parse an epoch number or an ISO 8601 string into UTC epoch seconds."""
    if isinstance(value, (int, float)):
        t = float(value)
    else:
        text = str(value).strip()
        if not text:
            raise ValueError("empty timestamp")
        try:
            t = float(text)
        except ValueError:
            if text.endswith(("Z", "z")):
                text = text[:-1] + "+00:00"
            dt = datetime.fromisoformat(text)
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            t = dt.timestamp()
    if not math.isfinite(t):
        raise ValueError(f"non-finite timestamp {value!r}")
    return t


@dataclass(frozen=True)
class BuildRecord:
    time: float
    build_profile: str
    make_type: str
    jobs: int
    branch_id: str
    memory_fail_count: int
    max_rss: float
    memreq: float
    extras: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.max_rss > 0:
            raise ValueError(f"max_rss must be positive, got {self.max_rss}")
        if not self.memreq > 0:
            raise ValueError(f"memreq must be positive, got {self.memreq}")
        if self.memory_fail_count < 0:
            raise ValueError("memory_fail_count must be non-negative")
        if self.jobs < 0:
            raise ValueError("jobs must be non-negative")


@dataclass(frozen=True)
class Dataset:
    records: tuple[BuildRecord, ...]
    source_path: str = ""
    column_mapping: Mapping[str, str] = field(default_factory=dict)
    n_rejected: int = 0

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    def subset(self, start: int, stop: int) -> "Dataset":
        return Dataset(
            self.records[start:stop], self.source_path, self.column_mapping, 0
        )

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def summary(self) -> dict:
        """Ingestion summary: row counts and covered time range."""
        out = {
            "source_path": self.source_path,
            "rows_loaded": len(self.records),
            "rows_rejected": self.n_rejected,
            "time_start": None,
            "time_end": None,
        }
        if self.records:
            for key, t in (("time_start", self.records[0].time),
                           ("time_end", self.records[-1].time)):
                out[key] = datetime.fromtimestamp(t, tz=timezone.utc).isoformat()
        return out


def load_mapping(path) -> dict[str, str]:
    """Read a column mapping from an INI-style file.

    The mapping lives in a ``[columns]`` section; each key is a canonical
    column name and each value the header used in the source CSV.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    if not parser.has_section("columns"):
        raise SchemaError(f"{path}: no [columns] section in mapping file")
    return dict(parser.items("columns"))


def _parse_row(row: Mapping[str, str], mapping: Mapping[str, str],
               extra_cols: Sequence[str]) -> BuildRecord:
    get = lambda name: row[mapping[name]]  # noqa: E731
    try:
        fails = int(float(get("memory_fail_count")))
        if fails < 0:
            raise ValueError
    except (TypeError, ValueError):
        logger.warning("unparseable memory_fail_count %r, using 0",
                       get("memory_fail_count"))
        fails = 0
    jobs_f = float(get("jobs"))
    if not jobs_f.is_integer():
        raise ValueError(f"jobs is not an integer: {get('jobs')!r}")
    return BuildRecord(
        time=parse_time(get("time")),
        build_profile=(get("build_profile") or "").strip(),
        make_type=(get("make_type") or "").strip(),
        jobs=int(jobs_f),
        branch_id=(get("branch_id") or "").strip(),
        memory_fail_count=fails,
        max_rss=bytes_to_mib(float(get("max_rss"))),
        memreq=mb_to_mib(float(get("memreq"))),
        extras={c: row[c] for c in extra_cols},
    )


def load_csv(path, mapping: Mapping[str, str] | None = None) -> Dataset:
    """Load a build-job CSV into a time-sorted :class:`Dataset`.

    ``mapping`` maps canonical names to source headers; canonical names that
    are absent from it are looked up under their own name. Rows with an
    unparseable mandatory field are dropped and counted in ``n_rejected``.
    """
    mapping = {c: c for c in MANDATORY_COLUMNS} | dict(mapping or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise SchemaError(f"{path}: missing header row")
        for name in MANDATORY_COLUMNS:
            if mapping[name] not in header:
                raise SchemaError(
                    f"{path}: missing mandatory column {name!r} "
                    f"(source header {mapping[name]!r})", column=name)
        used = {mapping[c] for c in MANDATORY_COLUMNS}
        extra_cols = [h for h in header if h not in used]

        records, n_rejected, n_total = [], 0, 0
        for row in reader:
            n_total += 1
            try:
                records.append(_parse_row(row, mapping, extra_cols))
            except (TypeError, ValueError, KeyError) as exc:
                n_rejected += 1
                logger.debug("rejecting row %d: %s", n_total, exc)

    if n_total and n_rejected / n_total > MAX_REJECTED_FRACTION:
        raise DataQualityError(
            f"{path}: {n_rejected} of {n_total} rows rejected")
    if n_rejected:
        logger.warning("%s: rejected %d of %d rows", path, n_rejected, n_total)
    # stable sort keeps file order among equal timestamps
    records.sort(key=lambda r: r.time)
    return Dataset(tuple(records), str(path), dict(mapping), n_rejected)


def temporal_split(ds: Dataset, holdout_fraction: float) -> tuple[Dataset, Dataset]:
    """Split off the chronologically last ``ceil(fraction * n)`` rows."""
    if not 0 < holdout_fraction < 1:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    n = len(ds)
    n_hold = math.ceil(holdout_fraction * n)
    cut = n - n_hold
    return ds.subset(0, cut), ds.subset(cut, n)


# --- synthetic data -------------------------------------------------------

SYNTH_ARCHS = {"linuxx86_64": 0.0, "linuxaarch64": -0.15, "ntamd64": 0.35}
SYNTH_COMPILERS = {"gcc9": 0.0, "gcc11": 0.1, "clang15": -0.2}
SYNTH_OPT = {"opt": 0.25, "dbg": -0.1}
SYNTH_MAKE_TYPES = {"full": 0.6, "incremental": -0.4, "test": 0.0}
SYNTH_BASE_MIB = 512.0
SYNTH_JOBS_COEF = 0.05


@dataclass(frozen=True)
class SyntheticSpec:
    n_rows: int
    seed: int = 0
    noise_sigma: float = 0.5

    def __post_init__(self):
        if self.n_rows < 1:
            raise ValueError("n_rows must be >= 1")
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")


def synthetic_log_mean(record: BuildRecord) -> float:
    """Deterministic log-space location of a synthetic record's peak memory."""
    parts = record.build_profile.split("-")
    parts += [""] * (3 - len(parts))
    return (math.log(SYNTH_BASE_MIB)
            + SYNTH_JOBS_COEF * record.jobs
            + SYNTH_ARCHS.get(parts[0], 0.0)
            + SYNTH_COMPILERS.get(parts[1], 0.0)
            + SYNTH_OPT.get(parts[2], 0.0)
            + SYNTH_MAKE_TYPES.get(record.make_type, 0.0))


def lognormal_quantile(log_mean: float, sigma: float, alpha: float) -> float:
    return math.exp(log_mean + NormalDist().inv_cdf(alpha) * sigma)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Dataset, Callable[[BuildRecord, float], float]]:
    """Generate build records with a known conditional quantile function.

    ``max_rss`` is lognormal: ``log(max_rss) = mu(record) + sigma * N(0, 1)``,
    so its conditional alpha-quantile is ``exp(mu + z_alpha * sigma)``.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_rows
    archs, comps = list(SYNTH_ARCHS), list(SYNTH_COMPILERS)
    opts, makes = list(SYNTH_OPT), list(SYNTH_MAKE_TYPES)

    start = datetime(2024, 1, 1, tzinfo=timezone.utc).timestamp()
    times = start + np.cumsum(rng.exponential(600.0, size=n))
    arch_i = rng.integers(0, len(archs), size=n)
    comp_i = rng.integers(0, len(comps), size=n)
    opt_i = rng.integers(0, len(opts), size=n)
    make_i = rng.integers(0, len(makes), size=n)
    jobs = rng.integers(1, 33, size=n)
    # heavy-tailed branch popularity
    branch = np.minimum(rng.zipf(1.6, size=n), 400)
    eps = rng.standard_normal(size=n)
    req_jitter = rng.lognormal(1.0, 0.4, size=n)
    spurious_fail = rng.random(size=n) < 0.01
    fail_counts = rng.integers(1, 6, size=n)

    records = []
    for i in range(n):
        rec = BuildRecord(
            time=float(times[i]),
            build_profile=f"{archs[arch_i[i]]}-{comps[comp_i[i]]}-{opts[opt_i[i]]}",
            make_type=makes[make_i[i]],
            jobs=int(jobs[i]),
            branch_id=f"br{int(branch[i])}",
            memory_fail_count=0,
            max_rss=1.0,
            memreq=1.0,
        )
        mu = synthetic_log_mean(rec)
        max_rss = math.exp(mu + spec.noise_sigma * eps[i])
        memreq = math.ceil(math.exp(mu) * req_jitter[i] / 256.0) * 256.0
        under = max_rss > memreq or spurious_fail[i]
        records.append(BuildRecord(
            time=rec.time,
            build_profile=rec.build_profile,
            make_type=rec.make_type,
            jobs=rec.jobs,
            branch_id=rec.branch_id,
            memory_fail_count=int(fail_counts[i]) if under else 0,
            max_rss=max_rss,
            memreq=memreq,
        ))

    sigma = spec.noise_sigma

    def true_quantile(record: BuildRecord, alpha: float) -> float:
        return lognormal_quantile(synthetic_log_mean(record), sigma, alpha)

    return Dataset(tuple(records), f"synthetic:seed={spec.seed}"), true_quantile


def write_csv(ds: Dataset, path) -> None:
    """Write a dataset back out in source units (bytes / MB)."""
    extra_cols = list(ds.records[0].extras) if ds.records else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(MANDATORY_COLUMNS) + extra_cols)
        for r in ds.records:
            w.writerow([
                datetime.fromtimestamp(r.time, tz=timezone.utc).isoformat(),
                r.build_profile, r.make_type, r.jobs, r.branch_id,
                r.memory_fail_count, repr(mib_to_bytes(r.max_rss)),
                repr(mib_to_mb(r.memreq)),
            ] + [r.extras.get(c, "") for c in extra_cols])
