"""Two-member quantile ensemble and its on-disk model file."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from functools import cached_property
from datetime import datetime, timezone

import numpy as np

from buildmem.errors import ConsistencyError, CorruptModelError, ModelVersionError
from buildmem.features import DEFAULT_SCHEMA, EncoderState, FeatureMatrix, FeatureSchema
from buildmem.gbdt import QuantileModel, TrainConfig, fit

FORMAT_VERSION = 1
SAFETY_BOUNDS = (1.0, 1.15)
DEFAULT_FLOOR_MIB = 1.0


def combine(pred_a, pred_b, safety_factor: float, floor: float = DEFAULT_FLOOR_MIB):
    """Per-row maximum of the member predictions times the safety factor."""
    return np.maximum(np.maximum(pred_a, pred_b) * safety_factor, floor)


def _check_safety(s: float) -> None:
    lo, hi = SAFETY_BOUNDS
    if not lo - 1e-9 <= s <= hi + 1e-9:
        raise ValueError(f"safety_factor={s} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class EnsembleModel:
    member_a: QuantileModel
    member_b: QuantileModel
    alpha: float
    safety_factor: float
    feature_schema: FeatureSchema = DEFAULT_SCHEMA
    encoder_state: EncoderState | None = None
    created_at: str = ""
    train_data_digest: str = ""
    floor_mib: float = DEFAULT_FLOOR_MIB
    configs: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_safety(self.safety_factor)
        for m in (self.member_a, self.member_b):
            if m.alpha != self.alpha:
                raise ValueError("both members must be trained at the ensemble alpha")
        if (self.member_a.feature_schema_hash != self.member_b.feature_schema_hash
                or self.member_a.column_names != self.member_b.column_names):
            raise ValueError("members were trained on different feature schemas")

    @property
    def column_names(self) -> list[str]:
        return self.member_a.column_names

    @property
    def feature_schema_hash(self) -> str:
        return self.member_a.feature_schema_hash

    @cached_property
    def model_id(self) -> str:
        return _checksum(_canonical(self.to_dict()))[:16]

    def with_safety_factor(self, s: float) -> "EnsembleModel":
        return replace(self, safety_factor=float(s))

    def member_predictions(self, rows):
        return self.member_a.predict(rows), self.member_b.predict(rows)

    def predict(self, rows):
        if isinstance(rows, FeatureMatrix):
            if rows.schema_hash and rows.schema_hash != self.feature_schema_hash:
                raise ConsistencyError("feature matrix schema does not match the model")
            rows = rows.rows
        a, b = self.member_predictions(rows)
        return combine(a, b, self.safety_factor, self.floor_mib)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "safety_factor": self.safety_factor,
            "floor_mib": self.floor_mib,
            "created_at": self.created_at,
            "train_data_digest": self.train_data_digest,
            "feature_schema": self.feature_schema.to_dict(),
            "encoder_state": (self.encoder_state.to_dict()
                              if self.encoder_state is not None else None),
            "configs": self.configs,
            "member_a": self.member_a.to_dict(),
            "member_b": self.member_b.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "EnsembleModel":
        return cls(
            member_a=QuantileModel.from_dict(d["member_a"]),
            member_b=QuantileModel.from_dict(d["member_b"]),
            alpha=d["alpha"],
            safety_factor=d["safety_factor"],
            feature_schema=FeatureSchema.from_dict(d["feature_schema"]),
            encoder_state=(EncoderState.from_dict(d["encoder_state"])
                           if d.get("encoder_state") else None),
            created_at=d["created_at"],
            train_data_digest=d["train_data_digest"],
            floor_mib=d["floor_mib"],
            configs=d.get("configs", {}),
        )


def predict_allocation(model: EnsembleModel, rows):
    """Memory allocation in MiB for one feature vector or a batch."""
    return model.predict(rows)


def train_ensemble(train: FeatureMatrix, cfg_a: TrainConfig, cfg_b: TrainConfig,
                   safety_factor: float, *, feature_schema: FeatureSchema = DEFAULT_SCHEMA,
                   encoder_state: EncoderState | None = None,
                   floor_mib: float = DEFAULT_FLOOR_MIB) -> EnsembleModel:
    """Fit both members on the same matrix and wrap them as an allocator."""
    if cfg_a.alpha != cfg_b.alpha:
        raise ValueError(f"member alphas differ: {cfg_a.alpha} vs {cfg_b.alpha}")
    _check_safety(safety_factor)
    return EnsembleModel(
        member_a=fit(train, cfg_a),
        member_b=fit(train, cfg_b),
        alpha=cfg_a.alpha,
        safety_factor=float(safety_factor),
        feature_schema=feature_schema,
        encoder_state=encoder_state,
        created_at=datetime.now(timezone.utc).isoformat(),
        train_data_digest=train.digest(),
        floor_mib=floor_mib,
        configs={"member_a": cfg_a.to_dict(), "member_b": cfg_b.to_dict()},
    )


def _canonical(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _checksum(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save(model: EnsembleModel, path) -> None:
    payload = model.to_dict()
    doc = {
        "format_version": FORMAT_VERSION,
        "checksum": _checksum(_canonical(payload)),
        "payload": payload,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
    os.replace(tmp, path)


def load(path) -> EnsembleModel:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptModelError(f"{path}: not a valid model file ({exc})") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptModelError(f"{path}: missing format_version")
    if doc["format_version"] != FORMAT_VERSION:
        raise ModelVersionError(
            f"{path}: unsupported format_version {doc['format_version']!r}")
    payload = doc.get("payload")
    if payload is None or doc.get("checksum") != _checksum(_canonical(payload)):
        raise CorruptModelError(f"{path}: checksum mismatch")
    try:
        return EnsembleModel.from_dict(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptModelError(f"{path}: malformed payload ({exc})") from exc
