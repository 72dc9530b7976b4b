"""Threshold calibration and flag decisions.

The threshold is the nearest-rank percentile of the validation images' closest
(max) correlations to the training pool. A query is flagged when its aggregate
score is strictly greater than the threshold.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import fmt_float, write_csv, write_json
from .simcore import AGGREGATES, Pool, UndefinedScoreError, batch_score

DECISION_HEADER = ["query_id", "aggregate", "score", "argmax_patient_id", "tau", "flagged"]


def nearest_rank(sorted_scores: Sequence[float], percentile: float) -> float:
    """Value at 1-based rank ceil(p/100 * V) of ascending ``sorted_scores``."""
    v = len(sorted_scores)
    if v == 0:
        raise ValueError("no scores to take a percentile of")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    # exact rational arithmetic so 95% of 20 is rank 19, not 19.000000000000004 -> 20
    rank = math.ceil(Fraction(str(percentile)) * v / 100)
    return float(sorted_scores[min(max(rank, 1), v) - 1])


def pool_fingerprint(image_ids) -> str:
    h = hashlib.sha256()
    for iid in sorted(image_ids):
        h.update(iid.encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass(frozen=True)
class CalibrationResult:
    tau: float
    percentile: float
    validation_scores: tuple[float, ...]
    pool_fingerprint: str
    exclude_same_patient: bool = False

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "percentile": self.percentile,
            "pool_fingerprint": self.pool_fingerprint,
            "exclude_same_patient": self.exclude_same_patient,
            "validation_scores": list(self.validation_scores),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CalibrationResult":
        scores = tuple(float(s) for s in obj["validation_scores"])
        if list(scores) != sorted(scores):
            raise ValueError("validation_scores must be sorted ascending")
        return cls(tau=float(obj["tau"]), percentile=float(obj["percentile"]),
                   validation_scores=scores, pool_fingerprint=obj["pool_fingerprint"],
                   exclude_same_patient=bool(obj.get("exclude_same_patient", False)))

    def save(self, path) -> None:
        write_json(path, self.to_json())

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def calibrate(
    train_pool,
    validation_vectors,
    percentile: float = 95.0,
    validation_ids: Sequence[str] | None = None,
    validation_patient_ids: Sequence[str] | None = None,
    exclude_same_patient: bool = False,
    workers: int | None = None,
) -> CalibrationResult:
    """Calibrate tau from each validation image's max correlation to ``train_pool``.

    With ``exclude_same_patient`` a validation image is not compared against
    training images of its own patient (needs ``validation_patient_ids``).
    """
    if not isinstance(train_pool, Pool):
        train_pool = Pool.from_records(train_pool)
    validation_vectors = np.asarray(validation_vectors, dtype=np.float64)
    if len(validation_vectors) == 0:
        raise ValueError("empty validation set")
    if exclude_same_patient and validation_patient_ids is None:
        raise ValueError("exclude_same_patient needs validation_patient_ids")
    results = batch_score(validation_vectors, train_pool, "max", query_ids=validation_ids,
                          query_patient_ids=validation_patient_ids,
                          exclude_same_patient=exclude_same_patient, workers=workers)
    scores = tuple(sorted(r.max_score for r in results))
    return CalibrationResult(
        tau=nearest_rank(scores, percentile),
        percentile=float(percentile),
        validation_scores=scores,
        pool_fingerprint=pool_fingerprint(train_pool.image_ids),
        exclude_same_patient=exclude_same_patient,
    )


@dataclass(frozen=True)
class FlagDecision:
    query_id: str
    max_score: float
    argmax_patient_id: str | None
    flagged: bool
    aggregate_used: str
    tau_used: float
    score: float
    argmax_image_id: str | None = None
    pool_matches_calibration: bool = field(default=True, compare=False)

    def csv_row(self) -> list[str]:
        return [self.query_id, self.aggregate_used, fmt_float(self.score),
                self.argmax_patient_id or "", fmt_float(self.tau_used),
                "1" if self.flagged else "0"]


def flag_batch(
    queries,
    train_pool,
    calib: CalibrationResult,
    aggregate: str = "max",
    query_ids: Sequence[str] | None = None,
    workers: int | None = None,
    chunk_size: int = 256,
) -> list[FlagDecision]:
    """Flag every query whose aggregate score exceeds ``calib.tau``."""
    if aggregate not in AGGREGATES:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    if not isinstance(train_pool, Pool):
        train_pool = Pool.from_records(train_pool)
    matches = pool_fingerprint(train_pool.image_ids) == calib.pool_fingerprint
    results = batch_score(queries, train_pool, aggregate, query_ids=query_ids,
                          workers=workers, chunk_size=chunk_size)
    return [
        FlagDecision(
            query_id=r.query_id,
            max_score=r.max_score,
            argmax_patient_id=r.argmax_patient_id,
            flagged=r.score > calib.tau,
            aggregate_used=aggregate,
            tau_used=calib.tau,
            score=r.score,
            argmax_image_id=r.argmax_image_id,
            pool_matches_calibration=matches,
        )
        for r in results
    ]


def flag(query, train_pool, calib: CalibrationResult, aggregate: str = "max",
         query_id: str = "q") -> FlagDecision:
    query = np.asarray(query, dtype=np.float64)
    try:
        return flag_batch(query[None, :], train_pool, calib, aggregate,
                          query_ids=[query_id], workers=1)[0]
    except UndefinedScoreError as exc:
        raise UndefinedScoreError(f"{query_id}: undefined aggregate score") from exc


def write_decisions(path, decisions: Sequence[FlagDecision]) -> None:
    write_csv(path, DECISION_HEADER, [d.csv_row() for d in decisions])


def read_decisions(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != DECISION_HEADER:
            raise ValueError(f"{path}: bad decision header {reader.fieldnames}")
        return [
            {
                "query_id": row["query_id"],
                "aggregate": row["aggregate"],
                "score": float(row["score"]),
                "argmax_patient_id": row["argmax_patient_id"] or None,
                "tau": float(row["tau"]),
                "flagged": row["flagged"] == "1",
            }
            for row in reader
        ]
