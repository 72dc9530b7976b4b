"""Sensitivity, specificity and seed-consistency evaluation of privacy filters.

A *filter* is an encoder plus a threshold calibrated on that encoder's
embeddings. Every evaluation encodes its queries and reference pool with the
filter's encoder and compares them through ``filtercal.flag_batch``.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from ._io import fmt_float, write_csv, write_json
from .dataset import (
    DatasetManifest,
    ImageRecord,
    SplitPlan,
    records_with_role,
    select_pool,
)
from .encoder import EncoderModel, TrainConfig, TrainingError, encode, train
from .filtercal import CalibrationResult, FlagDecision, calibrate, flag_batch
from .simcore import Pool, pearson, UndefinedCorrelation

log = logging.getLogger(__name__)

STRATEGIES = ("overall", "same_patient_max", "same_patient_mean")

# Flag rates (%) observed on chest X-rays at full scale, as (pixel, latent).
# Reported alongside desk-scale results for orientation only.
REFERENCE_FLAG_RATES = {
    "overall": (88.5, 75.8),
    "same_patient_max": (59.8, 8.7),
    "same_patient_mean": (24.2, 0.9),
    "specificity_false_positive": (84.3, 76.8),
}


class EvaluationError(RuntimeError):
    pass


@dataclass
class PrivacyFilter:
    model: EncoderModel
    calib: CalibrationResult
    pool: Pool  # encoded combined training pool


def _encode_records(model: EncoderModel, records: Sequence[ImageRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, model.dims[2]))
    return encode(model, np.stack([np.asarray(r.vector, dtype=np.float64) for r in records]))


def encoded_pool(model: EncoderModel, records: Sequence[ImageRecord]) -> Pool:
    if not records:
        raise EvaluationError("empty reference pool")
    return Pool([r.image_id for r in records], [r.patient_id for r in records],
                _encode_records(model, records))


def build_filter(
    manifest: DatasetManifest,
    plan: SplitPlan,
    model: EncoderModel,
    percentile: float = 95.0,
    exclude_same_patient: bool = False,
    workers: int | None = None,
) -> PrivacyFilter:
    """Calibrate ``model`` on the combined training pool and the validation images."""
    pool = encoded_pool(model, select_pool(manifest, plan, "combined"))
    val = records_with_role(manifest, plan, "ref_validation")
    if not val:
        raise EvaluationError("split plan has no ref_validation images to calibrate on")
    calib = calibrate(pool, _encode_records(model, val), percentile,
                      validation_ids=[r.image_id for r in val],
                      validation_patient_ids=[r.patient_id for r in val],
                      exclude_same_patient=exclude_same_patient, workers=workers)
    return PrivacyFilter(model, calib, pool)


# --------------------------------------------------------------------------
# Sensitivity
# --------------------------------------------------------------------------


@dataclass
class SensitivityReport:
    strategy: str
    flagged_count: int
    total: int
    flag_rate: float
    decisions: list[FlagDecision] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("decisions")
        return d


def eval_sensitivity(
    manifest: DatasetManifest,
    plan: SplitPlan,
    model: EncoderModel,
    calib: CalibrationResult,
    strategy: str = "overall",
    workers: int | None = None,
) -> SensitivityReport:
    """Flag rate over ``holdout_seen_patient`` images under one pool strategy."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    held = records_with_role(manifest, plan, "holdout_seen_patient")
    if not held:
        raise EvaluationError("split plan has no holdout_seen_patient images")
    if strategy == "overall":
        pool = encoded_pool(model, select_pool(manifest, plan, "combined"))
        decisions = flag_batch(_encode_records(model, held), pool, calib, "max",
                               query_ids=[r.image_id for r in held], workers=workers)
    else:
        aggregate = "max" if strategy == "same_patient_max" else "mean"
        by_patient: dict[str, list[ImageRecord]] = {}
        for r in held:
            by_patient.setdefault(r.patient_id, []).append(r)
        found = {}
        for pid in sorted(by_patient):
            same = select_pool(manifest, plan, "same_patient", pid)
            assert same, f"sensitivity patient {pid} has no ref_train image"
            queries = by_patient[pid]
            for d in flag_batch(_encode_records(model, queries), encoded_pool(model, same),
                                calib, aggregate, query_ids=[r.image_id for r in queries],
                                workers=workers):
                found[d.query_id] = d
        decisions = [found[r.image_id] for r in held]
    flagged = sum(d.flagged for d in decisions)
    return SensitivityReport(strategy, flagged, len(decisions), flagged / len(decisions),
                             decisions)


# --------------------------------------------------------------------------
# Synthetic near-duplicates
# --------------------------------------------------------------------------


@dataclass
class DuplicateReport:
    total: int
    matched_count: int
    matched_flagged: int
    matched_unflagged: int
    leak_list: list[str]
    decisions: list[FlagDecision] = field(default_factory=list, repr=False)
    sources: list[str] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        return {
            "total": self.total,
            "matched_count": self.matched_count,
            "matched_flagged": self.matched_flagged,
            "matched_unflagged": self.matched_unflagged,
            "leak_count": len(self.leak_list),
        }


def eval_synthetic_duplicates(
    manifest: DatasetManifest,
    plan: SplitPlan,
    model: EncoderModel,
    calib: CalibrationResult,
    workers: int | None = None,
    strategy: str = "overall",
) -> DuplicateReport:
    """Attribute and flag each synthetic record.

    Under ``overall`` the pool is the combined training pool and a record is
    *matched* when its attributed patient is its source patient. Under the
    same-patient strategies the pool is the source patient's training images,
    so every record with such images is matched by construction. Matched but
    unflagged records form the leak list.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    syn = records_with_role(manifest, plan, "synthetic")
    for r in syn:
        if not r.source_patient_id:
            raise EvaluationError(f"synthetic record {r.image_id} has no source_patient_id")
    if not syn:
        return DuplicateReport(0, 0, 0, 0, [])
    if strategy == "overall":
        pool = encoded_pool(model, select_pool(manifest, plan, "combined"))
        decisions = flag_batch(_encode_records(model, syn), pool, calib, "max",
                               query_ids=[r.image_id for r in syn], workers=workers)
        matched = [d.argmax_patient_id == r.source_patient_id for d, r in zip(decisions, syn)]
    else:
        aggregate = "max" if strategy == "same_patient_max" else "mean"
        kept, decisions = [], []
        for r in syn:
            try:
                same = select_pool(manifest, plan, "same_patient", r.source_patient_id)
            except KeyError:
                same = []
            if not same:
                continue  # source has no training image, nothing to match against
            kept.append(r)
            decisions += flag_batch(_encode_records(model, [r]), encoded_pool(model, same),
                                    calib, aggregate, query_ids=[r.image_id],
                                    workers=workers)
        syn = kept
        matched = [True] * len(syn)
    leaks = [d.query_id for d, m in zip(decisions, matched) if m and not d.flagged]
    n_matched = sum(matched)
    return DuplicateReport(
        total=len(syn),
        matched_count=n_matched,
        matched_flagged=n_matched - len(leaks),
        matched_unflagged=len(leaks),
        leak_list=leaks,
        decisions=decisions,
        sources=[r.source_patient_id for r in syn],
    )


# --------------------------------------------------------------------------
# Specificity
# --------------------------------------------------------------------------


@dataclass
class SpecificityReport:
    false_positive_count: int
    total: int
    fp_rate: float
    decisions: list[FlagDecision] = field(default_factory=list, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("decisions")
        return d


def eval_specificity(
    manifest: DatasetManifest,
    plan: SplitPlan,
    model: EncoderModel,
    calib: CalibrationResult,
    workers: int | None = None,
) -> SpecificityReport:
    """False-positive rate of unseen-patient images against the combined pool."""
    unseen = records_with_role(manifest, plan, "holdout_unseen_patient")
    if not unseen:
        raise EvaluationError("split plan has no holdout_unseen_patient images")
    pool = encoded_pool(model, select_pool(manifest, plan, "combined"))
    decisions = flag_batch(_encode_records(model, unseen), pool, calib, "max",
                           query_ids=[r.image_id for r in unseen], workers=workers)
    fp = sum(d.flagged for d in decisions)
    return SpecificityReport(fp, len(decisions), fp / len(decisions), decisions)


# --------------------------------------------------------------------------
# Consistency
# --------------------------------------------------------------------------


@dataclass
class ConsensusReport:
    n_filters: int
    query_ids: list[str]
    flag_votes: np.ndarray  # (Q,) number of filters flagging each image
    attribution_agreement: np.ndarray  # (Q,) size of the largest same-patient subset
    flag_histogram: np.ndarray  # index v -> images flagged by exactly v filters
    attribution_histogram: np.ndarray  # index a -> images whose plurality is a (index 0 unused)
    all_flagged: int
    all_safe: int
    all_same_attribution: int
    taus: list[float] = field(default_factory=list)

    @property
    def unanimous(self) -> int:
        return self.all_flagged + self.all_safe

    def summary(self) -> dict:
        q = len(self.query_ids)
        return {
            "n_filters": self.n_filters,
            "images": q,
            "all_flagged": self.all_flagged,
            "all_safe": self.all_safe,
            "unanimous_fraction": self.unanimous / q if q else 0.0,
            "all_same_attribution": self.all_same_attribution,
            "no_two_agree_on_attribution": int(self.attribution_histogram[1]) if q else 0,
            "flag_histogram": [int(c) for c in self.flag_histogram],
            "attribution_histogram": [int(c) for c in self.attribution_histogram[1:]],
            "taus": list(self.taus),
            "threshold_mode": "per_seed",
        }


def consensus(flags, attributions, query_ids: Sequence[str] | None = None,
              taus: Sequence[float] = ()) -> ConsensusReport:
    """Agreement statistics over an (N, Q) flag matrix and (N, Q) attributed patients."""
    flags = np.asarray(flags, dtype=bool)
    if flags.ndim != 2:
        raise ValueError("flags must be an (N, Q) matrix")
    n, q = flags.shape
    if n < 1 or len(attributions) != n or any(len(a) != q for a in attributions):
        raise ValueError("attributions must be an (N, Q) table matching flags")
    votes = flags.sum(axis=0).astype(np.int64)
    agreement = np.array(
        [max(Counter(attributions[f][i] for f in range(n)).values()) for i in range(q)],
        dtype=np.int64,
    )
    flag_hist = np.bincount(votes, minlength=n + 1)
    attr_hist = np.bincount(agreement, minlength=n + 1)
    return ConsensusReport(
        n_filters=n,
        query_ids=list(query_ids) if query_ids is not None else [str(i) for i in range(q)],
        flag_votes=votes,
        attribution_agreement=agreement,
        flag_histogram=flag_hist,
        attribution_histogram=attr_hist,
        all_flagged=int((votes == n).sum()),
        all_safe=int((votes == 0).sum()),
        all_same_attribution=int((agreement == n).sum()),
        taus=list(taus),
    )


def eval_consistency(
    manifest: DatasetManifest,
    plan: SplitPlan,
    configs: Sequence[TrainConfig],
    queries: Sequence[ImageRecord] | None = None,
    percentile: float = 95.0,
    exclude_same_patient: bool = False,
    workers: int | None = None,
) -> ConsensusReport:
    """Train one filter per config (own encoder, own threshold) and measure agreement.

    ``queries`` defaults to the plan's synthetic records.
    """
    if len(configs) < 2:
        raise ValueError("consistency needs at least 2 filters")
    if queries is None:
        queries = records_with_role(manifest, plan, "synthetic")
    if not queries:
        raise EvaluationError("no queries to evaluate consistency on")
    flags, attributions, taus = [], [], []
    for i, cfg in enumerate(configs):
        try:
            model = train(manifest, plan, cfg)
        except TrainingError as exc:
            raise EvaluationError(f"filter {i} (seed {cfg.seed}) failed to train: {exc}") from exc
        filt = build_filter(manifest, plan, model, percentile, exclude_same_patient, workers)
        decisions = flag_batch(_encode_records(model, queries), filt.pool, filt.calib, "max",
                               query_ids=[r.image_id for r in queries], workers=workers)
        flags.append([d.flagged for d in decisions])
        attributions.append([d.argmax_patient_id for d in decisions])
        taus.append(filt.calib.tau)
        log.info("filter %d (seed %d): tau=%.6f flagged=%d/%d", i, cfg.seed,
                 filt.calib.tau, sum(flags[-1]), len(queries))
    return consensus(flags, attributions, [r.image_id for r in queries], taus)


def seed_configs(base: TrainConfig, n: int, first_seed: int | None = None) -> list[TrainConfig]:
    start = base.seed if first_seed is None else first_seed
    return [replace(base, seed=start + i) for i in range(n)]


# --------------------------------------------------------------------------
# Pair classification
# --------------------------------------------------------------------------


def auc_rank(scores, labels) -> float:
    """ROC AUC via the Mann-Whitney U statistic with midranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class PairClassificationReport:
    auc: float
    precision: float
    recall: float
    threshold_used: float
    positives: int
    negatives: int


def precision_recall(scores, labels, threshold: float) -> tuple[float, float]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    pred = scores > threshold
    tp = int((pred & labels).sum())
    precision = tp / int(pred.sum()) if pred.any() else 0.0
    recall = tp / int(labels.sum()) if labels.any() else 0.0
    return precision, recall


def heldout_pairs(manifest: DatasetManifest, plan: SplitPlan, max_negatives: int = 20000,
                  seed: int = 0) -> tuple[list[tuple[int, int]], list[bool]]:
    """Same-patient (positive) and cross-patient (negative) pairs among held-out images.

    Held-out images are ``holdout_seen_patient`` and ``holdout_unseen_patient``.
    All positive pairs are kept; negatives are subsampled to ``max_negatives``.
    """
    held = [i for i, iid in enumerate(manifest.image_ids)
            if plan.roles[iid] in ("holdout_seen_patient", "holdout_unseen_patient")]
    pos, neg = [], []
    for x in range(len(held)):
        for y in range(x + 1, len(held)):
            i, j = held[x], held[y]
            (pos if manifest.patient_ids[i] == manifest.patient_ids[j] else neg).append((i, j))
    if len(neg) > max_negatives:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(neg), size=max_negatives, replace=False))
        neg = [neg[k] for k in keep]
    return pos + neg, [True] * len(pos) + [False] * len(neg)


def eval_pair_classification(
    manifest: DatasetManifest,
    plan: SplitPlan,
    model: EncoderModel,
    threshold: float,
    max_negatives: int = 20000,
    seed: int = 0,
) -> PairClassificationReport:
    """AUC, precision and recall of embedding correlation as a same-patient classifier."""
    pairs, labels = heldout_pairs(manifest, plan, max_negatives, seed)
    if not any(labels) or all(labels):
        raise EvaluationError("held-out pairs need both same-patient and cross-patient pairs")
    emb = encode(model, np.asarray(manifest.vectors, dtype=np.float64))
    scores, kept = [], []
    for (i, j), lab in zip(pairs, labels):
        try:
            scores.append(pearson(emb[i], emb[j]))
            kept.append(lab)
        except UndefinedCorrelation:
            continue
    p, r = precision_recall(scores, kept, threshold)
    return PairClassificationReport(
        auc=auc_rank(scores, kept),
        precision=p,
        recall=r,
        threshold_used=float(threshold),
        positives=sum(kept),
        negatives=len(kept) - sum(kept),
    )


# --------------------------------------------------------------------------
# Report files
# --------------------------------------------------------------------------


def _reference(key: str) -> list[str]:
    pixel, latent = REFERENCE_FLAG_RATES[key]
    return [f"{pixel}", f"{latent}"]


def write_sensitivity(outdir, report: SensitivityReport) -> None:
    write_csv(outdir / f"sensitivity_{report.strategy}.csv",
              ["strategy", "flagged_count", "total", "flag_rate",
               "reference_pixel_pct", "reference_latent_pct"],
              [[report.strategy, report.flagged_count, report.total,
                fmt_float(report.flag_rate), *_reference(report.strategy)]])


def write_specificity(outdir, report: SpecificityReport) -> None:
    write_csv(outdir / "specificity.csv",
              ["false_positive_count", "total", "fp_rate",
               "reference_pixel_pct", "reference_latent_pct"],
              [[report.false_positive_count, report.total, fmt_float(report.fp_rate),
                *_reference("specificity_false_positive")]])


def write_consensus(outdir, report: ConsensusReport) -> None:
    write_csv(outdir / "consensus_flags.csv", ["flag_votes", "images"],
              [[v, int(c)] for v, c in enumerate(report.flag_histogram)])
    write_csv(outdir / "consensus_attribution.csv", ["agreeing_filters", "images"],
              [[a, int(report.attribution_histogram[a])]
               for a in range(1, report.n_filters + 1)])
    write_csv(outdir / "consensus_per_image.csv",
              ["query_id", "flag_votes", "attribution_agreement"],
              [[q, int(v), int(a)] for q, v, a in zip(report.query_ids, report.flag_votes,
                                                      report.attribution_agreement)])


def write_pair_metrics(outdir, report: PairClassificationReport) -> None:
    write_json(outdir / "pair_metrics.json", asdict(report))


def write_leak_list(outdir, report: DuplicateReport) -> None:
    rows = []
    leaks = set(report.leak_list)
    for d, src in zip(report.decisions, report.sources):
        if d.query_id in leaks:
            rows.append([d.query_id, src, d.argmax_image_id or "", fmt_float(d.score),
                         fmt_float(d.tau_used)])
    write_csv(outdir / "leak_list.csv",
              ["image_id", "source_patient_id", "argmax_image_id", "score", "tau"], rows)
