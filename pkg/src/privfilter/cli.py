"""Batch command-line front end: ``privfilter <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._io import fmt_float, write_csv, write_json
from .dataset import (
    ROLES,
    ManifestError,
    SplitPlan,
    build_split,
    check_plan,
    load_manifest,
    records_with_role,
    select_pool,
    write_manifest,
)
from .encoder import EncoderModel, TrainConfig, identity_encoder, train
from .evalharness import (
    EvaluationError,
    build_filter,
    encoded_pool,
    eval_consistency,
    eval_pair_classification,
    eval_sensitivity,
    eval_specificity,
    eval_synthetic_duplicates,
    seed_configs,
    write_consensus,
    write_leak_list,
    write_pair_metrics,
    write_sensitivity,
    write_specificity,
    STRATEGIES,
)
from .filtercal import (
    CalibrationResult,
    flag_batch,
    read_decisions,
    write_decisions,
)
from .simcore import batch_score, naive_score
from .toy import gen_toy

log = logging.getLogger("privfilter")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INGEST = 3
EXIT_TRAIN = 4
EXIT_CALIBRATE = 5
EXIT_EVALUATE = 6
EXIT_AUDIT = 7

_STRATEGY_FLAGS = {"overall": "overall", "same-max": "same_patient_max",
                   "same-mean": "same_patient_mean"}
AUDIT_SCORE_TOL = 1e-9


class StageError(Exception):
    def __init__(self, stage: str, code: int, cause: Exception):
        super().__init__(f"{stage} failed: {cause}")
        self.stage = stage
        self.code = code


class _Stage:
    """Context manager that tags any failure inside it with a stage and exit code."""

    def __init__(self, name: str, code: int):
        self.name, self.code = name, code

    def __enter__(self):
        log.info("stage: %s", self.name)

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, self.code, exc) from exc
        return False


def _run_meta(outdir: Path, args) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k != "func"}
    write_json(outdir / "run_meta.json", {"version": __version__, "config": cfg})


def _train_config(args, seed=None) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, margin=args.margin,
                       negatives_per_positive=args.negatives,
                       seed=args.seed if seed is None else seed,
                       hidden=args.hidden, embedding=args.embedding)


def _load_inputs(args, need_model=True, need_calib=False):
    with _Stage("ingest", EXIT_INGEST):
        manifest = load_manifest(args.manifest)
        plan = SplitPlan.load(args.plan)
        check_plan(manifest, plan)
        model = EncoderModel.load(args.model) if need_model else None
        calib = CalibrationResult.load(args.calib) if need_calib else None
    return manifest, plan, model, calib


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_gen_toy(args) -> int:
    with _Stage("generate", EXIT_CONFIG):
        m = gen_toy(args.patients, args.images_per_patient, args.dim, args.cluster_sd,
                    args.seed, singletons=args.singletons,
                    near_duplicates=args.near_duplicates,
                    duplicate_noise=args.duplicate_noise, space=args.space)
    out = Path(args.out)
    write_manifest(m, out)
    _run_meta(out.parent, args)
    print(f"wrote {len(m)} records to {out.with_suffix('.csv')}")
    return EXIT_OK


def cmd_split(args) -> int:
    with _Stage("ingest", EXIT_INGEST):
        manifest = load_manifest(args.manifest)
    with _Stage("split", EXIT_CONFIG):
        plan = build_split(manifest, args.seed, args.unseen_fraction,
                           args.validation_fraction, args.max_sensitivity_patients)
    out = Path(args.out)
    plan.save(out)
    _run_meta(out.parent, args)
    return EXIT_OK


def _train_or_identity(manifest, plan, args) -> EncoderModel:
    if args.space == "pixel":
        return identity_encoder(manifest.dimension, "pixel")
    with _Stage("train", EXIT_TRAIN):
        model = train(manifest, plan, _train_config(args), space="latent")
    log.info("trained encoder seed=%d final loss %.6f", model.seed, model.final_loss or 0.0)
    return model


def cmd_train(args) -> int:
    manifest, plan, _, _ = _load_inputs(args, need_model=False)
    model = _train_or_identity(manifest, plan, args)
    out = Path(args.out)
    model.save(out)
    _run_meta(out.parent, args)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    manifest, plan, model, _ = _load_inputs(args)
    with _Stage("calibrate", EXIT_CALIBRATE):
        filt = build_filter(manifest, plan, model, args.percentile,
                            args.exclude_same_patient, args.workers)
    out = Path(args.out)
    filt.calib.save(out)
    _run_meta(out.parent, args)
    print(f"tau = {fmt_float(filt.calib.tau)}")
    return EXIT_OK


def _query_records(manifest, plan, role):
    recs = records_with_role(manifest, plan, role)
    if not recs:
        raise EvaluationError(f"no images with role {role}")
    return recs


def cmd_flag(args) -> int:
    manifest, plan, model, calib = _load_inputs(args, need_calib=True)
    with _Stage("evaluate", EXIT_EVALUATE):
        queries = _query_records(manifest, plan, args.queries)
        pool = encoded_pool(model, select_pool(manifest, plan, "combined"))
        decisions = flag_batch(model.encode(np.stack([r.vector for r in queries])), pool,
                               calib, args.aggregate,
                               query_ids=[r.image_id for r in queries], workers=args.workers)
    out = Path(args.out)
    write_decisions(out, decisions)
    if not decisions[0].pool_matches_calibration:
        log.warning("pool fingerprint differs from the calibration pool")
    _run_meta(out.parent, args)
    return EXIT_OK


def cmd_score(args) -> int:
    manifest, plan, model, _ = _load_inputs(args)
    with _Stage("evaluate", EXIT_EVALUATE):
        queries = _query_records(manifest, plan, args.queries)
        pool = encoded_pool(model, select_pool(manifest, plan, "combined"))
        results = batch_score(model.encode(np.stack([r.vector for r in queries])), pool,
                              args.aggregate, query_ids=[r.image_id for r in queries],
                              workers=args.workers)
    out = Path(args.out)
    write_csv(out, ["query_id", "max_score", "argmax_image_id", "argmax_patient_id",
                    "mean_score", "pool_size"],
              [[r.query_id, fmt_float(r.max_score), r.argmax_image_id, r.argmax_patient_id,
                fmt_float(r.mean_score_over_pool), r.pool_size] for r in results])
    _run_meta(out.parent, args)
    return EXIT_OK


def cmd_eval_sensitivity(args) -> int:
    manifest, plan, model, calib = _load_inputs(args, need_calib=True)
    outdir = Path(args.outdir)
    strategies = STRATEGIES if args.strategy == "all" else [_STRATEGY_FLAGS[args.strategy]]
    with _Stage("evaluate", EXIT_EVALUATE):
        reports = [eval_sensitivity(manifest, plan, model, calib, s, args.workers)
                   for s in strategies]
    for rep in reports:
        write_sensitivity(outdir, rep)
        print(f"{rep.strategy}: {rep.flagged_count}/{rep.total} flagged "
              f"({100 * rep.flag_rate:.1f}%)")
    _run_meta(outdir, args)
    return EXIT_OK


def cmd_eval_specificity(args) -> int:
    manifest, plan, model, calib = _load_inputs(args, need_calib=True)
    outdir = Path(args.outdir)
    with _Stage("evaluate", EXIT_EVALUATE):
        rep = eval_specificity(manifest, plan, model, calib, args.workers)
    write_specificity(outdir, rep)
    print(f"false positives: {rep.false_positive_count}/{rep.total} "
          f"({100 * rep.fp_rate:.1f}%)")
    _run_meta(outdir, args)
    return EXIT_OK


def cmd_eval_consistency(args) -> int:
    manifest, plan, _, _ = _load_inputs(args, need_model=False)
    outdir = Path(args.outdir)
    with _Stage("evaluate", EXIT_EVALUATE):
        queries = _query_records(manifest, plan, args.queries)
        rep = eval_consistency(manifest, plan, seed_configs(_train_config(args), args.n_filters),
                               queries, args.percentile, args.exclude_same_patient,
                               args.workers)
    write_consensus(outdir, rep)
    write_json(outdir / "consensus.json", rep.summary())
    print(f"unanimous: {rep.unanimous}/{len(rep.query_ids)} "
          f"({rep.all_safe} safe, {rep.all_flagged} flagged)")
    _run_meta(outdir, args)
    return EXIT_OK


def cmd_eval_pairs(args) -> int:
    manifest, plan, model, calib = _load_inputs(args, need_calib=args.calib is not None)
    threshold = args.threshold if args.threshold is not None else (
        calib.tau if calib is not None else 0.5)
    outdir = Path(args.outdir)
    with _Stage("evaluate", EXIT_EVALUATE):
        rep = eval_pair_classification(manifest, plan, model, threshold, seed=args.seed)
    write_pair_metrics(outdir, rep)
    print(f"AUC={rep.auc:.4f} precision={rep.precision:.4f} recall={rep.recall:.4f}")
    _run_meta(outdir, args)
    return EXIT_OK


def audit(decisions_path, manifest, plan, model, calib, tol: float = AUDIT_SCORE_TOL):
    """Recheck every decision against the naive per-pair scorer.

    Returns ``(ok, message)``; stops at the first mismatch.
    """
    rows = read_decisions(decisions_path)
    for row in rows:
        if row["tau"] != calib.tau:
            return False, f"{row['query_id']}: tau mismatch ({row['tau']!r} vs {calib.tau!r})"
    pool_recs = select_pool(manifest, plan, "combined")
    pool_emb = model.encode(np.stack([r.vector for r in pool_recs]))
    pool = [(r.image_id, r.patient_id, e) for r, e in zip(pool_recs, pool_emb)]
    for row in rows:
        qid = row["query_id"]
        try:
            idx = manifest.index_of(qid)
        except KeyError:
            return False, f"{qid}: not in manifest"
        q = model.encode(np.asarray(manifest.vectors[idx], dtype=np.float64))
        score, _, pid = naive_score(q, pool, row["aggregate"])
        if abs(score - row["score"]) > tol:
            return False, f"{qid}: score mismatch ({row['score']!r} vs recomputed {score!r})"
        if row["aggregate"] == "max" and pid != row["argmax_patient_id"]:
            return False, f"{qid}: attribution mismatch ({row['argmax_patient_id']} vs {pid})"
        expected = score > calib.tau
        if row["flagged"] != expected and abs(score - calib.tau) > tol:
            return False, f"{qid}: flag mismatch (file {row['flagged']}, recomputed {expected})"
    return True, f"{len(rows)} decisions verified"


def cmd_audit(args) -> int:
    manifest, plan, model, calib = _load_inputs(args, need_calib=True)
    ok, msg = audit(args.decisions, manifest, plan, model, calib)
    print(("ok: " if ok else "FAIL: ") + msg)
    return EXIT_OK if ok else EXIT_AUDIT


def cmd_pipeline(args) -> int:
    with _Stage("ingest", EXIT_INGEST):
        manifest = load_manifest(args.manifest)
    outdir = Path(args.outdir)
    with _Stage("split", EXIT_INGEST):
        plan = build_split(manifest, args.seed, args.unseen_fraction,
                           args.validation_fraction, args.max_sensitivity_patients)
    plan.save(outdir / "plan.csv")
    model = _train_or_identity(manifest, plan, args)
    model.save(outdir / "model.pve")
    with _Stage("calibrate", EXIT_CALIBRATE):
        filt = build_filter(manifest, plan, model, args.percentile,
                            args.exclude_same_patient, args.workers)
    calib = filt.calib
    calib.save(outdir / "calibration.json")

    summary: dict = {"space": args.space, "tau": calib.tau, "percentile": calib.percentile,
                     "calibration_images": len(calib.validation_scores)}
    with _Stage("evaluate", EXIT_EVALUATE):
        sens = [eval_sensitivity(manifest, plan, model, calib, s, args.workers)
                for s in STRATEGIES]
        spec = None
        if plan.ids_with_role("holdout_unseen_patient"):
            spec = eval_specificity(manifest, plan, model, calib, args.workers)
        dups = {s: eval_synthetic_duplicates(manifest, plan, model, calib, args.workers, s)
                for s in STRATEGIES}
        dup = dups["overall"]
        pairs = eval_pair_classification(manifest, plan, model, calib.tau, seed=args.seed)
        cons = None
        queries = records_with_role(manifest, plan, "synthetic") or \
            records_with_role(manifest, plan, "holdout_unseen_patient")
        if args.n_filters >= 2 and queries:
            configs = seed_configs(_train_config(args), args.n_filters)
            cons = eval_consistency(manifest, plan, configs, queries, args.percentile,
                                    args.exclude_same_patient, args.workers)

    for rep in sens:
        write_sensitivity(outdir, rep)
    summary["sensitivity"] = {r.strategy: r.summary() for r in sens}
    if spec is not None:
        write_specificity(outdir, spec)
        summary["specificity"] = spec.summary()
    if dup.total:
        write_decisions(outdir / "decisions.csv", dup.decisions)
        write_leak_list(outdir, dup)
        summary["synthetic_duplicates"] = {s: r.summary() for s, r in dups.items()}
    write_pair_metrics(outdir, pairs)
    summary["pair_classification"] = vars(pairs)
    if cons is not None:
        write_consensus(outdir, cons)
        summary["consistency"] = cons.summary()
    write_json(outdir / "summary.json", summary)
    _run_meta(outdir, args)

    for rep in sens:
        print(f"sensitivity {rep.strategy}: {100 * rep.flag_rate:.1f}%")
    if spec is not None:
        print(f"specificity false-positive rate: {100 * spec.fp_rate:.1f}%")
    if dup.total:
        print(f"near-duplicates: {dup.matched_count}/{dup.total} matched, "
              f"{dup.matched_unflagged} leaked")

    if args.audit and dup.total:
        ok, msg = audit(outdir / "decisions.csv", manifest, plan, model, calib)
        print(("audit ok: " if ok else "audit FAIL: ") + msg)
        if not ok:
            return EXIT_AUDIT
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing
# --------------------------------------------------------------------------


def _add_train_args(p) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--margin", type=float, default=d.margin)
    p.add_argument("--negatives", type=int, default=d.negatives_per_positive,
                   help="negative pairs per positive pair")
    p.add_argument("--hidden", type=int, default=d.hidden)
    p.add_argument("--embedding", type=int, default=d.embedding)


def _add_inputs(p, model=True, calib=False) -> None:
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--plan", type=Path, required=True)
    if model:
        p.add_argument("--model", type=Path, required=True)
    if calib:
        p.add_argument("--calib", type=Path, required=True)


def _add_split_args(p) -> None:
    p.add_argument("--unseen-fraction", type=float, default=0.2)
    p.add_argument("--validation-fraction", type=float, default=0.1)
    p.add_argument("--max-sensitivity-patients", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="privfilter", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate a Gaussian-cluster toy dataset")
    p.add_argument("--patients", type=int, default=20)
    p.add_argument("--images-per-patient", type=int, default=6)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--cluster-sd", type=float, default=0.3)
    p.add_argument("--singletons", type=int, default=50,
                   help="extra single-image patients (calibration candidates)")
    p.add_argument("--near-duplicates", type=int, default=0)
    p.add_argument("--duplicate-noise", type=float, default=0.0)
    p.add_argument("--space", choices=["pixel", "latent"], default="latent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="manifest csv path")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("split", help="assign roles to every image")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_split_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the contrastive encoder")
    _add_inputs(p, model=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--space", choices=["pixel", "latent"], default="latent",
                   help="pixel writes an identity encoder")
    _add_train_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="calibrate the flagging threshold")
    _add_inputs(p)
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--exclude-same-patient", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_calibrate)

    for name, func, help_ in (("flag", cmd_flag, "flag query images"),
                              ("score", cmd_score, "raw pool scores for query images")):
        p = sub.add_parser(name, help=help_)
        _add_inputs(p, calib=name == "flag")
        p.add_argument("--queries", choices=ROLES, default="synthetic")
        p.add_argument("--aggregate", choices=["max", "mean"], default="max")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", type=Path, required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("eval-sensitivity")
    _add_inputs(p, calib=True)
    p.add_argument("--strategy", choices=[*_STRATEGY_FLAGS, "all"], default="all")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--outdir", type=Path, required=True)
    p.set_defaults(func=cmd_eval_sensitivity)

    p = sub.add_parser("eval-specificity")
    _add_inputs(p, calib=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--outdir", type=Path, required=True)
    p.set_defaults(func=cmd_eval_specificity)

    p = sub.add_parser("eval-consistency")
    _add_inputs(p, model=False)
    p.add_argument("--n-filters", type=int, default=10)
    p.add_argument("--seed", type=int, default=0, help="first of n consecutive seeds")
    p.add_argument("--queries", choices=ROLES, default="synthetic")
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--exclude-same-patient", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    _add_train_args(p)
    p.add_argument("--outdir", type=Path, required=True)
    p.set_defaults(func=cmd_eval_consistency)

    p = sub.add_parser("eval-pairs")
    _add_inputs(p)
    p.add_argument("--calib", type=Path, default=None)
    p.add_argument("--threshold", type=float, default=None,
                   help="decision threshold (default: calibrated tau, else 0.5)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", type=Path, required=True)
    p.set_defaults(func=cmd_eval_pairs)

    p = sub.add_parser("pipeline", help="split, train, calibrate and evaluate end to end")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--space", choices=["pixel", "latent"], default="latent")
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--exclude-same-patient", action="store_true")
    p.add_argument("--n-filters", type=int, default=10)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--audit", action="store_true",
                   help="recheck near-duplicate decisions with the naive scorer")
    _add_split_args(p)
    _add_train_args(p)
    p.add_argument("--outdir", type=Path, required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("audit", help="recheck a decisions file with the naive scorer")
    p.add_argument("--decisions", type=Path, required=True)
    _add_inputs(p, calib=True)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ManifestError, FileNotFoundError) as exc:
        print(f"error: ingest failed: {exc}", file=sys.stderr)
        return EXIT_INGEST


if __name__ == "__main__":
    sys.exit(main())
