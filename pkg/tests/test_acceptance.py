"""One test per acceptance criterion, each printing a single PASS/FAIL line."""

import math
import os
import time

import numpy as np
import pytest
from scipy.stats import binomtest

from helpers import manifest_from_groups
from oracles import auc_pair_count, central_difference, nearest_rank_oracle, pearson_two_pass
from privfilter.cli import main
from privfilter.dataset import build_split
from privfilter.encoder import TrainConfig, identity_encoder, init_encoder, pair_loss, train
from privfilter.evalharness import (
    auc_rank,
    build_filter,
    consensus,
    eval_consistency,
    eval_sensitivity,
    eval_specificity,
    eval_synthetic_duplicates,
)
from privfilter.filtercal import CalibrationResult, calibrate, flag_batch, nearest_rank
from privfilter.simcore import Pool, batch_score, pearson, scan
from privfilter.toy import gen_toy

STRATEGIES = ("overall", "same_patient_max", "same_patient_mean")


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return _report


def test_criterion_01_pearson_oracle(report):
    rng = np.random.default_rng(1)
    pairs = []
    for _ in range(10_000):
        n = int(rng.integers(2, 513))
        pairs.append((rng.standard_normal(n), rng.standard_normal(n)))
    t0 = time.perf_counter()
    got = [pearson(x, y) for x, y in pairs]
    elapsed = time.perf_counter() - t0
    worst = max(abs(g - pearson_two_pass(list(x), list(y))) for g, (x, y) in zip(got, pairs))
    props = True
    for x, y in pairs[:500]:
        a, b = float(rng.uniform(0.1, 10)), float(rng.uniform(-10, 10))
        r = pearson(x, y)
        props &= pearson(y, x) == r and -1.0 <= r <= 1.0
        props &= abs(pearson(a * x + b, y) - r) < 1e-9
    ok = worst < 1e-12 and elapsed < 10 and props
    report(1, ok, f"max |err|={worst:.2e} (<1e-12), {elapsed:.2f}s (<10s), "
                  f"symmetry/affine={props}")


def test_criterion_02_calibration_oracle(report):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(1000):
        v = int(rng.integers(1, 10_001))
        scores = rng.uniform(-1, 1, v)
        if rng.random() < 0.3:
            scores = np.round(scores, 2)  # force ties
        p = 95 if rng.random() < 0.5 else int(rng.integers(1, 101))
        if nearest_rank(np.sort(scores), p) != nearest_rank_oracle(scores.tolist(), p):
            mismatches += 1

    anchor = [("anchor", "P0", np.array([1.0, -1.0, 0.0, 0.0]))]
    e1 = np.array([1.0, -1.0, 0.0, 0.0]) / math.sqrt(2)
    e2 = np.array([0.0, 0.0, 1.0, -1.0]) / math.sqrt(2)
    val = np.stack([(i / 100) * e1 + math.sqrt(1 - (i / 100) ** 2) * e2
                    for i in range(1, 101)])
    cal = calibrate(anchor, val, 95)
    replay = sum(d.flagged for d in flag_batch(val, anchor, cal))
    ok = mismatches == 0 and abs(cal.tau - 0.95) < 1e-12 and replay == 5
    report(2, ok, f"{mismatches}/1000 oracle mismatches, V=100 tau={cal.tau!r}, "
                  f"self-replay flags={replay}")


def test_criterion_03_strict_boundary_monotone(report):
    rng = np.random.default_rng(3)
    boundary_flags = 0
    violations = 0
    for trial in range(100):
        d = int(rng.integers(3, 20))
        pool = [(f"t{i:03d}", f"P{i % 5}", rng.standard_normal(d))
                for i in range(int(rng.integers(1, 40)))]
        queries = rng.standard_normal((int(rng.integers(1, 50)), d))
        scores = [r.max_score for r in batch_score(queries, pool)]
        for s in scores:
            if flag_batch([queries[scores.index(s)]], pool,
                          CalibrationResult(s, 95.0, (s,), ""))[0].flagged:
                boundary_flags += 1
        taus = np.sort(np.concatenate([rng.uniform(-1, 1, 10), rng.choice(scores, 3)]))
        prev = None
        for tau in taus:
            cur = {d_.query_id for d_ in flag_batch(queries, pool,
                                                    CalibrationResult(float(tau), 95.0, (), ""))
                   if d_.flagged}
            if prev is not None and not cur <= prev:
                violations += 1
            prev = cur
    ok = boundary_flags == 0 and violations == 0
    report(3, ok, f"score==tau flagged {boundary_flags} times, "
                  f"monotonicity violations {violations} over 100 trials")


def test_criterion_04_gradient_check(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    checked = 0
    while checked < 200:
        d, h, k = (int(rng.integers(2, 7)), int(rng.integers(2, 6)), int(rng.integers(3, 6)))
        model = init_encoder((d, h, k), int(rng.integers(0, 2**32)))
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        label = "positive" if rng.random() < 0.5 else "negative"
        margin = float(rng.uniform(-0.5, 0.5))
        ea, eb = model.encode(a), model.encode(b)
        r = pearson(ea, eb)
        if label == "negative" and abs(r - margin) < 1e-3:
            continue  # finite differences straddle the hinge kink
        _, grads = pair_loss(model, (a, b, label), margin=margin)
        params = [p.copy() for p in model.params()]
        for pi, p in enumerate(params):
            for idx in np.ndindex(p.shape):
                def f(x, pi=pi, idx=idx):
                    q = [t.copy() for t in params]
                    q[pi][idx] = x
                    return pair_loss(model.with_params(q), (a, b, label), margin=margin)[0]
                fd = central_difference(f, p[idx])
                an = grads[pi][idx]
                worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-6))
        checked += 1
    report(4, worst < 1e-4, f"worst relative error {worst:.2e} (<1e-4) over 200 models/pairs")


def _leaky(noise, seed=5):
    m = gen_toy(4, 6, 32, cluster_sd=0.0, seed=seed, singletons=60,
                near_duplicates=30, duplicate_noise=noise, space="pixel")
    return m, build_split(m, seed=seed)


def test_criterion_05_leaky_generator(report):
    results = {}
    for space in ("pixel", "latent"):
        m, plan = _leaky(0.0)
        if space == "pixel":
            model = identity_encoder(32)
        else:
            model = train(m, plan, TrainConfig(epochs=10, seed=0, hidden=32, embedding=16))
        filt = build_filter(m, plan, model)
        for s in STRATEGIES:
            sens = eval_sensitivity(m, plan, model, filt.calib, s)
            dup = eval_synthetic_duplicates(m, plan, model, filt.calib, strategy=s)
            results[(space, s)] = (sens.flag_rate, len(dup.leak_list), dup.total)
    clean = all(rate == 1.0 and leaks == 0 and total > 0
                for rate, leaks, total in results.values())

    leak_noise = None
    for noise in (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0):
        m, plan = _leaky(noise)
        model = identity_encoder(32)
        filt = build_filter(m, plan, model)
        dup = eval_synthetic_duplicates(m, plan, model, filt.calib)
        if dup.leak_list:
            leak_noise = (noise, len(dup.leak_list), dup.total, filt.calib.tau)
            break
    ok = clean and leak_noise is not None
    detail = ", ".join(f"{sp}/{s}: rate={r:.2f} leaks={lk}"
                       for (sp, s), (r, lk, _) in results.items())
    report(5, ok, f"zero noise [{detail}]; first leak at noise/leaks/total/tau={leak_noise}")


def test_criterion_06_specificity(report):
    rng = np.random.default_rng(6)
    d = 16
    groups = [("ref_train", f"T{i}", rng.standard_normal(d)) for i in range(200)]
    groups += [("ref_validation", f"V{i}", rng.standard_normal(d)) for i in range(20_000)]
    groups += [("holdout_unseen_patient", f"U{i}", rng.standard_normal(d)) for i in range(2000)]
    m, plan = manifest_from_groups(groups, space="pixel")
    model = identity_encoder(d)
    filt = build_filter(m, plan, model, percentile=95.0)
    spec = eval_specificity(m, plan, model, filt.calib)
    ci = binomtest(spec.false_positive_count, spec.total).proportion_ci(0.99)
    in_ci = ci.low <= 0.05 <= ci.high

    # orthogonal noise: pool in coordinates 0..7, queries in 8..15, both centered
    def half(lo):
        v = np.zeros(d)
        v[lo:lo + 8] = rng.standard_normal(8)
        v[lo:lo + 8] -= v[lo:lo + 8].mean()
        return v
    pool_vecs = [half(0) for _ in range(50)]
    groups = [("ref_train", f"T{i}", v) for i, v in enumerate(pool_vecs)]
    groups += [("ref_validation", f"V{i}", v + 0.1 * half(0)) for i, v in enumerate(pool_vecs)]
    groups += [("holdout_unseen_patient", f"U{i}", half(8)) for i in range(500)]
    m2, plan2 = manifest_from_groups(groups, space="pixel")
    filt2 = build_filter(m2, plan2, model)
    ortho = eval_specificity(m2, plan2, model, filt2.calib)
    ok = in_ci and ortho.false_positive_count == 0 and filt2.calib.tau > 0
    report(6, ok, f"fp rate {spec.fp_rate:.4f}, 99% CI [{ci.low:.4f}, {ci.high:.4f}] "
                  f"contains 0.05: {in_ci}; orthogonal fp={ortho.false_positive_count}/500")


def test_criterion_07_consistency(report):
    m = gen_toy(5, 4, 16, cluster_sd=0.5, seed=7, singletons=20,
                near_duplicates=25, duplicate_noise=0.5)
    plan = build_split(m, seed=7)
    cfg = TrainConfig(epochs=5, seed=3, hidden=16, embedding=8)
    same = eval_consistency(m, plan, [cfg] * 4)
    unanimous = (same.unanimous == 25 and same.all_same_attribution == 25)

    # three scripted stub filters: each maps a query index to (flag, patient)
    stubs = [
        lambda i: ([1, 0, 1, 0, 1][i], ["A", "B", "C", "D", "E"][i]),
        lambda i: ([1, 0, 0, 0, 1][i], ["A", "C", "C", "D", "F"][i]),
        lambda i: ([1, 0, 1, 1, 0][i], ["A", "B", "B", "E", "G"][i]),
    ]
    flags = [[f(i)[0] for i in range(5)] for f in stubs]
    attrs = [[f(i)[1] for i in range(5)] for f in stubs]
    stub = consensus(flags, attrs)
    # hand count: votes 3,0,2,1,2 ; plurality sizes 3,2,2,2,1
    scripted = (list(stub.flag_histogram) == [1, 1, 2, 1]
                and list(stub.attribution_histogram) == [0, 1, 3, 1])

    rng = np.random.default_rng(7)
    dominance_failures = 0
    for trial in range(30):
        mm = gen_toy(int(rng.integers(4, 8)), int(rng.integers(2, 6)), 12,
                     cluster_sd=float(rng.uniform(0.1, 2.0)), seed=100 + trial, singletons=10)
        pp = build_split(mm, seed=trial)
        model = init_encoder((12, 8, 6), trial) if trial % 2 else identity_encoder(12)
        calib = CalibrationResult(float(rng.uniform(-0.5, 0.99)), 95.0, (), "")
        mx = eval_sensitivity(mm, pp, model, calib, "same_patient_max")
        mean = eval_sensitivity(mm, pp, model, calib, "same_patient_mean")
        if not ({x.query_id for x in mean.decisions if x.flagged}
                <= {x.query_id for x in mx.decisions if x.flagged}):
            dominance_failures += 1
    ok = unanimous and scripted and dominance_failures == 0
    report(7, ok, f"identical seeds unanimous={unanimous}, scripted histograms={scripted}, "
                  f"dominance failures {dominance_failures}/30")


def test_criterion_08_auc_oracle(report):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        labels[0], labels[1] = True, False
        scores = rng.standard_normal(n)
        if rng.random() < 0.5:
            scores = np.round(scores, 1)  # heavy ties
        worst = max(worst, abs(auc_rank(scores, labels) - auc_pair_count(scores, labels)))
    tied = auc_rank([0.42] * 9, [1, 0, 1, 0, 0, 1, 0, 0, 1])
    ok = worst < 1e-12 and tied == 0.5
    report(8, ok, f"max |err|={worst:.2e} (<1e-12) over 500 sets, all-tied AUC={tied}")


def test_criterion_09_determinism(report, tmp_path, monkeypatch):
    outputs = []
    for run in ("a", "b"):
        cwd = tmp_path / run
        cwd.mkdir()
        monkeypatch.chdir(cwd)
        assert main(["gen-toy", "--patients", "6", "--images-per-patient", "4", "--dim", "16",
                     "--singletons", "20", "--near-duplicates", "15",
                     "--duplicate-noise", "0.3", "--seed", "9", "--out", "toy.csv"]) == 0
        assert main(["pipeline", "--manifest", "toy.csv", "--outdir", "out", "--seed", "9",
                     "--n-filters", "3", "--epochs", "5", "--workers", "4"]) == 0
        outputs.append({p: (cwd / "out" / p).read_bytes()
                        for p in sorted(os.listdir(cwd / "out"))})
    files_equal = outputs[0] == outputs[1]

    rng = np.random.default_rng(9)
    pool = Pool.from_records([(f"t{i:04d}", f"P{i % 13}", rng.standard_normal(32))
                              for i in range(700)])
    q = rng.standard_normal((333, 32))
    runs = [scan(q, pool, workers=w, chunk_size=16) for w in (1, 4, 16)]
    workers_equal = all(np.array_equal(runs[0].best, r.best)
                        and np.array_equal(runs[0].argmax, r.argmax)
                        and np.array_equal(runs[0].total, r.total) for r in runs[1:])
    records_equal = (batch_score(q, pool, "mean", workers=1)
                     == batch_score(q, pool, "mean", workers=16))
    ok = files_equal and workers_equal and records_equal
    report(9, ok, f"{len(outputs[0])} report files byte-identical={files_equal}; "
                  f"workers 1/4/16 identical={workers_equal and records_equal}")


@pytest.mark.slow
def test_criterion_10_throughput(report):
    rng = np.random.default_rng(10)
    n, d = 10_000, 256
    pool = Pool([f"t{i:05d}" for i in range(n)], [f"P{i % 997}" for i in range(n)],
                rng.standard_normal((n, d)).astype(np.float32))
    queries = rng.standard_normal((n, d)).astype(np.float32)
    scan(queries[:8], pool, workers=1)  # compile

    t0 = time.perf_counter()
    single = scan(queries, pool, workers=1)
    t_single = time.perf_counter() - t0
    workers = 4
    t0 = time.perf_counter()
    par = scan(queries, pool, workers=workers)
    t_par = time.perf_counter() - t0
    identical = (np.array_equal(single.best, par.best)
                 and np.array_equal(single.argmax, par.argmax))
    speedup = t_single / t_par
    ok = t_single < 60 and speedup >= 2.0 and identical
    report(10, ok, f"single worker {t_single:.1f}s (<60s), {workers} workers {t_par:.1f}s, "
                   f"speedup {speedup:.2f}x (>=2x), bitwise identical={identical}, "
                   f"cpus available={os.cpu_count()}")
