"""Exact Pearson-correlation search with max/mean aggregation.

Pool vectors are z-scored once (centered, unit norm) so each correlation is a
dot product. The scan kernel reduces each (query, pool) pair in a fixed index
order and visits pool members in a fixed order, so results are bitwise
independent of how queries are chunked or how many threads run the chunks.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numba
import numpy as np

AGGREGATES = ("max", "mean")
SCORE_EPS = 1e-9
_POOL_BLOCK = 256
_QUERY_TILE = 4


class UndefinedCorrelation(ArithmeticError):
    """Pearson correlation is undefined because one input has zero variance."""


class UndefinedScoreError(ValueError):
    """Every correlation between a query and its pool is undefined."""

    def __init__(self, message: str, query_index: int | None = None):
        super().__init__(message)
        self.query_index = query_index


def pearson(x, y) -> float:
    """Sample Pearson correlation of two equal-length vectors, clamped to [-1, 1].

    Raises UndefinedCorrelation if either input is constant.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("pearson needs at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("zero variance input")
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(np.dot(xc, yc)) / math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


@numba.njit(nogil=True, cache=True)
def _zscore_rows(x, out, defined):
    nrow, n = x.shape
    for i in range(nrow):
        first = x[i, 0]
        varies = False
        s = 0.0
        for k in range(n):
            v = np.float64(x[i, k])
            s += v
            if v != first:
                varies = True
        mean = s / n
        ss = 0.0
        for k in range(n):
            c = np.float64(x[i, k]) - mean
            out[i, k] = c
            ss += c * c
        defined[i] = varies and ss > 0.0
        if defined[i]:
            norm = math.sqrt(ss)
            for k in range(n):
                out[i, k] = out[i, k] / norm
        else:
            for k in range(n):
                out[i, k] = 0.0


@numba.njit(nogil=True, cache=True)
def _accept(lane, nq, i, j, s, qdef, qpat, ppat, exclude, best, arg, total, count):
    if lane >= nq or not qdef[i]:
        return
    if exclude and qpat[i] >= 0 and qpat[i] == ppat[j]:
        return
    if s > 1.0:
        s = 1.0
    elif s < -1.0:
        s = -1.0
    total[i] += s
    count[i] += 1
    if s > best[i]:
        best[i] = s
        arg[i] = j


@numba.njit(nogil=True, cache=True)
def _scan(qz, qdef, qpat, pz, pdef, ppat, exclude, best, arg, total, count):
    nq, n = qz.shape
    npool = pz.shape[0]
    for i in range(nq):
        best[i] = -np.inf
        arg[i] = -1
        total[i] = 0.0
        count[i] = 0
    if nq == 0:
        return
    for pb in range(0, npool, _POOL_BLOCK):
        pe = min(pb + _POOL_BLOCK, npool)
        for qt in range(0, nq, _QUERY_TILE):
            i0 = qt
            i1 = min(qt + 1, nq - 1)
            i2 = min(qt + 2, nq - 1)
            i3 = min(qt + 3, nq - 1)
            for j in range(pb, pe):
                if not pdef[j]:
                    continue
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                s3 = 0.0
                for k in range(n):
                    p = pz[j, k]
                    s0 += qz[i0, k] * p
                    s1 += qz[i1, k] * p
                    s2 += qz[i2, k] * p
                    s3 += qz[i3, k] * p
                _accept(qt, nq, i0, j, s0, qdef, qpat, ppat, exclude, best, arg, total, count)
                _accept(qt + 1, nq, i1, j, s1, qdef, qpat, ppat, exclude, best, arg, total, count)
                _accept(qt + 2, nq, i2, j, s2, qdef, qpat, ppat, exclude, best, arg, total, count)
                _accept(qt + 3, nq, i3, j, s3, qdef, qpat, ppat, exclude, best, arg, total, count)


def zscore_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (z, defined): centered unit-norm rows and a per-row variance mask."""
    x = np.ascontiguousarray(x)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {x.shape}")
    z = np.empty(x.shape, dtype=np.float64)
    defined = np.empty(x.shape[0], dtype=np.bool_)
    if x.shape[0]:
        _zscore_rows(x, z, defined)
    return z, defined


class Pool:
    """Immutable reference pool, sorted by image_id and stored z-scored."""

    def __init__(self, image_ids: Sequence[str], patient_ids: Sequence[str], vectors):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or not vectors.shape[0] == len(image_ids) == len(patient_ids):
            raise ValueError("pool ids and vectors disagree in length")
        if len(image_ids) == 0:
            raise ValueError("empty pool")
        if vectors.shape[1] < 2:
            raise ValueError("pool vectors need dimension >= 2")
        order = sorted(range(len(image_ids)), key=lambda i: image_ids[i])
        self.image_ids = [image_ids[i] for i in order]
        self.patient_ids = [patient_ids[i] for i in order]
        self.z, self.defined = zscore_rows(vectors[order])
        self.z.flags.writeable = False
        self.defined.flags.writeable = False
        self._patient_codes = {p: c for c, p in enumerate(sorted(set(self.patient_ids)))}
        self.patient_codes = np.array([self._patient_codes[p] for p in self.patient_ids],
                                      dtype=np.int64)

    @classmethod
    def from_records(cls, records: Iterable, encode=None) -> "Pool":
        """Build from ImageRecords or ``(image_id, patient_id, vector)`` tuples."""
        ids, pids, vecs = [], [], []
        for r in records:
            if isinstance(r, tuple):
                iid, pid, v = r
            else:
                iid, pid, v = r.image_id, r.patient_id, r.vector
            ids.append(iid)
            pids.append(pid)
            vecs.append(v)
        if not ids:
            raise ValueError("empty pool")
        mat = np.asarray(np.stack(vecs), dtype=np.float64)
        if encode is not None:
            mat = encode(mat)
        return cls(ids, pids, mat)

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def dimension(self) -> int:
        return self.z.shape[1]

    def patient_code(self, patient_id: str | None) -> int:
        if patient_id is None:
            return -1
        return self._patient_codes.get(patient_id, -1)


@dataclass(frozen=True)
class ScoreResult:
    query_id: str
    max_score: float
    argmax_image_id: str | None
    argmax_patient_id: str | None
    mean_score_over_pool: float
    pool_size: int
    defined_count: int
    aggregate: str = "max"

    @property
    def score(self) -> float:
        return self.max_score if self.aggregate == "max" else self.mean_score_over_pool


@dataclass
class ScanResult:
    """Raw per-query arrays from a pool scan; ``count == 0`` marks undefined."""

    best: np.ndarray
    argmax: np.ndarray
    total: np.ndarray
    count: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.total / np.maximum(self.count, 1), np.nan)


def scan(
    queries,
    pool: Pool,
    query_patient_ids: Sequence[str | None] | None = None,
    exclude_same_patient: bool = False,
    workers: int | None = None,
    chunk_size: int = 256,
) -> ScanResult:
    """Score every query against ``pool``; chunks run on a thread pool."""
    q = np.asarray(queries)
    if q.ndim == 1 and q.size == 0:
        q = q.reshape(0, pool.dimension)
    if q.ndim != 2:
        raise ValueError(f"queries must be 2-d, got shape {q.shape}")
    nq = q.shape[0]
    if nq and q.shape[1] != pool.dimension:
        raise ValueError(
            f"dimension mismatch: queries have {q.shape[1]}, pool has {pool.dimension}"
        )
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    workers = workers or os.cpu_count() or 1
    if query_patient_ids is None:
        qpat = np.full(nq, -1, dtype=np.int64)
    else:
        qpat = np.array([pool.patient_code(p) for p in query_patient_ids], dtype=np.int64)

    best = np.empty(nq, dtype=np.float64)
    argmax = np.empty(nq, dtype=np.int64)
    total = np.empty(nq, dtype=np.float64)
    count = np.empty(nq, dtype=np.int64)

    def run(lo: int) -> None:
        hi = min(lo + chunk_size, nq)
        qz, qdef = zscore_rows(q[lo:hi])
        _scan(qz, qdef, qpat[lo:hi], pool.z, pool.defined, pool.patient_codes,
              exclude_same_patient, best[lo:hi], argmax[lo:hi], total[lo:hi], count[lo:hi])

    starts = range(0, nq, chunk_size)
    if workers == 1 or nq <= chunk_size:
        for lo in starts:
            run(lo)
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(run, starts))
    return ScanResult(best, argmax, total, count)


def batch_score(
    queries,
    pool,
    aggregate: str = "max",
    query_ids: Sequence[str] | None = None,
    query_patient_ids: Sequence[str | None] | None = None,
    exclude_same_patient: bool = False,
    workers: int | None = None,
    chunk_size: int = 256,
) -> list[ScoreResult]:
    """Score queries in order; identical to mapping score_against_pool over them."""
    if aggregate not in AGGREGATES:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    if not isinstance(pool, Pool):
        pool = Pool.from_records(pool)
    q = np.asarray(queries, dtype=np.float64) if len(queries) else np.zeros((0, pool.dimension))
    if query_ids is None:
        query_ids = [str(i) for i in range(len(q))]
    res = scan(q, pool, query_patient_ids, exclude_same_patient, workers, chunk_size)
    mean = res.mean
    out = []
    for i, qid in enumerate(query_ids):
        if res.count[i] == 0:
            raise UndefinedScoreError(
                f"query {i} ({qid}): every correlation with the pool is undefined",
                query_index=i,
            )
        j = int(res.argmax[i])
        out.append(ScoreResult(
            query_id=qid,
            max_score=float(res.best[i]),
            argmax_image_id=pool.image_ids[j],
            argmax_patient_id=pool.patient_ids[j],
            mean_score_over_pool=float(mean[i]),
            pool_size=len(pool),
            defined_count=int(res.count[i]),
            aggregate=aggregate,
        ))
    return out


def score_against_pool(query, pool, aggregate: str = "max", query_id: str = "q") -> ScoreResult:
    return batch_score(np.asarray(query, dtype=np.float64)[None, :], pool, aggregate,
                       query_ids=[query_id], workers=1)[0]


def naive_score(query, pool_records, aggregate: str = "max",
                exclude_patient: str | None = None) -> tuple[float, str, str]:
    """Reference O(P*n) scorer built on ``pearson``; returns (score, image_id, patient_id).

    Used by the audit path to recheck decisions independently of the kernel.
    """
    best, best_id, best_pid = -math.inf, None, None
    scores = []
    for r in sorted(pool_records, key=lambda r: r[0]):
        iid, pid, vec = r
        if exclude_patient is not None and pid == exclude_patient:
            continue
        try:
            s = pearson(query, vec)
        except UndefinedCorrelation:
            continue
        scores.append(s)
        if s > best:
            best, best_id, best_pid = s, iid, pid
    if not scores:
        raise UndefinedScoreError("every correlation with the pool is undefined")
    score = best if aggregate == "max" else math.fsum(scores) / len(scores)
    return score, best_id, best_pid
