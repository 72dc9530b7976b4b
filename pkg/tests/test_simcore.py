import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_scores, pearson_two_pass
from privfilter.simcore import (
    Pool,
    UndefinedCorrelation,
    UndefinedScoreError,
    batch_score,
    pearson,
    scan,
    score_against_pool,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False, width=32)


class TestPearson:
    def test_positive_affine(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == 1.0

    def test_reversal(self):
        assert pearson([1, 2, 3], [3, 2, 1]) == -1.0

    def test_degenerate_is_undefined(self):
        with pytest.raises(UndefinedCorrelation):
            pearson([5, 5, 5], [1, 2, 3])
        with pytest.raises(UndefinedCorrelation):
            pearson([1, 2, 3], [0.1, 0.1, 0.1])

    def test_needs_two_points(self):
        with pytest.raises(ValueError):
            pearson([1.0], [2.0])

    def test_random_16_against_two_pass(self, rng):
        for _ in range(50):
            x, y = rng.standard_normal(16), rng.standard_normal(16)
            assert abs(pearson(x, y) - pearson_two_pass(list(x), list(y))) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(x=arrays(np.float64, st.integers(2, 40), elements=finite), data=st.data())
    def test_symmetry_and_range(self, x, data):
        y = data.draw(arrays(np.float64, x.shape, elements=finite))
        assume(np.ptp(x) > 1e-3 and np.ptp(y) > 1e-3)
        r = pearson(x, y)
        assert r == pearson(y, x)
        assert -1.0 <= r <= 1.0

    @settings(max_examples=200, deadline=None)
    @given(x=arrays(np.float64, st.integers(3, 40), elements=finite), data=st.data(),
           alpha=st.floats(0.01, 100), beta=st.floats(-100, 100))
    def test_affine_invariance(self, x, data, alpha, beta):
        y = data.draw(arrays(np.float64, x.shape, elements=finite))
        assume(np.std(x) > 1e-2 and np.std(y) > 1e-2)
        r = pearson(x, y)
        assert pearson(alpha * x + beta, y) == pytest.approx(r, abs=1e-9)
        assert pearson(-alpha * x + beta, y) == pytest.approx(-r, abs=1e-9)


class TestScoreAgainstPool:
    def test_self_match(self):
        pool = [("a", "P", [1, 5, 2, 8]), ("m", "Q", [3, 1, 4, 1]), ("z", "R", [0, 1, 0, 2])]
        res = score_against_pool([3, 1, 4, 1], pool)
        assert res.max_score == pytest.approx(1.0, abs=1e-15)
        assert res.argmax_image_id == "m"
        assert res.argmax_patient_id == "Q"

    def test_tie_goes_to_smallest_id(self):
        v = [0.3, 1.2, -0.7, 2.0]
        pool = [("b", "P2", v), ("a", "P1", v), ("c", "P3", [1, 0, 0, 0])]
        res = score_against_pool(v, pool)
        assert res.argmax_image_id == "a"

    def test_hand_set_pool_matches_brute_force(self):
        pool = [("x", "P", [1.0, 2.0, 0.0]), ("y", "Q", [0.0, 1.0, 3.0]),
                ("z", "R", [2.0, -1.0, 1.0])]
        q = [0.5, 1.5, 1.0]
        r_max = score_against_pool(q, pool, "max")
        r_mean = score_against_pool(q, pool, "mean")
        best, iid, pid, mean = brute_force_scores(q, pool)
        assert r_max.max_score == pytest.approx(best, abs=1e-12)
        assert r_max.argmax_image_id == iid
        assert r_mean.score == pytest.approx(mean, abs=1e-12)

    def test_undefined_pool_member_excluded(self):
        pool = [("a", "P", [1, 1, 1]), ("b", "Q", [1, 2, 4])]
        res = score_against_pool([3, 2, 1], pool, "mean")
        assert res.defined_count == 1
        assert res.argmax_image_id == "b"
        assert res.mean_score_over_pool == res.max_score

    def test_all_undefined(self):
        with pytest.raises(UndefinedScoreError):
            score_against_pool([1, 1, 1], [("a", "P", [1, 2, 3])])
        with pytest.raises(UndefinedScoreError):
            score_against_pool([1, 2, 3], [("a", "P", [2, 2, 2])])

    def test_empty_pool(self):
        with pytest.raises(ValueError, match="empty pool"):
            score_against_pool([1, 2, 3], [])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            score_against_pool([1, 2, 3, 4], [("a", "P", [1, 2, 3])])


class TestBatchScore:
    def _pool(self, rng, n=50, d=12):
        vecs = rng.standard_normal((n, d))
        return [(f"i{j:03d}", f"P{j % 7}", vecs[j]) for j in range(n)], vecs

    def test_matches_sequential_bitwise(self, rng):
        pool_recs, _ = self._pool(rng)
        pool = Pool.from_records(pool_recs)
        q = rng.standard_normal((100, 12))
        batch = batch_score(q, pool, "max")
        for i in range(100):
            single = score_against_pool(q[i], pool, "max", query_id=str(i))
            assert batch[i] == single

    def test_empty_queries(self, rng):
        pool_recs, _ = self._pool(rng)
        assert batch_score([], pool_recs) == []

    def test_chunking_invariance(self, rng):
        pool = Pool.from_records(self._pool(rng)[0])
        q = rng.standard_normal((203, 12))
        a = scan(q, pool, chunk_size=1, workers=1)
        b = scan(q, pool, chunk_size=64, workers=1)
        c = scan(q, pool, chunk_size=7, workers=3)
        for other in (b, c):
            np.testing.assert_array_equal(a.best, other.best)
            np.testing.assert_array_equal(a.argmax, other.argmax)
            np.testing.assert_array_equal(a.total, other.total)

    def test_brute_force_equivalence(self, rng):
        pool_recs, _ = self._pool(rng, n=60, d=9)
        q = rng.standard_normal((40, 9))
        res = batch_score(q, pool_recs, "mean")
        for i, r in enumerate(res):
            best, iid, pid, mean = brute_force_scores(q[i], pool_recs)
            assert abs(r.max_score - best) < 1e-12
            assert r.argmax_image_id == iid and r.argmax_patient_id == pid
            assert abs(r.mean_score_over_pool - mean) < 1e-12
            assert r.pool_size == 60

    def test_error_carries_query_index(self, rng):
        pool_recs, _ = self._pool(rng)
        q = rng.standard_normal((5, 12))
        q[3] = 2.0
        with pytest.raises(UndefinedScoreError) as exc:
            batch_score(q, pool_recs)
        assert exc.value.query_index == 3

    def test_exclude_same_patient(self):
        pool = [("a", "P", [1, 2, 3, 4]), ("b", "Q", [4, 1, 3, 2])]
        q = np.array([[1, 2, 3, 4.5]])
        inc = batch_score(q, pool, query_patient_ids=["P"])[0]
        exc = batch_score(q, pool, query_patient_ids=["P"], exclude_same_patient=True)[0]
        assert inc.argmax_image_id == "a"
        assert exc.argmax_image_id == "b" and exc.defined_count == 1

    def test_scores_within_range(self, rng):
        pool_recs, vecs = self._pool(rng)
        # exact duplicates and negations push scores to the +-1 boundary
        q = np.concatenate([vecs[:10], -vecs[10:20]])
        for r in batch_score(q, pool_recs, "mean"):
            assert -1.0 <= r.max_score <= 1.0
            assert -1.0 <= r.mean_score_over_pool <= 1.0


def test_pool_sorted_by_image_id():
    pool = Pool(["c", "a", "b"], ["P", "Q", "R"], np.arange(9.0).reshape(3, 3) ** 2)
    assert pool.image_ids == ["a", "b", "c"]
    assert pool.patient_ids == ["Q", "R", "P"]
    assert math.isclose(np.linalg.norm(pool.z[0]), 1.0)
