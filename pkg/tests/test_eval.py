import io
from contextlib import redirect_stdout

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from leanvec.errors import ValidationError
from leanvec.eval import CSV_FIELDS, GroundTruth, bench, brute_force_topk, mean_recall, recall
from leanvec.graph import GraphIndex, SearchParams
from leanvec.pipeline import FloatStore, LeanVecIndex, search
from leanvec.projection import ProjectionPair
from leanvec.scoring import exact_scores, top_k


def quadratic_topk(x, queries, k, metric):
    out = []
    for q in queries:
        scored = []
        for i in range(x.shape[0]):
            if metric == "inner_product":
                s = sum(float(a) * float(b) for a, b in zip(x[i], q))
            else:
                s = -sum((float(a) - float(b)) ** 2 for a, b in zip(x[i], q))
            scored.append((-s, i))
        scored.sort()
        out.append([i for _, i in scored[:k]])
    return np.array(out)


class TestBruteForce:
    @pytest.mark.parametrize("metric", ["inner_product", "euclidean"])
    def test_matches_quadratic_loop(self, rng, metric):
        x = rng.standard_normal((1000, 32)).astype(np.float32)
        q = rng.standard_normal((5, 32))
        assert np.array_equal(brute_force_topk(x, q, 10, metric).ids, quadratic_topk(x, q, 10, metric))

    def test_self_match_on_normalized_data(self, rng):
        x = rng.standard_normal((100, 8))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        assert brute_force_topk(x, x[[17]], 1).ids[0, 0] == 17

    def test_k_equals_n_full_order(self, rng):
        x = rng.standard_normal((20, 4))
        q = rng.standard_normal(4)
        ids = brute_force_topk(x, q[None], 20).ids[0]
        assert ids.tolist() == sorted(range(20), key=lambda i: (-(x[i] @ q), i))

    def test_ties_broken_by_id(self):
        x = np.array([[1.0], [2.0], [2.0], [1.0]])
        assert brute_force_topk(x, np.ones((1, 1)), 3).ids.tolist() == [[1, 2, 0]]

    def test_k_above_n(self, rng):
        with pytest.raises(ValidationError):
            brute_force_topk(rng.standard_normal((3, 2)), rng.standard_normal((1, 2)), 4)

    def test_threads_agree(self, rng):
        x = rng.standard_normal((300, 8))
        q = rng.standard_normal((20, 8))
        assert np.array_equal(brute_force_topk(x, q, 5, threads=3).ids, brute_force_topk(x, q, 5).ids)


class TestScoring:
    @given(st.lists(st.integers(-3, 3), min_size=1, max_size=30), st.integers(1, 30))
    def test_top_k_matches_sort(self, values, k):
        scores = np.array(values, dtype=np.float64)
        ids = np.arange(scores.size)[::-1].copy()
        pos = top_k(ids, scores, k)
        expected = sorted(range(scores.size), key=lambda p: (-scores[p], ids[p]))[:k]
        assert pos.tolist() == expected

    def test_exact_scores_float64(self, rng):
        x = rng.standard_normal((10, 5)).astype(np.float32)
        q = rng.standard_normal(5)
        assert np.allclose(exact_scores(x, q), x.astype(np.float64) @ q, rtol=1e-12)
        assert np.allclose(exact_scores(x, q, [2, 4], "euclidean"),
                           -np.sum((x[[2, 4]].astype(np.float64) - q) ** 2, axis=1), rtol=1e-12)


class TestRecall:
    def test_examples(self):
        assert recall(list(range(10)), list(range(10)), 10) == 1.0
        assert recall(list(range(10)), list(range(10, 20)), 10) == 0.0
        assert recall(list(range(9)) + [99], list(range(10)), 10) == 0.9

    def test_truncates_to_k(self):
        assert recall([1, 2, 3, 4], [2, 1, 9, 8], 2) == 1.0

    def test_errors(self):
        with pytest.raises(ValidationError):
            recall([1], [1], 0)
        with pytest.raises(ValidationError):
            recall([1], [1, 2], 2)

    @given(st.permutations(list(range(12))), st.permutations(list(range(6, 18))), st.integers(1, 12))
    def test_bounds_and_permutation_invariance(self, s, g, k):
        r = recall(s, g, k)
        assert 0.0 <= r <= 1.0
        assert r == recall(sorted(s[:k]), sorted(g[:k], reverse=True), k)

    def test_mean_recall_shape_checked(self):
        truth = GroundTruth(np.zeros((2, 10), np.int64), "inner_product")
        with pytest.raises(ValidationError):
            mean_recall([], truth, 10)


@pytest.fixture
def tiny_index(rng):
    x = rng.standard_normal((60, 6)).astype(np.float32)
    idx = LeanVecIndex(ProjectionPair.identity(6), FloatStore(x), FloatStore(x), GraphIndex.complete(60), "inner_product")
    q = rng.standard_normal((8, 6))
    return idx, q, brute_force_topk(x, q, 10)


class TestBench:
    def test_rows_and_csv(self, tiny_index, tmp_path):
        idx, q, truth = tiny_index
        report = bench(idx, q, truth, [(10, 10), (40, 20)], runs=3)
        assert [(r.W, r.candidates_out) for r in report.rows] == [(10, 10), (40, 20)]
        assert report.rows[1].recall_at_10 == 1.0
        assert all(r.qps > 0 and r.wall_ms > 0 for r in report.rows)
        path = tmp_path / "b.csv"
        text = report.to_csv(path)
        assert path.read_text() == text
        assert text.splitlines()[0] == ",".join(CSV_FIELDS)
        buf = io.StringIO()
        with redirect_stdout(buf):
            report.to_csv("-")
        assert buf.getvalue() == text

    def test_single_query_matches_recall(self, tiny_index):
        idx, q, truth = tiny_index
        one = GroundTruth(truth.ids[:1], truth.metric)
        report = bench(idx, q[:1], one, [(12, 10)], runs=1)
        expected = recall(search(idx, q[0], 10, SearchParams(12, 10)).ids, truth.ids[0], 10)
        assert report.rows[0].recall_at_10 == expected

    def test_wider_window_not_worse(self, tiny_index):
        idx, q, truth = tiny_index
        report = bench(idx, q, truth, [(10, 10), (30, 10)], runs=1)
        assert report.rows[1].recall_at_10 >= report.rows[0].recall_at_10 - 0.01

    def test_repeat_is_deterministic(self, tiny_index):
        idx, q, truth = tiny_index
        a = bench(idx, q, truth, [(15, 10)], runs=2).rows[0].recall_at_10
        b = bench(idx, q, truth, [(15, 10)], runs=2).rows[0].recall_at_10
        assert a == b

    def test_missing_truth(self, tiny_index):
        idx, q, _ = tiny_index
        with pytest.raises(ValidationError):
            bench(idx, q, None, [(10, 10)])
