import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_stiefel
from leanvec.datasets import make_dataset
from leanvec.errors import ValidationError
from leanvec.linalg import GramPair, accumulate_gram
from leanvec.projection import (
    FwConfig,
    ProjectionPair,
    build_grams,
    es_loss,
    fit_projection,
    fw_gap,
    normalize_queries,
    ood_gradients,
    ood_loss,
    reconstruction_loss,
    stride_sample,
    train_id,
    train_ood_es,
    train_ood_fw,
)


def random_instance(rng, big_d=10, d=3, m=60, n=60):
    q = rng.standard_normal((m, big_d))
    x = rng.standard_normal((n, big_d)) * rng.uniform(0.2, 2.0, big_d)
    a = rng.standard_normal((d, big_d))
    b = rng.standard_normal((d, big_d))
    grams = GramPair(accumulate_gram(q), accumulate_gram(x), m, n)
    return q, x, ProjectionPair(a, b, False), grams


def materialized_loss(pair, q, x):
    # rows of q and x are vectors; the approximated matrix is Q^T X
    approx = (q @ pair.a.T) @ (x @ pair.b.T).T
    return float(np.sum((approx - q @ x.T) ** 2))


class TestLoss:
    def test_trace_matches_materialized(self, rng):
        for _ in range(20):
            q, x, pair, grams = random_instance(rng)
            ref = materialized_loss(pair, q, x)
            assert abs(ood_loss(pair, grams) - ref) <= 1e-5 * ref

    def test_exact_reconstruction_zero_loss(self, rng):
        # data inside a d-dimensional subspace, queries arbitrary
        basis = random_stiefel(rng, 3, 8)
        x = rng.standard_normal((40, 3)) @ basis
        q = rng.standard_normal((40, 8))
        grams = GramPair(accumulate_gram(q), accumulate_gram(x), 40, 40)
        pair = ProjectionPair(basis, basis, True)
        assert abs(ood_loss(pair, grams)) <= 1e-9 * np.sum(grams.k_q * grams.k_x)

    def test_pca_reconstruction_is_trailing_eigenvalues(self, rng):
        x = rng.standard_normal((500, 16)) * np.linspace(3, 0.1, 16)
        k_x = accumulate_gram(x)
        pair = train_id(k_x, 4)
        tail = np.sort(np.linalg.eigvalsh(k_x))[:12].sum()
        assert np.isclose(reconstruction_loss(pair, k_x), tail, rtol=1e-9)
        assert np.allclose(pair.a @ pair.a.T, np.eye(4), atol=1e-10)
        assert pair.shared

    def test_shape_mismatch(self, rng):
        _, _, pair, grams = random_instance(rng)
        with pytest.raises(ValidationError):
            ood_loss(ProjectionPair(np.eye(2, 5), np.eye(2, 5), True), grams)

    @given(st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_loss_nonnegative(self, big_d, seed):
        rng = np.random.default_rng(seed)
        d = rng.integers(1, big_d)
        _, _, pair, grams = random_instance(rng, big_d, d, 20, 20)
        loss = ood_loss(pair, grams)
        assert loss >= -1e-9 * np.sum(grams.k_q * grams.k_x)


class TestGradients:
    def test_central_differences(self, rng):
        h = 1e-5
        for _ in range(20):
            _, _, pair, grams = random_instance(rng)
            ga, gb = ood_gradients(pair, grams)
            for which, grad in (("a", ga), ("b", gb)):
                num = np.zeros_like(grad)
                for i in range(grad.shape[0]):
                    for j in range(grad.shape[1]):
                        mats = {"a": pair.a.copy(), "b": pair.b.copy()}
                        mats[which][i, j] += h
                        up = ood_loss(ProjectionPair(mats["a"], mats["b"], False), grams)
                        mats[which][i, j] -= 2 * h
                        down = ood_loss(ProjectionPair(mats["a"], mats["b"], False), grams)
                        num[i, j] = (up - down) / (2 * h)
                assert np.max(np.abs(num - grad)) <= 1e-4 * max(1.0, np.max(np.abs(grad)))


class TestFrankWolfe:
    def test_gap_dominates_random_feasible_points(self, rng):
        _, _, pair, grams = random_instance(rng, 8, 3)
        ga, gb = ood_gradients(pair, grams)
        gap_a, gap_b = fw_gap(pair, grams)
        for _ in range(500):
            t = random_stiefel(rng, 3, 8)
            assert gap_a >= np.sum(-ga * (t - pair.a)) - 1e-9
            assert gap_b >= np.sum(-gb * (t - pair.b)) - 1e-9

    def test_gap_zero_at_exact_solution(self, rng):
        basis = random_stiefel(rng, 3, 8)
        x = rng.standard_normal((40, 3)) @ basis
        q = rng.standard_normal((40, 8))
        grams = GramPair(accumulate_gram(q), accumulate_gram(x), 40, 40)
        ga, gb = fw_gap(ProjectionPair(basis, basis, True), grams)
        scale = np.sum(grams.k_q * grams.k_x)
        assert abs(ga) <= 1e-8 * scale and abs(gb) <= 1e-8 * scale

    def test_zero_loss_instance_reached(self, rng):
        basis = random_stiefel(rng, 4, 12)
        x = rng.standard_normal((200, 4)) @ basis
        q = rng.standard_normal((200, 12))
        grams = build_grams(q, x)
        pair, report = train_ood_fw(grams, 4, FwConfig(max_iters=500, rel_tol=1e-9))
        start = report.losses[0]
        assert report.loss_after_retraction <= 1e-3 * start
        assert np.allclose(pair.a @ pair.a.T, np.eye(4), atol=1e-8)

    def test_report_invariants(self, rng):
        data = make_dataset(2000, 32, 8, n_learn=300, n_test=10, ood="spectrum", seed=3)
        grams = build_grams(data.learn_queries, data.data)
        pair, report = train_ood_fw(grams, 8)
        assert report.iterations_run == len(report.gaps_a) == len(report.step_sizes)
        assert len(report.losses) == report.iterations_run + 1
        assert all(g >= -1e-9 for g in report.gaps_a + report.gaps_b)
        assert report.step_sizes[0] == 1.0
        assert np.all(np.diff(report.step_sizes) < 0)
        running = np.minimum.accumulate(report.losses)
        assert np.all(np.diff(running) <= 0)
        assert pair.orthonormal

    def test_iterates_stay_in_hull(self, rng):
        _, _, _, grams = random_instance(rng, 8, 3)
        for iters in (1, 3, 10):
            pair, _ = train_ood_fw(grams, 3, FwConfig(max_iters=iters, rel_tol=1e-15, retract_output=False))
            for mat in (pair.a, pair.b):
                assert np.linalg.norm(mat, 2) <= 1 + 1e-9

    def test_no_retraction_keeps_relaxed_point(self, rng):
        _, _, _, grams = random_instance(rng, 8, 3)
        pair, report = train_ood_fw(grams, 3, FwConfig(retract_output=False))
        assert not pair.orthonormal
        assert report.loss_after_retraction is None

    def test_rejects_non_psd(self):
        bad = np.diag([1.0, -1.0, 1.0])
        with pytest.raises(ValidationError, match="positive semidefinite"):
            train_ood_fw(GramPair(bad, np.eye(3), 3, 3), 1)

    @pytest.mark.parametrize("d", [0, 5, 6])
    def test_target_dim_checked(self, d):
        with pytest.raises(ValidationError):
            train_ood_fw(GramPair(np.eye(5), np.eye(5), 5, 5), d)

    def test_config_validated(self):
        with pytest.raises(ValidationError):
            FwConfig(max_iters=0)


class TestEigenSearch:
    def test_envelope_and_endpoints(self, rng):
        data = make_dataset(2000, 32, 8, n_learn=300, n_test=10, ood="spectrum", seed=1)
        grams = build_grams(data.learn_queries, data.data)
        trace = []
        pair, beta = train_ood_es(grams, 8, trace=trace)
        best = es_loss(grams, 8, beta)
        for b in (0.0, 0.5, 1.0):
            assert best <= es_loss(grams, 8, b) + 1e-12
        grid = min(es_loss(grams, 8, b) for b in np.linspace(0, 1, 101))
        assert best <= grid * (1 + 1e-6)
        assert {0.0, 0.5, 1.0} <= {b for b, _ in trace}
        assert pair.shared and pair.orthonormal

    def test_beta_invariance_in_distribution(self, rng):
        x = rng.standard_normal((400, 12)) * np.linspace(2, 0.2, 12)
        grams = GramPair(accumulate_gram(x), accumulate_gram(x), 400, 400)
        profile = [es_loss(grams, 4, b) for b in np.linspace(0, 1, 21)]
        assert (max(profile) - min(profile)) <= 1e-8 * max(profile)

    def test_beta_one_is_pca(self, rng):
        _, _, _, grams = random_instance(rng, 10, 3)
        trace = []
        train_ood_es(grams, 3, trace=trace)
        pca = train_id(grams.k_x, 3)
        norm = GramPair(*grams.normalized(), 1, 1)
        assert np.isclose(dict(trace)[1.0], ood_loss(pca, norm), rtol=1e-12)


class TestHelpers:
    def test_normalize_queries(self, rng):
        q = rng.standard_normal((25, 6))
        q[3] = 0.0
        out = normalize_queries(q)
        norms = np.sum(out**2, axis=1)
        assert norms[3] == 0.0
        assert np.allclose(np.delete(norms, 3), 1 / 25)

    def test_stride_sample(self):
        x = np.arange(10)[:, None]
        assert stride_sample(x, 20) is x
        assert stride_sample(x, 4)[:, 0].tolist() == [0, 3, 6, 9]

    def test_build_grams_needs_enough_samples(self, rng):
        with pytest.raises(ValidationError, match="at least D"):
            build_grams(rng.standard_normal((3, 8)), rng.standard_normal((100, 8)))

    def test_projection_pair_validation(self):
        with pytest.raises(ValidationError):
            ProjectionPair(np.eye(2, 4), np.eye(3, 4), True)
        with pytest.raises(ValidationError):
            ProjectionPair(np.eye(5, 4), np.eye(5, 4), True)

    def test_identity_pair(self):
        pair = ProjectionPair.identity(3)
        x = np.arange(6.0).reshape(2, 3)
        assert np.array_equal(pair.project_data(x), x)


@pytest.fixture(scope="module")
def data():
    return make_dataset(3000, 32, 8, n_learn=400, n_test=10, ood="spectrum", seed=5)


class TestFitProjection:
    @pytest.mark.parametrize("mode", ["id", "ood-fw", "ood-es"])
    def test_modes(self, data, mode):
        res = fit_projection(mode, data.data, 8, data.learn_queries)
        assert res.pair.d == 8 and res.pair.D == 32
        assert res.pair.orthonormal
        summary = res.summary()
        assert summary["mode"] == mode
        if mode == "id":
            assert res.loss == res.pca_loss
        if mode == "ood-es":
            assert res.loss <= res.pca_loss * (1 + 1e-12)
            assert 0.0 <= res.beta <= 1.0

    def test_ood_needs_queries(self, data):
        with pytest.raises(ValidationError):
            fit_projection("ood-fw", data.data, 8)

    def test_unknown_mode(self, data):
        with pytest.raises(ValidationError):
            fit_projection("lda", data.data, 8)


class TestSmallCases:
    def test_isotropic_pca_loss(self):
        k_x = np.eye(8) * 3.0
        pair = train_id(k_x, 3)
        assert np.allclose(pair.a @ pair.a.T, np.eye(3), atol=1e-10)
        assert np.isclose(reconstruction_loss(pair, k_x), 5 / 8 * np.trace(k_x))

    def test_pca_exact_subspace(self, rng):
        basis = random_stiefel(rng, 4, 10)
        x = rng.standard_normal((60, 4)) @ basis
        pair = train_id(accumulate_gram(x), 4)
        resid = x - x @ pair.b.T @ pair.b
        assert np.sum(resid**2) <= 1e-8 * max(1.0, np.sum(x**2))

    def test_zero_matrices_leave_constant_term(self, rng):
        _, _, _, grams = random_instance(rng, 6, 2)
        zero = ProjectionPair(np.zeros((2, 6)), np.zeros((2, 6)), False)
        assert np.isclose(ood_loss(zero, grams), np.trace(grams.k_q @ grams.k_x))

    def test_d12_instance_matches_materialized(self, rng):
        q, x, pair, grams = random_instance(rng, 12, 4, 40, 40)
        ref = materialized_loss(pair, q, x)
        assert abs(ood_loss(pair, grams) - ref) <= 1e-6 * ref

    def test_zero_query_gram_zero_gradients(self, rng):
        _, _, pair, grams = random_instance(rng, 6, 2)
        grams = GramPair(np.zeros((6, 6)), grams.k_x, 1, grams.n)
        ga, gb = ood_gradients(pair, grams)
        assert not ga.any() and not gb.any()
        assert fw_gap(pair, grams) == (0.0, 0.0)

    def test_first_iterate_is_vertex(self, rng):
        _, _, _, grams = random_instance(rng, 8, 3)
        pair, report = train_ood_fw(grams, 3, FwConfig(max_iters=1, retract_output=False))
        assert report.step_sizes == [1.0]
        assert np.allclose(pair.a @ pair.a.T, np.eye(3), atol=1e-8)
        assert np.allclose(pair.b @ pair.b.T, np.eye(3), atol=1e-8)

    def test_es_needs_samples(self):
        with pytest.raises(ValidationError):
            train_ood_es(GramPair(np.eye(4), np.eye(4), 0, 5), 2)
