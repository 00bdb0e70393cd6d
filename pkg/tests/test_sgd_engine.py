import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgdtail.data_gen import GaussianStreamSpec, Minibatch
from sgdtail.sgd_engine import (
    AllDivergedError,
    ChainState,
    RunConfig,
    ergodic_averages,
    iterate_ensemble,
    minibatch_indices,
    moment_trajectory,
    run_chain,
    run_coupled_pair,
    run_coupled_pairs,
    sgd_step,
)
from sgdtail.rng import keyed_rng


def dense_step(x, A, y, eta, b):
    d = x.size
    H = A.T @ A
    return (np.eye(d) - (eta / b) * H) @ x + (eta / b) * A.T @ y


class TestSgdStep:
    def test_zero_state_gives_noise_term(self):
        rng = np.random.default_rng(0)
        A, y = rng.standard_normal((3, 4)), rng.standard_normal(3)
        out = sgd_step(ChainState(np.zeros(4)), Minibatch(A, y), 0.2, 3)
        np.testing.assert_array_equal(out.x, (0.2 / 3) * (A.T @ y))
        assert out.k == 1

    def test_scalar_hand_computation(self):
        out = sgd_step(ChainState(np.array([2.0])), Minibatch(np.array([[1.0]]), np.array([0.0])), 0.5, 1)
        assert out.x[0] == 1.0

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            d, b = rng.integers(1, 9, size=2)
            A, y, x = rng.standard_normal((b, d)), rng.standard_normal(b), rng.standard_normal(d)
            eta = rng.uniform(0, 1)
            got = sgd_step(ChainState(x), Minibatch(A, y), eta, b).x
            np.testing.assert_allclose(got, dense_step(x, A, y, eta, b), rtol=1e-12, atol=1e-12 * np.abs(x).max())

    def test_overflow_sets_flag_without_raising(self):
        out = sgd_step(ChainState(np.array([1e300])), Minibatch(np.array([[1e10]]), np.array([0.0])), 1.0, 1)
        assert out.diverged

    def test_threshold_crossing(self):
        out = sgd_step(ChainState(np.array([10.0])), Minibatch(np.array([[2.0]]), np.array([0.0])), 1.0, 1, 5.0)
        assert out.diverged and out.x[0] == -30.0

    def test_diverged_state_rejected(self):
        with pytest.raises(ValueError):
            sgd_step(ChainState(np.zeros(1), diverged=True), Minibatch(np.ones((1, 1)), np.zeros(1)), 0.1, 1)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            sgd_step(ChainState(np.zeros(3)), Minibatch(np.ones((2, 4)), np.zeros(2)), 0.1, 2)


class TestRunConfig:
    @pytest.mark.parametrize("kw", [dict(K=0), dict(K=10, K0=10), dict(K=10, replicas=0), dict(K=10, mode="batch"), dict(K=10, mode="finite-sum")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            RunConfig(**kw)


class TestChains:
    def test_zero_stepsize_freezes_chain(self):
        spec = GaussianStreamSpec(d=3, b=2, eta=0.0)
        x0 = np.array([1.0, -2.0, 0.5])
        summary, state = run_chain(spec, RunConfig(K=100, replicas=1), x0)
        np.testing.assert_array_equal(state.x, x0)
        np.testing.assert_allclose(summary.norms, np.linalg.norm(x0))

    def test_single_chain_matches_stepwise_oracle(self):
        from sgdtail.data_gen import draw_x_true, gen_stream_batch

        spec = GaussianStreamSpec(d=3, b=2, eta=0.1, seed=4)
        x_true = draw_x_true(spec)
        x = np.ones(3)
        for k in range(1, 131):
            bt = gen_stream_batch(spec, x_true, k)
            x = dense_step(x, bt.inputs, bt.labels, spec.eta, spec.b)
        _, state = run_chain(spec, RunConfig(K=130, replicas=1), np.ones(3))
        np.testing.assert_allclose(state.x, x, rtol=1e-10)

    def test_replica_path_independent_of_ensemble(self):
        spec = GaussianStreamSpec(d=4, b=2, eta=0.1, seed=3)
        cfg = RunConfig(K=80, K0=10, replicas=6)
        full = ergodic_averages(spec, cfg)
        alone = ergodic_averages(spec, cfg, replicas=[4])
        np.testing.assert_array_equal(full.rows[4], alone.rows[0])

    def test_regime_one_is_stable(self):
        spec = GaussianStreamSpec(d=10, b=5, eta=0.01, seed=0)
        err = []
        for k, X, div in iterate_ensemble(spec, RunConfig(K=10**4, replicas=100)):
            assert not div.any()
            if k >= 1000 and k % 1000 == 0:
                from sgdtail.data_gen import draw_x_true

                err.append(np.linalg.norm(X - draw_x_true(spec), axis=1).max())
        assert max(err) < 5.0

    def test_no_stationary_regime_diverges(self):
        spec = GaussianStreamSpec(d=10, b=1, eta=1.0, seed=0)
        div = None
        for k, _, div in iterate_ensemble(spec, RunConfig(K=10**4, replicas=100)):
            if div.all():
                break
        assert div.sum() >= 95
        assert k < 10**4

    def test_finite_sum_mean_is_least_squares_solution(self):
        from sgdtail.data_gen import gen_finite_dataset

        spec = GaussianStreamSpec(d=3, b=2, eta=0.05, seed=1)
        cfg = RunConfig(K=50, K0=49, replicas=3, mode="finite-sum", n=40)
        sm = ergodic_averages(spec, cfg)
        A, y, _ = gen_finite_dataset(spec, 40)
        np.testing.assert_allclose(sm.x_bar, np.linalg.lstsq(A, y, rcond=None)[0], rtol=1e-10)

    def test_finite_sum_singular_design(self):
        spec = GaussianStreamSpec(d=5, b=2, eta=0.05)
        with pytest.raises(np.linalg.LinAlgError):
            ergodic_averages(spec, RunConfig(K=5, replicas=2, mode="finite-sum", n=3))


class TestMinibatchIndices:
    @given(st.integers(1, 50), st.integers(1, 8), st.integers(0, 2**32))
    @settings(max_examples=50, deadline=None)
    def test_distinct_within_step(self, n, b, seed):
        b = min(b, n)
        idx = minibatch_indices(keyed_rng(seed, "t"), n, b, 20)
        assert idx.shape == (20, b)
        assert idx.min() >= 0 and idx.max() < n
        assert all(len(set(row)) == b for row in idx)

    def test_with_replacement_allows_repeats(self):
        idx = minibatch_indices(keyed_rng(0, "t"), 2, 2, 200, replacement=True)
        assert any(row[0] == row[1] for row in idx)

    def test_uniform_marginals(self):
        idx = minibatch_indices(keyed_rng(1, "t"), 10, 3, 20000)
        counts = np.bincount(idx.ravel(), minlength=10) / idx.size
        np.testing.assert_allclose(counts, 0.1, atol=0.005)


class TestCoupledPairs:
    def test_identical_start_stays_identical(self):
        spec = GaussianStreamSpec(d=5, b=2, eta=0.1)
        x0 = np.ones(5)
        np.testing.assert_array_equal(run_coupled_pair(spec, RunConfig(K=50), x0, x0), 0.0)

    def test_independent_of_labels(self):
        cfg = RunConfig(K=100, replicas=4)
        a = run_coupled_pairs(GaussianStreamSpec(d=5, b=2, eta=0.1, sigma_y=1.0, sigma_x=1.0), cfg, np.zeros(5), np.ones(5))
        b = run_coupled_pairs(GaussianStreamSpec(d=5, b=2, eta=0.1, sigma_y=7.0, sigma_x=3.0), cfg, np.zeros(5), np.ones(5))
        np.testing.assert_array_equal(a, b)

    def test_matches_difference_of_two_chains(self):
        spec = GaussianStreamSpec(d=3, b=2, eta=0.2, seed=2)
        cfg = RunConfig(K=60, replicas=1)
        x0, x1 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0, -1.0])
        _, s0 = run_chain(spec, cfg, x0)
        _, s1 = run_chain(spec, cfg, x1)
        d = run_coupled_pair(spec, cfg, x0, x1)
        assert d[-1] == pytest.approx(np.linalg.norm(s0.x - s1.x), rel=1e-8)

    def test_contraction_slope_tracks_h2(self):
        from sgdtail.tail_theory import TheoryQuery, h2_closed_form

        spec = GaussianStreamSpec(d=10, b=5, eta=0.02, seed=0)
        D = run_coupled_pairs(spec, RunConfig(K=200, replicas=1000))
        slope = np.polyfit(np.arange(201), np.log((D**2).mean(axis=0)), 1)[0]
        expected = np.log(h2_closed_form(TheoryQuery(0.02, 5, 10)))
        assert slope == pytest.approx(expected, rel=0.1)


class TestErgodicAverages:
    def test_window_of_one_is_centered_final_iterate(self):
        spec = GaussianStreamSpec(d=3, b=2, eta=0.1, seed=8)
        cfg = RunConfig(K=40, K0=39, replicas=2)
        sm = ergodic_averages(spec, cfg)
        for r in range(2):
            _, st_ = run_chain(spec, cfg, replica=r)
            np.testing.assert_allclose(sm.rows[r], st_.x - sm.x_bar, rtol=1e-12)

    def test_frozen_chain_at_mean(self):
        from sgdtail.data_gen import draw_x_true

        spec = GaussianStreamSpec(d=3, b=2, eta=0.0, seed=1)
        sm = ergodic_averages(spec, RunConfig(K=20, K0=5, replicas=4), x0=draw_x_true(spec))
        np.testing.assert_array_equal(sm.rows, 0.0)

    def test_all_diverged(self):
        spec = GaussianStreamSpec(d=10, b=1, eta=5.0)
        with pytest.raises(AllDivergedError, match="rho"):
            ergodic_averages(spec, RunConfig(K=500, replicas=3))

    def test_diverged_replicas_are_counted_and_dropped(self):
        spec = GaussianStreamSpec(d=10, b=1, eta=0.21, seed=0)
        sm = ergodic_averages(spec, RunConfig(K=200, K0=100, replicas=50, overflow_threshold=50.0))
        assert sm.n_diverged + sm.n_rows == 50
        assert 0 < sm.n_diverged < 50
        assert np.isfinite(sm.rows).all()

    def test_reference_configuration_rows_are_finite(self):
        spec = GaussianStreamSpec(d=100, b=5, eta=0.1, sigma_x=3.0, sigma_y=3.0, seed=0)
        sm = ergodic_averages(spec, RunConfig(K=1000, K0=500, replicas=100))
        assert sm.rows.shape == (100, 100) and np.isfinite(sm.rows).all()


class TestMomentTrajectory:
    def test_zeroth_moment(self):
        spec = GaussianStreamSpec(d=3, b=2, eta=0.1)
        tr = moment_trajectory(spec, RunConfig(K=30, replicas=100), 0.0)
        np.testing.assert_array_equal(tr.mean, 1.0)

    def test_few_replicas_warns(self):
        with pytest.warns(UserWarning, match="replicas"):
            moment_trajectory(GaussianStreamSpec(d=3, b=2, eta=0.1), RunConfig(K=5, replicas=10), 1.0)

    def test_flat_after_burn_in(self):
        # Past burn-in every x_k has the stationary law, so E||x_k|| no longer drifts.
        spec = GaussianStreamSpec(d=10, b=5, eta=0.3, seed=2)
        tr = moment_trajectory(spec, RunConfig(K=600, replicas=400), 1.0)
        late = tr.mean[300:]
        se = tr.std_error[300:].mean()
        assert abs(late[:150].mean() - late[150:].mean()) < 2 * se

    def test_bootstrap_error_shrinks_with_replicas(self):
        spec = GaussianStreamSpec(d=5, b=2, eta=0.1, seed=1)
        small = moment_trajectory(spec, RunConfig(K=20, replicas=100), 2.0)
        large = moment_trajectory(spec, RunConfig(K=20, replicas=1600), 2.0)
        assert large.std_error[-1] < small.std_error[-1] / 2
