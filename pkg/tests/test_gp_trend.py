import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nexus.gp_trend import (
    FactorizationError,
    KernelParams,
    PriorSpec,
    build_gram,
    cholesky_with_jitter,
    derivative,
    finite_difference_gradient,
    fit_hierarchical,
    fit_map,
    fit_trend,
    length_scale_log_prior,
    load_trend_fit,
    log_marginal,
    log_posterior,
    matern32,
    posterior_mean,
    save_trend_fit,
)

from conftest import make_log_series, make_series


# ---------------------------------------------------------------------------
# Independent oracles (kept deliberately naive: loops + generic solvers)
# ---------------------------------------------------------------------------

def oracle_gram(times, params):
    n = len(times)
    K = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            d = abs(times[i] - times[j])
            r = math.sqrt(3.0) * d / params.length_scale
            K[i, j] = params.amplitude**2 * (1.0 + r) * math.exp(-r)
            if i == j:
                K[i, j] += params.noise_sd**2
    return K


def oracle_log_marginal(series, params):
    K = oracle_gram(list(series.months), params)
    y = np.asarray(series.log_fatalities, dtype=float)
    sign, logdet = np.linalg.slogdet(K)
    assert sign > 0
    quad = y @ np.linalg.inv(K) @ y
    return -0.5 * quad - 0.5 * logdet - 0.5 * len(y) * math.log(2 * math.pi)


def oracle_posterior_mean(series, params, grid):
    K = oracle_gram(list(series.months), params)
    y = np.asarray(series.log_fatalities, dtype=float)
    k_star = np.empty((len(grid), len(y)))
    for i, g in enumerate(grid):
        for j, x in enumerate(series.months):
            d = abs(float(g) - float(x))
            r = math.sqrt(3.0) * d / params.length_scale
            k_star[i, j] = params.amplitude**2 * (1.0 + r) * math.exp(-r)
    return k_star @ np.linalg.solve(K, y)


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

class TestMatern32:
    def test_zero_distance_is_squared_amplitude(self):
        assert matern32(0.0, 3.7, 2.0) == pytest.approx(4.0, abs=1e-12)

    def test_unit_evaluation(self):
        assert matern32(1.0, 1.0, 1.0) == pytest.approx(0.4833577245965077, abs=1e-12)

    def test_decay_limit(self):
        assert matern32(1e9, 1.0, 1.0) == pytest.approx(0.0, abs=1e-30)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            matern32(float("nan"), 1.0, 1.0)
        with pytest.raises(ValueError):
            matern32(1.0, 0.0, 1.0)

    @given(
        d1=st.floats(0.0, 100.0),
        d2=st.floats(0.0, 100.0),
        ell=st.floats(0.5, 50.0),
        eta=st.floats(0.1, 10.0),
    )
    def test_strictly_decreasing_in_distance(self, d1, d2, ell, eta):
        lo, hi = sorted((d1, d2))
        # skip pairs too close to resolve in float64 and the exp-underflow tail
        if hi - lo < 1e-3 or math.sqrt(3.0) * hi / ell > 500.0:
            return
        assert matern32(lo, ell, eta) > matern32(hi, ell, eta)


class TestGram:
    def test_single_point(self):
        params = KernelParams(2.0, 1.5, 0.5)
        gram = build_gram(np.array([7]), params)
        assert gram.shape == (1, 1)
        assert gram[0, 0] == pytest.approx(1.5**2 + 0.5**2, abs=1e-12)

    def test_two_points_off_diagonal(self):
        params = KernelParams(1.0, 1.0, 0.5)
        gram = build_gram(np.array([0, 1]), params)
        assert gram[0, 1] == pytest.approx(0.48336, abs=1e-5)
        assert gram[0, 1] == gram[1, 0]

    def test_random_grids_factorize_at_low_jitter(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 65))
            times = np.sort(rng.choice(240, size=n, replace=False))
            params = KernelParams(
                float(rng.uniform(0.5, 120.0)),
                float(rng.uniform(0.1, 4.0)),
                float(rng.uniform(0.01, 2.0)),
            )
            gram = build_gram(times, params)
            _, level = cholesky_with_jitter(gram, params.amplitude)
            assert level <= 1

    def test_duplicate_times_rejected(self):
        with pytest.raises(ValueError):
            build_gram(np.array([1, 1, 2]), KernelParams(1.0, 1.0, 0.1))

    def test_factorization_error_on_broken_matrix(self):
        bad = np.array([[1.0, 2.0], [2.0, 1.0]])  # indefinite
        with pytest.raises(FactorizationError):
            cholesky_with_jitter(bad, amplitude=1e-6)


# ---------------------------------------------------------------------------
# Marginal likelihood and posterior objective
# ---------------------------------------------------------------------------

class TestLogMarginal:
    def test_single_point_closed_form(self):
        series = make_series([0])
        value = log_marginal(series, KernelParams(5.0, 1.0, 1.0))
        assert value == pytest.approx(-1.2655121234846454, abs=1e-10)

    def test_zero_y_drops_quadratic_term(self):
        series = make_series([0, 0, 0, 0])
        params = KernelParams(3.0, 1.2, 0.4)
        gram = build_gram(series.months, params)
        sign, logdet = np.linalg.slogdet(gram)
        expected = -0.5 * logdet - 0.5 * 4 * math.log(2 * math.pi)
        assert log_marginal(series, params) == pytest.approx(expected, abs=1e-10)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        for n in (2, 3, 4, 5, 6):
            y = rng.normal(1.0, 1.0, size=n)
            series = make_log_series(y)
            params = KernelParams(
                float(rng.uniform(0.5, 30.0)),
                float(rng.uniform(0.2, 3.0)),
                float(rng.uniform(0.05, 1.0)),
            )
            assert log_marginal(series, params) == pytest.approx(
                oracle_log_marginal(series, params), abs=1e-10
            )


class TestLogPosterior:
    def test_prior_maximized_at_median_in_log_space(self):
        prior = PriorSpec(log_median=math.log(122.38), log_sd=0.5)
        at_median = length_scale_log_prior(122.38, prior)
        for ell in (30.0, 80.0, 122.0, 123.0, 400.0):
            if ell != 122.38:
                assert length_scale_log_prior(ell, prior) < at_median

    def test_default_prior_median(self):
        assert math.log(122.38) == pytest.approx(4.80713, abs=1e-5)

    def test_flat_prior_limit_constant_in_length_scale(self):
        series = make_series([1, 4, 9, 2, 0, 5])
        prior = PriorSpec(log_median=math.log(122.38), log_sd=1e9)
        diffs = []
        for ell in (2.0, 20.0, 200.0):
            params = KernelParams(ell, 1.0, 0.5)
            diffs.append(log_posterior(series, params, prior) - log_marginal(series, params))
        assert max(diffs) - min(diffs) < 1e-12


class TestGradientCheck:
    def test_two_step_sizes_agree(self):
        series = make_series([0, 3, 10, 44, 12, 7, 0, 2, 30, 18])
        prior = PriorSpec(math.log(122.38), 0.5)

        def objective(z):
            return log_posterior(series, KernelParams(*np.exp(z)), prior)

        rng = np.random.default_rng(11)
        for _ in range(20):
            z = np.array(
                [
                    rng.uniform(math.log(2), math.log(120)),
                    rng.uniform(math.log(0.3), math.log(3)),
                    rng.uniform(math.log(0.1), math.log(1.5)),
                ]
            )
            g1 = finite_difference_gradient(objective, z, step=1e-5)
            g2 = finite_difference_gradient(objective, z, step=1e-6)
            rel = np.linalg.norm(g1 - g2) / max(np.linalg.norm(g2), 1e-12)
            assert rel < 1e-3


# ---------------------------------------------------------------------------
# MAP fitting
# ---------------------------------------------------------------------------

PRIOR = PriorSpec(math.log(122.38), 0.5)


class TestFitMap:
    def test_white_noise_prefers_noise_over_signal(self):
        rng = np.random.default_rng(0)
        series = make_log_series(rng.normal(0.0, 0.5, size=48))
        params = fit_map(series, PRIOR)
        assert params.amplitude**2 / params.noise_sd**2 < 1.0

    def test_long_sine_gets_longer_length_scale(self):
        t = np.arange(72)
        slow = make_log_series(2.0 + 1.5 * np.sin(2 * np.pi * t / 48.0))
        fast = make_log_series(2.0 + 1.5 * np.sin(2 * np.pi * t / 6.0))
        params_slow = fit_map(slow, PRIOR)
        params_fast = fit_map(fast, PRIOR)
        assert params_slow.length_scale > params_fast.length_scale

    def test_constant_series_runs(self):
        series = make_log_series(np.full(24, 2.0))
        params, trace = fit_map(series, PRIOR, return_trace=True)
        assert math.isfinite(trace[-1])
        mean = posterior_mean(series, params, series.months)
        assert np.all(np.abs(mean - 2.0) < 2.0)  # shrinkage toward the zero prior mean

    def test_trace_non_decreasing(self):
        series = make_series([0, 1, 5, 20, 44, 31, 12, 4, 1, 0, 2, 9])
        _, trace = fit_map(series, PRIOR, return_trace=True)
        assert all(b >= a for a, b in zip(trace, trace[1:]))

    def test_prior_pull_limit(self):
        series = make_series([0, 3, 10, 44, 12, 7, 0, 2, 30, 18, 5, 1])
        tight = PriorSpec(math.log(122.38), 0.001)
        params = fit_map(series, tight)
        assert params.length_scale == pytest.approx(122.38, rel=0.01)

    def test_too_short_series_rejected(self):
        with pytest.raises(ValueError):
            fit_map(make_series([1, 2, 3]), PRIOR)


def synthetic_series(length_scale, rng, n=72, dyad_id="d", country_id="c"):
    """Draw one GP sample path with the given length scale (for recovery tests)."""
    t = np.arange(n)
    params = KernelParams(length_scale, 1.5, 0.3)
    gram = build_gram(t, params)
    y = rng.multivariate_normal(np.zeros(n), gram)
    return make_log_series(y - y.min(), dyad_id=dyad_id, country_id=country_id)


class TestFitHierarchical:
    def test_single_dyad_country_matches_fit_map(self):
        series = make_series([0, 1, 5, 20, 44, 31, 12, 4, 1, 0, 2, 9])
        solo = fit_map(series, PRIOR)
        pooled = fit_hierarchical([series], PRIOR)
        assert pooled[series.dyad_id] == solo

    def test_identical_series_get_identical_length_scales(self):
        raw = [0, 1, 5, 20, 44, 31, 12, 4, 1, 0, 2, 9, 15, 60, 80, 40, 10, 2]
        a = make_series(raw, dyad_id="a", country_id="cc")
        b = make_series(raw, dyad_id="b", country_id="cc")
        pooled = fit_hierarchical([a, b], PRIOR)
        assert pooled["a"].length_scale == pytest.approx(pooled["b"].length_scale, rel=1e-9)

    def test_two_countries_recover_length_scale_order(self):
        rng = np.random.default_rng(5)
        fast = [
            synthetic_series(6.0, rng, dyad_id=f"f{i}", country_id="fast") for i in range(2)
        ]
        slow = [
            synthetic_series(60.0, rng, dyad_id=f"s{i}", country_id="slow") for i in range(2)
        ]
        pooled = fit_hierarchical(fast + slow, PRIOR)
        mean_fast = np.mean([pooled[f"f{i}"].length_scale for i in range(2)])
        mean_slow = np.mean([pooled[f"s{i}"].length_scale for i in range(2)])
        assert mean_fast < mean_slow


# ---------------------------------------------------------------------------
# Posterior mean and derivative
# ---------------------------------------------------------------------------

class TestPosteriorMean:
    def test_near_noiseless_interpolation(self):
        series = make_series([0, 2, 9, 30, 12, 3])
        params = KernelParams(2.0, 2.0, 1e-6)
        mean = posterior_mean(series, params, series.months)
        assert np.max(np.abs(mean - series.log_fatalities)) < 1e-6

    def test_zero_observations_give_zero_mean(self):
        series = make_series([0, 0, 0, 0, 0])
        params = KernelParams(3.0, 1.0, 0.3)
        mean = posterior_mean(series, params, series.months)
        assert np.max(np.abs(mean)) < 1e-12

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(9)
        for n in (2, 4, 6, 8):
            series = make_log_series(rng.normal(1.5, 1.0, size=n))
            params = KernelParams(
                float(rng.uniform(0.5, 20.0)),
                float(rng.uniform(0.2, 3.0)),
                float(rng.uniform(0.05, 1.0)),
            )
            grid = np.asarray(series.months, dtype=float) + rng.uniform(-0.4, 0.4, size=n)
            expected = oracle_posterior_mean(series, params, grid)
            got = posterior_mean(series, params, grid)
            assert np.max(np.abs(got - expected)) < 1e-8


class TestDerivative:
    def test_linear_mean_exact(self):
        m = 0.5 * np.arange(10)
        assert np.allclose(derivative(m), 0.5)

    def test_constant_mean_zero(self):
        assert np.allclose(derivative(np.full(6, 3.3)), 0.0)

    def test_hand_fixture(self):
        assert np.allclose(derivative(np.array([0.0, 1.0, 4.0])), [1.0, 2.0, 3.0])

    def test_too_short_rejected(self):
        with pytest.raises(ValueError):
            derivative(np.array([1.0]))


class TestTrendFitRoundTrip:
    def test_save_load(self, tmp_path):
        series = make_series([0, 1, 5, 20, 44, 31, 12, 4, 1, 0, 2, 9])
        fit = fit_trend(series, PRIOR)
        path = tmp_path / "fit.json"
        save_trend_fit(fit, path)
        loaded = load_trend_fit(path)
        assert loaded.dyad_id == fit.dyad_id
        assert loaded.params == fit.params
        assert np.array_equal(loaded.grid, fit.grid)
        assert np.allclose(loaded.mean, fit.mean)
        assert np.allclose(loaded.derivative, fit.derivative)
