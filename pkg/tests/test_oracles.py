import math

import numpy as np
import pytest

from hawkeslob import limit as L
from hawkeslob.families import ExponentialProfile, ConstantProfile
from hawkeslob.oracles import (
    CIRParams,
    OneSidedParams,
    closed_form_book,
    closed_form_mu_exponential,
    one_sided_volatility_clustering,
    simulate_cir,
    spread_reduction,
)
from oracle_configs import canonical_spread_config


class TestCIR:
    def test_noiseless_matches_linear_ode(self):
        # c = 0: the exact sampler reduces to the exact exponential update
        params = CIRParams(x0=0.5, a=1.0, b=2.0, c=0.0)
        path = simulate_cir(params, 1.0, 1e-2, 1)[:, 0]
        t = np.linspace(0, 1, 101)
        ref = 0.5 * np.exp(-2 * t) + 0.5 * (1 - np.exp(-2 * t))
        assert np.max(np.abs(path - ref)) <= 1e-6

    def test_exact_sampler_mean_grows_linearly(self):
        # a=1, b=0, c=1: E x(t) = x0 + t
        params = CIRParams(x0=0.5, a=1.0, b=0.0, c=1.0)
        paths = simulate_cir(params, 1.0, 1e-2, 2, n_paths=10000)
        term = paths[-1]
        se = term.std(ddof=1) / math.sqrt(term.size)
        assert abs(term.mean() - 1.5) < 3 * se

    def test_positivity_at_feller_boundary(self):
        # a = c: zero is unattainable; the exact sampler never touches it
        params = CIRParams(x0=0.5, a=1.0, b=0.0, c=1.0)
        paths = simulate_cir(params, 1.0, 1e-2, 3, n_paths=2000)
        assert params.positivity_holds(np.linspace(0, 1, 11))
        assert np.all(paths > 0.0)

    def test_exact_sampler_rejects_time_dependence(self):
        params = CIRParams(x0=0.5, a=lambda t: 1.0 + t, b=0.0, c=1.0)
        with pytest.raises(ValueError, match="constant coefficients"):
            simulate_cir(params, 1.0, 0.1, 4)

    def test_euler_mode_tracks_exact_mean(self):
        params = CIRParams(x0=1.0, a=1.0, b=1.0, c=0.5)
        exact = simulate_cir(params, 1.0, 1e-2, 5, n_paths=4000, method="exact")
        euler = simulate_cir(params, 1.0, 1e-3, 6, n_paths=4000, method="euler")
        se = exact[-1].std(ddof=1) / math.sqrt(4000) + euler[-1].std(ddof=1) / math.sqrt(4000)
        assert abs(exact[-1].mean() - euler[-1].mean()) < 3 * se + 5e-3

    def test_mean_reverting_exact_transition(self):
        # E x(t) = theta + (x0 - theta) e^{-b t}
        params = CIRParams(x0=2.0, a=1.5, b=3.0, c=0.25)
        paths = simulate_cir(params, 1.0, 0.05, 7, n_paths=20000)
        mean_ref = 0.5 + 1.5 * math.exp(-3.0)
        term = paths[-1]
        se = term.std(ddof=1) / math.sqrt(term.size)
        assert abs(term.mean() - mean_ref) < 3 * se


class TestSpreadReduction:
    def _run(self, params, build_init, spread0=0.2, seed=40):
        init = build_init(n_paths=1, spread0=spread0)
        return L.solve_paths(params, init, 1.0, 1e-3, seed=seed)

    def test_equality_at_the_condition_boundary(self):
        # rho = spread^+ with unit slope: a == c wherever the spread is
        # positive; the transient zero-spread touches are reported as
        # undefined rather than patched over
        params, build_init = canonical_spread_config(mu0=0.3)
        run = self._run(params, build_init)
        red = spread_reduction(run)
        spread = run.p_a[:, 0] - run.p_b[:, 0]
        assert np.array_equal(red.defined, spread > 0)
        assert red.all_defined == bool(np.all(spread > 0))
        assert red.frac_a_ge_c == 1.0
        defined = red.defined
        assert defined.sum() > 900
        assert np.allclose(red.a[defined], red.c[defined], rtol=1e-12)
        assert np.allclose(red.b[defined], 0.0)

    def test_doubled_slope_gives_strict_inequality(self):
        params, build_init = canonical_spread_config(mu0=0.3)
        params.rate_slope = {s: L.ConstantRate(2.0) for s in "ab"}
        run = self._run(params, build_init)
        red = spread_reduction(run)
        d = red.defined
        assert np.all(red.a[d] > red.c[d])
        assert np.allclose(red.a[d], 2.0 * red.c[d], rtol=1e-12)

    def test_zero_intensity_freezes_the_spread(self):
        params, build_init = canonical_spread_config(mu0=0.0)
        run = self._run(params, build_init)
        red = spread_reduction(run)
        d = red.defined
        assert np.allclose(red.a[d], 0.0) and np.allclose(red.c[d], 0.0)
        spread = run.p_a[:, 0] - run.p_b[:, 0]
        assert np.allclose(spread, spread[0])

    def test_undefined_where_spread_vanishes(self):
        params, build_init = canonical_spread_config(mu0=0.3)
        run = self._run(params, build_init)
        run.p_b[5] = run.p_a[5]  # force one degenerate slice
        red = spread_reduction(run)
        assert not red.defined[5]
        assert not red.all_defined


class TestClosedFormMu:
    def test_flat_price_gives_constant(self):
        mu = closed_form_mu_exponential(np.zeros(1001), 1e-3, 2.0, 1.5)
        assert np.max(np.abs(mu - 2.0)) < 1e-6

    def test_no_reversion_pure_exponential(self):
        p = np.full(1001, 0.7)
        t = np.linspace(0, 1, 1001)
        mu = closed_form_mu_exponential(p, 1e-3, 2.0, 0.0)
        assert np.allclose(mu, 2.0 * np.exp(0.49 * t), rtol=1e-9)

    def test_initial_value(self):
        mu = closed_form_mu_exponential(np.linspace(1, 2, 11), 0.1, 3.0, 0.7)
        assert mu[0] == pytest.approx(3.0)


class TestClosedFormBook:
    def test_unit_volume_is_fixed(self):
        x = np.linspace(-3, 3, 61)
        v0 = np.ones_like(x)
        surf = closed_form_book(x, v0, np.ones(101), 1e-2, ExponentialProfile(0.4, 1.0))
        assert np.allclose(surf, 1.0)

    def test_tails_frozen(self):
        x = np.linspace(-8, 8, 161)
        v0 = 1.0 + 0.5 * np.exp(-((x - 1.0) ** 2) / 4)
        surf = closed_form_book(x, v0, np.ones(201), 1e-2, ExponentialProfile(0.4, 1.0))
        # exp(-x^2) kills the exponent far out: the surface stays at v0
        assert np.allclose(surf[-1][np.abs(x) > 7], v0[np.abs(x) > 7], atol=1e-12)

    def test_zero_kernel_reduces_to_plain_exponential(self):
        x = np.array([0.0])
        v0 = np.array([1.5])
        p0 = 0.8
        n = 501
        surf = closed_form_book(x, v0, np.full(n, p0), 1e-3, ConstantProfile(0.0))
        t = 1e-3 * np.arange(n)
        ref = 1.0 + 0.5 * np.exp(-(p0**2) * t)
        assert np.allclose(surf[:, 0], ref, atol=1e-9)

    def test_resolvent_feedback_accelerates_decay(self):
        x = np.array([0.0])
        v0 = np.array([2.0])
        with_k = closed_form_book(x, v0, np.ones(301), 1e-2, ExponentialProfile(0.5, 1.0))
        without = closed_form_book(x, v0, np.ones(301), 1e-2, ConstantProfile(0.0))
        assert with_k[-1, 0] < without[-1, 0]


class TestVolatilityClustering:
    def test_self_excitation_positively_correlates_squares(self):
        params = OneSidedParams(sigma2=1.0, c=0.3, kappa=1.0, p0=1.0, barrier=5.0)
        rep = one_sided_volatility_clustering(
            params, t0=1.0, eps=0.1, lag=0.1, replicates=30000, seed=5
        )
        assert rep.covariance > 3.0 * rep.se
        assert rep.barrier_hits >= 0

    def test_geometric_benchmark_uncorrelated(self):
        params = OneSidedParams(sigma2=1.0, c=0.0, kappa=1.0, p0=1.0, barrier=5.0)
        rep = one_sided_volatility_clustering(
            params, t0=1.0, eps=0.1, lag=0.1, replicates=30000, seed=5
        )
        assert abs(rep.covariance) <= 3.0 * rep.se

    def test_covariance_decays_at_long_lags(self):
        params = OneSidedParams(sigma2=1.0, c=0.3, kappa=2.0, p0=1.0, barrier=5.0)
        short = one_sided_volatility_clustering(
            params, t0=1.0, eps=0.1, lag=0.1, replicates=40000, seed=6
        )
        long = one_sided_volatility_clustering(
            params, t0=1.0, eps=0.1, lag=2.5, replicates=40000, seed=6
        )
        assert long.covariance < short.covariance
        assert abs(long.covariance) <= 3.0 * long.se

    def test_validation(self):
        with pytest.raises(ValueError):
            OneSidedParams(sigma2=0.0, c=0.1, kappa=1.0, p0=1.0)
        with pytest.raises(ValueError):
            OneSidedParams(sigma2=1.0, c=-0.1, kappa=1.0, p0=1.0)
