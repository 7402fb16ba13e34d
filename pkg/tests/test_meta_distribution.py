import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import betainc, binom

from config import DEFAULT_NETWORK, validate, validate_simulation
from errors import NumericalError
from meta_distribution import (LoadGeometry, LoadMeasure, MetaDistribution, MetaKind, beta_log_cf,
                               beta_meta, complex_binomial, exact_meta_cdf, gil_pelaez_cdf,
                               initial_eta, kolmogorov_distance, match_beta, moments_from_eta)
from simulator import U_GRID, estimate_mu_cdf, simulate_network


def _network(**overrides):
    return validate({**DEFAULT_NETWORK, **overrides})


# -------------------------------------------------------------------
# moment matching
# -------------------------------------------------------------------
def test_match_beta_reference_pair():
    a, b = match_beta(0.7, 0.5)
    assert a == pytest.approx(14.0)
    assert b == pytest.approx(6.0)


def test_matched_beta_reproduces_moments():
    gen = np.random.default_rng(42)
    for _ in range(100):
        m = gen.uniform(0.05, 0.95)
        v = gen.uniform(0.01, 0.99) * m * (1.0 - m)
        c2 = v + m * m
        meta = MetaDistribution.from_moments(m, c2)
        mean, var = stats.beta.stats(meta.shape_a, meta.shape_b, moments="mv")
        assert float(mean) == pytest.approx(m, abs=1e-9)
        assert float(var) + float(mean) ** 2 == pytest.approx(c2, abs=1e-9)


def test_zero_variance_is_degenerate():
    assert match_beta(0.8, 0.64) is None
    meta = MetaDistribution.from_moments(0.8, 0.64)
    assert meta.kind is MetaKind.DEGENERATE
    np.testing.assert_array_equal(meta.cdf([0.79, 0.8, 0.81]), [0.0, 1.0, 1.0])


def test_impossible_moments_raise():
    with pytest.raises(NumericalError):
        match_beta(0.5, 0.6)


def test_beta_parameters():
    meta = MetaDistribution.beta(14.0, 6.0)
    assert meta.beta_kappa == pytest.approx(0.7)
    assert meta.beta_beta == 6.0
    assert meta.shape_a == pytest.approx(meta.beta_kappa * meta.beta_beta / (1.0 - meta.beta_kappa))


# -------------------------------------------------------------------
# activity moments
# -------------------------------------------------------------------
@pytest.mark.parametrize("k", [1, 2])
def test_activity_moment_closed_form_matches_stieltjes_sum(k):
    beta = MetaDistribution.beta(14.0, 6.0)
    u = np.linspace(0.0, 1.0, 4001)
    tab = MetaDistribution.tabulated(u, beta.cdf(u), beta.moments)
    h = np.array([0.0, 0.2, 0.5, 0.7, 0.9, 1.0, 3.0, np.inf])
    np.testing.assert_allclose(beta.activity_moment(h, k), tab.activity_moment(h, k), atol=2e-3)


def test_activity_moment_degenerate():
    meta = MetaDistribution.degenerate(0.5)
    np.testing.assert_allclose(meta.activity_moment([0.1, 0.5, 2.0], 2), [0.04, 1.0, 1.0])


def test_activity_moment_small_shape_uses_sum():
    meta = MetaDistribution.beta(0.8, 3.0)
    value = meta.activity_moment(np.array([0.3]), 1)
    assert 0.0 < value[0] <= 1.0


# -------------------------------------------------------------------
# load integrals
# -------------------------------------------------------------------
def test_initial_eta_closed_form():
    config = _network()
    delta = config.delta
    expected = (2.0 * math.pi ** 2 * config.theta ** delta * 0.18 / (3.8 * math.sin(math.pi * delta)))
    assert initial_eta(config, 1) == pytest.approx(expected)
    assert initial_eta(config, 2) == pytest.approx(abs(binom(delta - 1.0, 1)) * expected * 0.18)
    assert 0.0 < initial_eta(config, 2) < initial_eta(config, 1)


def test_moments_from_eta_have_valid_variance():
    config = _network()
    c1, c2 = moments_from_eta(config, initial_eta(config, 1), initial_eta(config, 2))
    assert 0.0 < c2 <= c1 <= 1.0
    assert c2 >= c1 ** 2


def test_binned_measure_preserves_first_order_load():
    config = _network(link_distance_m=25.0)
    geometry = LoadGeometry(config, 32, 64)
    u = np.linspace(0.0, 1.0, 401)
    meta = MetaDistribution.tabulated(u, stats.beta.cdf(u, 20.0, 3.0), (0.87, 0.76))
    measure = geometry.load_measure(meta)
    assert measure.eta(1) == pytest.approx(geometry.eta(meta, 1), rel=1e-8)
    assert measure.eta(2) == pytest.approx(geometry.eta(meta, 2), rel=2e-2)


def test_complex_binomial_matches_recurrence():
    s = np.array([0.3j, 1.7j, 2.5 + 0.1j])
    table = complex_binomial(s, 8)
    for row, value in zip(table, s):
        expected, term = [], 1.0 + 0j
        for k in range(1, 9):
            term = term * (value - k + 1) / k
            expected.append(term)
        np.testing.assert_allclose(row, expected, rtol=1e-10)


def test_series_matches_direct_exponent_for_small_argument():
    x = np.array([0.05, 0.2, 0.4, 0.6])
    measure = LoadMeasure(x, -np.log1p(-x), np.array([1.0, 0.5, 0.25, 0.1]))
    s = np.array([0.5j, 1.0j])
    np.testing.assert_allclose(measure.series_exponent(s, 80), measure.exponent(s), atol=1e-9)
    # integer order gives the exact moments
    assert measure.exponent(2.0)[0].real == pytest.approx(np.sum(measure.w * (1 - (1 - x) ** 2)))


# -------------------------------------------------------------------
# inversion
# -------------------------------------------------------------------
def test_gil_pelaez_recovers_beta_cdf():
    log_cf, mean, std = beta_log_cf(14.0, 6.0)
    u = np.linspace(0.01, 0.99, 99)
    F = gil_pelaez_cdf(log_cf, u, mean, std)
    assert np.max(np.abs(F - stats.beta.cdf(u, 14.0, 6.0))) < 1e-3


def test_gil_pelaez_near_point_mass_is_a_step():
    log_cf, mean, std = beta_log_cf(4000.0, 1000.0)
    F = gil_pelaez_cdf(log_cf, np.array([0.7, 0.77, 0.83, 0.9]), mean, std)
    assert F[0] < 0.01 and F[1] < 0.01
    assert F[2] > 0.99 and F[3] > 0.99


def test_gil_pelaez_reports_unsettled_integral():
    log_cf, mean, std = beta_log_cf(14.0, 6.0)
    with pytest.raises(NumericalError, match="beta method"):
        gil_pelaez_cdf(log_cf, np.array([0.5, 0.7]), mean, std, tol=1e-14, max_doublings=2)



def test_expectation_near_singular_upper_endpoint():
    a, b = 5.2, 0.16
    meta = MetaDistribution.beta(a, b)
    values, below = meta.expect(lambda t: np.stack([np.ones_like(t), t]), 0.5)
    assert below == pytest.approx(stats.beta.cdf(0.5, a, b))
    assert values[0] == pytest.approx(1.0 - below, rel=1e-6)
    assert values[1] == pytest.approx(a / (a + b) * (1.0 - betainc(a + 1.0, b, 0.5)), rel=1e-6)


# -------------------------------------------------------------------
# fixed points
# -------------------------------------------------------------------
def test_no_interferers_gives_point_mass():
    config = _network().replace(lam=0.0)
    for meta in (beta_meta(config), exact_meta_cdf(config)):
        assert meta.kind is MetaKind.DEGENERATE
        assert meta.point == pytest.approx(math.exp(-config.noise_term))


def test_beta_meta_converges_quickly_and_agrees_with_ps():
    from analytic import solve_ps

    config = _network()
    meta = beta_meta(config)
    assert meta.kind is MetaKind.BETA
    assert meta.iterations_used <= 10
    assert meta.converged_residual < 1e-6
    c1, c2 = meta.moments
    assert 0.0 < c2 <= c1 <= 1.0 and c2 >= c1 ** 2
    assert abs(c1 - solve_ps(config).p_s) <= 0.03


def test_beta_meta_ordered_in_update_rate():
    cdfs = [beta_meta(_network(link_distance_m=25.0, xi=xi)).cdf(U_GRID) for xi in (0.1, 0.3, 0.5)]
    assert np.all(cdfs[2] >= cdfs[1] - 1e-9)
    assert np.all(cdfs[1] >= cdfs[0] - 1e-9)


def test_picard_iteration_limit():
    with pytest.raises(NumericalError, match="did not converge"):
        beta_meta(_network(), tol=0.0, max_iterations=3)


def test_tabulated_cdf_shape():
    u = np.linspace(0.0, 1.0, 11)
    meta = MetaDistribution.tabulated(u, [0.0, 0.1, 0.05, 0.3, 0.5, 0.5, 0.7, 1.2, 0.9, 0.95, 0.99],
                                      (0.6, 0.4))
    assert meta.cdf_F[0] == 0.0 and meta.cdf_F[-1] == 1.0
    assert np.all(np.diff(meta.cdf_F) >= 0.0)
    assert kolmogorov_distance(meta.cdf(u), meta.cdf_F) == 0.0


@pytest.mark.slow
def test_exact_meta_close_to_beta():
    config = _network(link_distance_m=25.0)
    exact = exact_meta_cdf(config)
    beta = beta_meta(config)
    assert exact.kind is MetaKind.TABULATED
    assert kolmogorov_distance(exact.cdf(U_GRID), beta.cdf(U_GRID)) <= 0.03
    assert abs(exact.moments[0] - beta.moments[0]) <= 0.03


@pytest.mark.slow
def test_simulated_success_law_against_beta_fit():
    sim = validate_simulation({"slots": 20000, "warmup_slots": 4000, "realizations": 10, "seed": 11})
    gaps, sim_means = [], []
    for xi in (0.1, 0.3, 0.5):
        config = _network(link_distance_m=25.0, xi=xi, area_km2=1.0)
        meta = beta_meta(config)
        results = simulate_network(config, sim)
        measured = estimate_mu_cdf(config, sim, results=results)
        mu_mean = float(np.nanmean(results.mu_hat))
        assert mu_mean == pytest.approx(meta.moments[0], abs=0.03)
        gaps.append(kolmogorov_distance(measured.F, meta.cdf(U_GRID)))
        sim_means.append(mu_mean)
    assert gaps[0] <= 0.06
    # the fitted Beta puts too much mass just below 1 at higher update rates
    assert max(gaps) <= 0.2
    assert sim_means[0] > sim_means[1] > sim_means[2]
