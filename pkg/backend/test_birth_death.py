"""
Tests for birth-death chains: series criteria, H-polynomials, xi_1, QSD families and simulation
"""

import math
from fractions import Fraction

import numpy as np
import pytest

from app.core.birth_death import (
    BirthDeathRates,
    QsdRegime,
    SeriesBehaviour,
    Verdict,
    absorption_time,
    classify_qsd,
    extinction_check,
    h_polynomials,
    nonexplosion_check,
    pi_coefficients,
    qsd_family_point,
    qsd_system_residual,
    series_S_check,
    simulate_bd_endpoints,
    simulate_bd_path,
    truncated_qsd,
    xi1_estimate,
)
from app.core.errors import EventCapExceededError
from app.core.finite_qsd import conditioned_distribution, point_mass


def random_table(rng: np.random.Generator, n: int) -> BirthDeathRates:
    return BirthDeathRates.table(rng.uniform(0.5, 2.0, n), rng.uniform(0.5, 2.0, n))


def exact_h(lambdas, mus, x, n):
    """H_1..H_n in rational arithmetic"""
    values = [Fraction(1)]
    previous = Fraction(0)
    for k in range(n - 1):
        lam, mu = Fraction(lambdas[k]), Fraction(mus[k])
        nxt = ((lam + mu - x) * values[-1] - mu * previous) / lam
        previous = values[-1]
        values.append(nxt)
    return values


# --- rates --------------------------------------------------------------------

def test_logistic_rates_and_charge_capacity():
    rates = BirthDeathRates.logistic(10.0, 1.0, 1.0)
    lam, mu = rates.rates(3)
    np.testing.assert_allclose(lam, [10.0, 20.0, 30.0])
    np.testing.assert_allclose(mu, [1.0, 4.0, 9.0])
    assert rates.charge_capacity == 9.0
    assert BirthDeathRates.linear(1.0, 2.0).charge_capacity is None


def test_rates_must_be_positive():
    with pytest.raises(ValueError):
        BirthDeathRates.table([1.0, 1.0], [1.0, 0.0]).rates(2)


def test_table_rates_beyond_the_table():
    with pytest.raises(ValueError):
        BirthDeathRates.table([1.0, 1.0], [1.0, 1.0]).rates(3)


def test_truncated_generator_structure():
    generator = BirthDeathRates.linear(2.0, 1.0).truncated_generator(4)
    entries = generator.entries
    assert entries[0, 1] == 2.0 and entries[1, 0] == 2.0
    assert entries[3, 2] == 4.0
    # no births out of the last state, killing only from state 1
    assert entries[3].sum() == 0.0
    np.testing.assert_allclose(generator.kill, [1.0, 0.0, 0.0, 0.0])


def test_pi_coefficients_linear():
    log_pi = pi_coefficients(BirthDeathRates.linear(0.5, 1.0), 5)
    expected = [0.5 ** (n - 1) / n for n in range(1, 6)]
    np.testing.assert_allclose(np.exp(log_pi), expected, rtol=1e-12)


# --- series criteria ----------------------------------------------------------

def test_linear_chain_does_not_explode():
    verdict = nonexplosion_check(BirthDeathRates.linear(2.0, 1.0))
    assert verdict.verdict == Verdict.HOLDS.value


def test_quadratic_births_explode():
    rates = BirthDeathRates(birth=lambda i: np.asarray(i, dtype=float) ** 2,
                            death=lambda i: np.ones_like(np.asarray(i, dtype=float)))
    verdict = nonexplosion_check(rates)
    assert verdict.verdict == Verdict.FAILS.value
    assert verdict.behaviour == SeriesBehaviour.CONVERGENT


def test_subcritical_extinction_is_certain():
    verdict = extinction_check(BirthDeathRates.linear(0.5, 1.0))
    assert verdict.verdict == Verdict.HOLDS.value
    assert verdict.extinction_probabilities is None


def test_supercritical_extinction_probabilities():
    verdict = extinction_check(BirthDeathRates.linear(2.0, 1.0), n_report=10)
    assert verdict.verdict == Verdict.FAILS.value
    np.testing.assert_allclose(verdict.extinction_probabilities, 0.5 ** np.arange(1, 11), rtol=1e-10)


def test_series_S_logistic_converges():
    verdict = series_S_check(BirthDeathRates.logistic(10.0, 1.0, 1.0))
    assert verdict.behaviour == SeriesBehaviour.CONVERGENT
    assert verdict.verdict == Verdict.HOLDS.value


def test_series_S_linear_diverges():
    verdict = series_S_check(BirthDeathRates.linear(0.5, 1.0))
    assert verdict.behaviour == SeriesBehaviour.DIVERGENT


# --- H-polynomials and xi_1 ---------------------------------------------------

def test_h_polynomials_match_rational_recursion():
    lambdas = [2 + (k % 3) for k in range(30)]
    mus = [3 + (k % 2) for k in range(30)]
    rates = BirthDeathRates.table(lambdas, mus)
    table = h_polynomials(rates, 0.5, n_max=30)
    exact = np.array([float(v) for v in exact_h(lambdas, mus, Fraction(1, 2), 30)])
    np.testing.assert_allclose(table.values, exact, rtol=1e-9, atol=1e-9 * np.abs(exact).max())
    assert table.recursion_residual().max() < 1e-12


def test_h_polynomials_survive_rescaling():
    table = h_polynomials(BirthDeathRates.linear(0.5, 1.0), 0.1, n_max=2000)
    assert table.first_nonpositive() is None
    assert np.all(np.isfinite(table.log_abs))
    assert table.log_abs[-1] > 1000
    assert table.recursion_residual().max() < 1e-10


def test_h_polynomials_change_sign_above_xi1():
    table = h_polynomials(BirthDeathRates.linear(0.5, 1.0), 0.8, n_max=200)
    assert table.first_nonpositive() is not None
    assert table.sign_changes() >= 1


def test_xi1_linear_closed_form():
    bracket = xi1_estimate(BirthDeathRates.linear(0.5, 1.0))
    assert bracket.resolved
    assert bracket.hi - bracket.lo <= 1e-6
    assert abs(bracket.mid - 0.5) < 1e-3


def test_xi1_bracket_shrinks_as_more_polynomials_are_checked():
    rates = BirthDeathRates.logistic(10.0, 1.0, 1.0)
    brackets = [xi1_estimate(rates, n, tol=1e-12) for n in (25, 50, 100, 200)]
    # positivity up to 2n implies positivity up to n
    for smaller, larger in zip(brackets, brackets[1:]):
        assert larger.hi <= smaller.hi + 1e-11
    assert all(b.resolved for b in brackets)


def test_xi1_is_the_yaglom_extinction_rate_for_logistic_rates():
    rates = BirthDeathRates.logistic(10.0, 1.0, 1.0)
    result = truncated_qsd(rates, 60, check_sensitivity=False).result
    assert result.theta == pytest.approx(float(rates.death(1)) * result.alpha[0], rel=1e-8)
    bracket = xi1_estimate(rates, 200, tol=1e-12)
    assert abs(bracket.mid - result.theta) <= 1e-4 * result.theta + 1e-10


# --- classification -------------------------------------------------------------

def test_classify_linear_subcritical_is_a_continuum():
    classification = classify_qsd(BirthDeathRates.linear(0.5, 1.0))
    assert classification.qsd_regime == QsdRegime.CONTINUUM
    assert abs(classification.xi1 - 0.5) < 1e-3
    summary = classification.summary()
    assert summary["qsd_regime"] == "continuum"
    assert summary["extinction"] == "holds"


def test_classify_logistic_has_unique_yaglom_limit():
    classification = classify_qsd(BirthDeathRates.logistic(10.0, 1.0, 1.0))
    assert classification.qsd_regime == QsdRegime.UNIQUE_YAGLOM
    assert classification.series_S.behaviour == SeriesBehaviour.CONVERGENT
    assert classification.xi1 > 0


def test_classify_supercritical_has_no_qsd():
    classification = classify_qsd(BirthDeathRates.linear(2.0, 1.0))
    assert classification.qsd_regime == QsdRegime.NONE
    assert classification.xi1 == 0.0
    with pytest.raises(ValueError):
        classification.family_point(0.1)


def test_classify_critical_has_no_qsd():
    classification = classify_qsd(BirthDeathRates.linear(1.0, 1.0))
    assert classification.qsd_regime == QsdRegime.NONE


# --- QSD family and truncated QSD ---------------------------------------------

def test_family_point_solves_qsd_system():
    rates = BirthDeathRates.linear(0.5, 1.0)
    point = qsd_family_point(rates, 0.25, n_max=1000, xi1=0.5)
    assert point.theta == 0.25
    assert point.alpha[0] == pytest.approx(0.25)
    # the continuum members have polynomial tails, so truncation keeps only part of the mass
    assert 0.5 < point.mass < 1.0
    assert not point.complete
    assert np.abs(qsd_system_residual(rates, point.alpha)).max() < 1e-10


def test_minimal_family_point_keeps_all_its_mass():
    point = qsd_family_point(BirthDeathRates.linear(0.5, 1.0), 0.5, n_max=200, xi1=0.5)
    assert point.complete
    assert point.mass == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(point.alpha[:20], 0.5 ** np.arange(1, 21), rtol=1e-6)


def test_truncated_family_point_logs_warning(caplog):
    with caplog.at_level("WARNING", logger="qsd-birth-death"):
        qsd_family_point(BirthDeathRates.linear(0.5, 1.0), 0.25, n_max=1000, xi1=0.5)
    assert "tail is truncated" in caplog.text


def test_family_point_outside_range():
    with pytest.raises(ValueError):
        qsd_family_point(BirthDeathRates.linear(0.5, 1.0), 0.6, xi1=0.5)


def test_truncated_linear_qsd_is_geometric():
    truncated = truncated_qsd(BirthDeathRates.linear(0.5, 1.0), 400)
    geometric = 0.5 ** np.arange(1, 401)
    assert 0.5 * np.abs(truncated.result.alpha - geometric).sum() < 1e-3
    assert abs(truncated.result.theta - 0.5) < 1e-3
    assert truncated.sensitivity < 1e-3


def test_truncated_logistic_qsd_mode_near_charge_capacity():
    truncated = truncated_qsd(BirthDeathRates.logistic(10.0, 1.0, 1.0), 60)
    mode = int(np.argmax(truncated.result.alpha)) + 1
    assert mode in (8, 9, 10)
    assert truncated.sensitivity < 1e-8


def test_truncation_must_exceed_charge_capacity():
    with pytest.raises(ValueError):
        truncated_qsd(BirthDeathRates.logistic(10.0, 1.0, 1.0), 9)


def test_random_tables_satisfy_qsd_system():
    rng = np.random.default_rng(12345)
    for _ in range(50):
        n = 12
        rates = random_table(rng, n)
        result = truncated_qsd(rates, n, check_sensitivity=False).result
        alpha = result.alpha
        lam, mu = rates.rates(n)

        assert np.abs(qsd_system_residual(rates, alpha)).max() <= 1e-8
        assert abs(result.theta - mu[0] * alpha[0]) <= 1e-8

        table = h_polynomials(rates, mu[0] * alpha[0], n_max=n)
        predicted = alpha[0] * np.exp(pi_coefficients(rates, n)) * table.values
        np.testing.assert_allclose(predicted, alpha, rtol=1e-6)


# --- simulation -------------------------------------------------------------------

def test_path_is_reproducible_and_nearest_neighbour():
    rates = BirthDeathRates.linear(0.5, 1.0)
    first = simulate_bd_path(rates, 5, 1000.0, seed=11)
    second = simulate_bd_path(rates, 5, 1000.0, seed=11)
    assert first.equals(second)
    assert list(first.columns) == ["t", "state"]
    assert np.all(np.abs(np.diff(first["state"].to_numpy())) <= 1)
    assert np.all(np.diff(first["t"].to_numpy()) >= 0)
    assert first["state"].iloc[-1] == 0
    assert absorption_time(first) < 1000.0


def test_path_from_zero_stays_absorbed():
    path = simulate_bd_path(BirthDeathRates.linear(0.5, 1.0), 0, 5.0, seed=1)
    assert path["state"].tolist() == [0, 0]
    assert absorption_time(path) == 0.0


def test_surviving_path_has_infinite_absorption_time():
    path = simulate_bd_path(BirthDeathRates.logistic(10.0, 1.0, 1.0), 9, 1.0, seed=3)
    assert path["t"].iloc[-1] == 1.0
    assert math.isinf(absorption_time(path))


def test_event_cap():
    with pytest.raises(EventCapExceededError):
        simulate_bd_path(BirthDeathRates.linear(2.0, 1.0), 50, 1e6, seed=2, max_events=100)


def test_endpoint_ensemble_extinction_probability():
    lam, mu, t = 0.5, 1.0, 2.0
    growth = math.exp((lam - mu) * t)
    # P_1(Z_t = 0) for the linear chain
    exact = mu * (growth - 1.0) / (lam * growth - mu)
    n_paths = 20000
    endpoints = simulate_bd_endpoints(BirthDeathRates.linear(lam, mu), 1, t, n_paths, seed=5)
    estimate = np.mean(endpoints == 0)
    assert abs(estimate - exact) < 4 * math.sqrt(exact * (1 - exact) / n_paths)


def test_surviving_endpoints_follow_the_conditioned_law():
    rates = BirthDeathRates.logistic(10.0, 1.0, 1.0)
    endpoints = simulate_bd_endpoints(rates, 1, 5.0, 40000, seed=21)
    survivors = endpoints[endpoints > 0]
    empirical = np.bincount(survivors, minlength=61)[1:61] / survivors.size
    generator = rates.truncated_generator(60)
    exact = conditioned_distribution(generator, point_mass(60, 1), 5.0)
    assert 0.5 * np.abs(empirical - exact).sum() <= 0.02


def test_escape_frequency_matches_extinction_probability():
    rates = BirthDeathRates.linear(2.0, 1.0)
    # from 60 the chain dies with probability 2^-60, so capped paths count as escaped
    endpoints = simulate_bd_endpoints(rates, 2, 200.0, 20000, seed=13, z_cap=60)
    assert set(np.unique(endpoints)) <= {0, 60}
    exact = extinction_check(rates, n_report=2).extinction_probabilities[1]
    assert exact == pytest.approx(0.25)
    assert abs(np.mean(endpoints == 0) - exact) < 0.015


def test_pure_death_absorption_time_is_harmonic():
    mu, z0, n_paths = 2.0, 10, 4000
    rates = BirthDeathRates(birth=lambda i: 0.0 * i, death=lambda i: mu * i)
    times = [absorption_time(simulate_bd_path(rates, z0, 100.0, seed=k)) for k in range(n_paths)]
    harmonic = sum(1.0 / (mu * k) for k in range(1, z0 + 1))
    assert abs(np.mean(times) - harmonic) < 0.05
