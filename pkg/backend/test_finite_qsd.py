"""
Tests for the finite-state solver: semigroup, conditioned laws, Perron pair and Q-process
"""

import math

import numpy as np
import pytest
from scipy import linalg

from app.core.birth_death import BirthDeathRates
from app.core.errors import ReducibleChainError, SurvivalUnderflowError
from app.core.finite_qsd import (
    SubGenerator,
    conditioned_distribution,
    conditioned_path,
    extinction_rate_curve,
    left_perron_vector,
    point_mass,
    q_process,
    qsd_residual,
    solve_qsd_spectral,
    survival_probability,
    transition_matrix,
    uniform_killing_walk,
    validate_prob_vector,
    yaglom_distance_curve,
)


def small_generator() -> SubGenerator:
    return SubGenerator(entries=[[-3.0, 1.0, 1.0], [0.5, -1.0, 0.25], [0.2, 0.3, -2.0]])


def example2(lam: float) -> SubGenerator:
    """Linear birth-death chain (birth lam i, death i) reflected at 100"""
    return BirthDeathRates.linear(lam, 1.0).truncated_generator(100)


def taylor_expm(matrix: np.ndarray, t: float, terms: int = 60) -> np.ndarray:
    result = np.eye(matrix.shape[0])
    term = np.eye(matrix.shape[0])
    for k in range(1, terms):
        term = term @ matrix * (t / k)
        result += term
    return result


# --- generator validation ---------------------------------------------------

def test_generator_rejects_positive_row_sum():
    with pytest.raises(ValueError):
        SubGenerator(entries=[[-1.0, 2.0], [1.0, -2.0]])


def test_generator_rejects_negative_rates():
    with pytest.raises(ValueError):
        SubGenerator(entries=[[-1.0, -0.5], [1.0, -2.0]])


def test_generator_needs_a_killed_state():
    with pytest.raises(ValueError):
        SubGenerator(entries=[[-1.0, 1.0], [1.0, -1.0]])


def test_generator_kill_vector_and_labels():
    generator = small_generator()
    np.testing.assert_allclose(generator.kill, [1.0, 0.25, 1.5])
    assert generator.labels == ["1", "2", "3"]
    assert generator.is_irreducible()


def test_validate_prob_vector():
    np.testing.assert_allclose(validate_prob_vector([0.25, 0.75]), [0.25, 0.75])
    with pytest.raises(ValueError):
        validate_prob_vector([0.5, 0.6])
    with pytest.raises(ValueError):
        validate_prob_vector([1.5, -0.5])
    with pytest.raises(ValueError):
        validate_prob_vector([0.5, 0.5], dim=3)


# --- semigroup ----------------------------------------------------------------

def test_transition_matrix_matches_taylor_series():
    generator = small_generator()
    np.testing.assert_allclose(transition_matrix(generator, 0.3), taylor_expm(generator.entries, 0.3),
                               atol=1e-10)


def test_transition_matrix_long_time_matches_scipy():
    generator = small_generator()
    np.testing.assert_allclose(transition_matrix(generator, 20.0), linalg.expm(20.0 * generator.entries),
                               atol=1e-10)


def test_transition_matrix_semigroup_and_bounds():
    generator = uniform_killing_walk(10, 0.1)
    p_s = transition_matrix(generator, 1.5)
    p_t = transition_matrix(generator, 2.5)
    np.testing.assert_allclose(p_s @ p_t, transition_matrix(generator, 4.0), atol=1e-10)
    assert np.all(p_t >= 0) and np.all(p_t <= 1)
    assert np.all(p_t.sum(axis=1) <= 1 + 1e-12)
    np.testing.assert_array_equal(transition_matrix(generator, 0.0), np.eye(10))


def test_transition_matrix_rejects_negative_time():
    with pytest.raises(ValueError):
        transition_matrix(small_generator(), -1.0)


def test_conditioned_distribution_sums_to_one():
    law = conditioned_distribution(small_generator(), [1.0, 0.0, 0.0], 2.0)
    assert abs(law.sum() - 1.0) < 1e-12
    assert np.all(law >= 0)


def test_conditioned_distribution_underflow():
    generator = uniform_killing_walk(5, 1.0)
    with pytest.raises(SurvivalUnderflowError):
        conditioned_distribution(generator, point_mass(5, 1), 1000.0)


def test_conditioned_path_tracks_log_survival_past_underflow():
    generator = uniform_killing_walk(5, 1.0)
    times = np.linspace(0.0, 1000.0, 101)
    laws, log_survival = conditioned_path(generator, point_mass(5, 1), times)
    # uniform killing: survival is exactly exp(-d t)
    np.testing.assert_allclose(log_survival, -times, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(laws[-1], np.full(5, 0.2), atol=1e-10)


def test_survival_probability_uniform_killing():
    survival, log_survival = survival_probability(uniform_killing_walk(4, 0.3), [0.25] * 4, 2.0)
    assert math.isclose(survival, math.exp(-0.6), rel_tol=1e-10)
    assert math.isclose(log_survival, -0.6, rel_tol=1e-10)


# --- Perron pair ----------------------------------------------------------------

def test_spectral_solution_satisfies_qsd_equation():
    generator = small_generator()
    result = solve_qsd_spectral(generator)
    assert abs(result.alpha.sum() - 1.0) < 1e-12
    assert np.all(result.alpha > 0) and np.all(result.pi > 0)
    np.testing.assert_allclose(result.alpha @ generator.entries, -result.theta * result.alpha, atol=1e-10)
    np.testing.assert_allclose(generator.entries @ result.pi, -result.theta * result.pi, atol=1e-10)
    assert abs(result.alpha @ result.pi - 1.0) < 1e-10
    theta, residual = qsd_residual(generator, result.alpha)
    assert abs(theta - result.theta) < 1e-10
    assert residual < 1e-10


def test_spectral_theta_matches_dense_eigenvalues():
    generator = small_generator()
    eigenvalues = np.sort(linalg.eigvals(generator.entries).real)[::-1]
    result = solve_qsd_spectral(generator)
    assert abs(result.theta + eigenvalues[0]) < 1e-10
    assert abs(result.chi + eigenvalues[1]) < 1e-8


@pytest.mark.parametrize("dim", [2, 3, 4, 5])
def test_spectral_rates_match_characteristic_polynomial_roots(dim):
    rng = np.random.default_rng(100 + dim)
    generator = SubGenerator.from_rates(rng.uniform(0.1, 2.0, (dim, dim)), rng.uniform(0.1, 1.0, dim))
    roots = np.roots(np.poly(generator.entries))
    real_parts = np.sort(roots.real)[::-1]
    result = solve_qsd_spectral(generator)
    assert result.theta == pytest.approx(-real_parts[0], rel=1e-8)
    assert result.chi == pytest.approx(-real_parts[1], rel=1e-6)


def test_reducible_chain_is_rejected_at_construction():
    with pytest.raises(ReducibleChainError):
        SubGenerator(entries=[[-1.0, 0.0], [0.0, -2.0]])
    # one-way coupling: 1 reaches 2 but 2 never returns
    with pytest.raises(ReducibleChainError):
        SubGenerator.from_rates(np.array([[0.0, 1.0], [0.0, 0.0]]), [0.0, 1.0])


def test_single_state():
    result = solve_qsd_spectral(SubGenerator(entries=[[-0.7]]))
    assert result.theta == pytest.approx(0.7)
    np.testing.assert_array_equal(result.alpha, [1.0])


def test_first_example_relaxation_rate_ten_states():
    result = solve_qsd_spectral(uniform_killing_walk(10, 0.001))
    assert result.gap == pytest.approx(2 * (1 - math.cos(math.pi / 10)), abs=1e-8)
    assert abs(result.gap - 0.098) < 0.001


def test_first_example_hundred_states():
    result = solve_qsd_spectral(uniform_killing_walk(100, 0.001))
    assert result.theta == pytest.approx(0.001, abs=1e-12)
    assert 0.5 * np.abs(result.alpha - 0.01).sum() < 1e-10
    assert result.gap == pytest.approx(2 * (1 - math.cos(math.pi / 100)), rel=1e-6)


def test_large_tridiagonal_generator():
    result = solve_qsd_spectral(uniform_killing_walk(1000, 0.01))
    assert result.theta == pytest.approx(0.01, abs=1e-10)
    np.testing.assert_allclose(result.alpha, np.full(1000, 1e-3), atol=1e-9)
    assert result.gap == pytest.approx(2 * (1 - math.cos(math.pi / 1000)), rel=1e-4)


def test_left_perron_vector_agrees_with_pair():
    generator = example2(0.9)
    alpha, theta = left_perron_vector(generator)
    result = solve_qsd_spectral(generator)
    assert theta == pytest.approx(result.theta, abs=1e-10)
    assert 0.5 * np.abs(alpha - result.alpha).sum() < 1e-8


@pytest.mark.parametrize("lam, theta, tol", [(0.9, 0.100, 0.001), (1.0, 0.014, 0.001), (1.1, 5.84e-5, 2e-6)])
def test_second_example_decay_rates(lam, theta, tol):
    result = solve_qsd_spectral(example2(lam))
    assert abs(result.theta - theta) < tol


@pytest.mark.parametrize("lam, gap", [(0.9, 0.102), (1.1, 0.103)])
def test_second_example_spectral_gap(lam, gap):
    result = solve_qsd_spectral(example2(lam))
    assert abs(result.gap - gap) < 0.002


def test_absorption_matrix_drives_long_time_semigroup():
    generator = uniform_killing_walk(10, 0.05)
    result = solve_qsd_spectral(generator)
    t = 400.0
    np.testing.assert_allclose(transition_matrix(generator, t) * math.exp(result.theta * t),
                               result.absorption_matrix, rtol=1e-6)


# --- extinction curves and the Q-process -----------------------------------------

def test_extinction_rate_plateau():
    generator = example2(1.1)
    result = solve_qsd_spectral(generator)
    grid = np.linspace(0.0, 400.0, 401)
    rates = extinction_rate_curve(generator, point_mass(100, 1), grid)
    assert rates[0] == pytest.approx(1.0)
    late = grid > 10.0 / result.gap
    assert np.abs(rates[late] - result.theta).max() < 1e-3


def test_extinction_rate_matches_survival_slope():
    generator = small_generator()
    init = [0.2, 0.5, 0.3]
    grid = np.linspace(0.0, 3.0, 3001)
    rates = extinction_rate_curve(generator, init, grid)
    _, log_survival = conditioned_path(generator, init, grid)
    slope = -np.gradient(log_survival, grid)
    np.testing.assert_allclose(rates[1:-1], slope[1:-1], atol=1e-4)


def test_yaglom_distance_curve_decreases_to_zero():
    generator = uniform_killing_walk(10, 0.001)
    result = solve_qsd_spectral(generator)
    frame = yaglom_distance_curve(generator, point_mass(10, 1), np.linspace(0.0, 300.0, 31), result.alpha)
    assert list(frame.columns) == ["t", "survival", "neg_log_survival", "sup_distance"]
    assert frame["sup_distance"].iloc[0] == pytest.approx(0.9)
    assert frame["sup_distance"].iloc[-1] < 1e-10
    # relaxation long before extinction
    assert frame["neg_log_survival"].iloc[-1] < 0.5


def test_yaglom_distance_decays_at_the_spectral_gap():
    generator = uniform_killing_walk(10, 0.05)
    result = solve_qsd_spectral(generator)
    times = np.linspace(30.0, 150.0, 25)
    frame = yaglom_distance_curve(generator, point_mass(10, 1), times, result.alpha)
    log_distance = np.log(frame["sup_distance"].to_numpy())
    slope = np.polyfit(times, log_distance, 1)[0]
    assert slope == pytest.approx(-result.gap, abs=1e-3)
    scaled = frame["sup_distance"].to_numpy() * np.exp(result.gap * times)
    np.testing.assert_allclose(scaled, scaled[-1], rtol=1e-2)


def test_q_process_generator_and_stationary_law():
    generator = example2(0.9)
    result = solve_qsd_spectral(generator)
    process = q_process(result, generator)
    assert np.abs(process.generator.sum(axis=1)).max() < 1e-10
    assert np.abs(process.stationary @ process.generator).max() < 1e-10
    assert 0.5 * np.abs(process.stationary - result.alpha).sum() > 0.01
    transition = process.transition_matrix(5.0)
    np.testing.assert_allclose(transition.sum(axis=1), np.ones(100), atol=1e-8)
