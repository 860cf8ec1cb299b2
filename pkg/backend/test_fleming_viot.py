"""
Tests for the Fleming-Viot particle system and empirical-measure distances
"""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from app.core.birth_death import BirthDeathRates
from app.core.diffusion import FellerParams, ScalarDiffusion, discretize_generator, feller_to_kolmogorov
from app.core.errors import EnsembleCollapseError, EventCapExceededError
from app.core.finite_qsd import solve_qsd_spectral, uniform_killing_walk
from app.core.fleming_viot import (
    EmpiricalMeasure,
    KilledDynamics,
    RateTree,
    _revival_donor,
    _revive,
    average_measures,
    distance,
    fv_distance_curve,
    fv_extinction_rate,
    fv_run,
    fv_yaglom_estimate,
    xi1_from_fv,
)
from app.core.random_streams import replica_seed


# --- rate tree ------------------------------------------------------------------------

def test_rate_tree_matches_cumulative_sums():
    rng = np.random.default_rng(7)
    rates = rng.uniform(0.1, 3.0, 37)
    tree = RateTree(rates)
    cumulative = np.cumsum(rates)
    assert tree.total == pytest.approx(cumulative[-1])
    for i in range(rates.size):
        assert tree.find(cumulative[i] - rates[i] / 2) == i

    rates[5] = 0.0
    rates[20] = 10.0
    tree.update(5, 0.0)
    tree.update(20, 10.0)
    cumulative = np.cumsum(rates)
    assert tree.total == pytest.approx(cumulative[-1])
    for i in np.flatnonzero(rates > 0):
        assert tree.find(cumulative[i] - rates[i] / 2) == i


def test_rate_tree_top_target():
    tree = RateTree([1.0, 1.0, 1.0])
    assert tree.find(2.999999) == 2
    assert tree.find(0.0) == 0


# --- revivals -------------------------------------------------------------------------

def test_revival_donor_is_uniform_over_the_other_particles():
    assert [_revival_donor(0, 2, u) for u in (0.0, 0.5, 0.999)] == [1, 1, 1]
    assert [_revival_donor(1, 2, u) for u in (0.0, 0.5, 0.999)] == [0, 0, 0]
    assert [_revival_donor(2, 5, (k + 0.5) / 4) for k in range(4)] == [0, 1, 3, 4]


def test_killed_particle_takes_the_survivor_position():
    positions = np.array([0.0, 3.5])
    donors = _revive(positions, np.array([True, False]), np.random.default_rng(1))
    np.testing.assert_array_equal(positions, [3.5, 3.5])
    assert donors.tolist() == [1, -1]


def test_simultaneous_kills_revive_onto_living_particles():
    for seed in range(20):
        positions = np.array([0.0, 0.0, 5.0])
        donors = _revive(positions, np.array([True, True, False]), np.random.default_rng(seed))
        np.testing.assert_array_equal(positions, [5.0, 5.0, 5.0])
        assert donors[2] == -1
        assert donors[0] != 0 and donors[1] != 1
        # the first particle revived can only copy the survivor
        assert 2 in donors[:2]

    rows = np.array([[0.0, 0.0], [1.0, 2.0]])
    _revive(rows, np.array([True, False]), np.random.default_rng(0))
    np.testing.assert_array_equal(rows, [[1.0, 2.0], [1.0, 2.0]])


# --- empirical measures ---------------------------------------------------------------

def test_discrete_measure():
    measure = EmpiricalMeasure.discrete(np.array([1, 1, 2, 4]))
    np.testing.assert_allclose(measure.as_vector(5), [0.5, 0.25, 0.0, 0.25, 0.0])
    assert measure.mass_at(1) == 0.5
    assert measure.mass_at(3) == 0.0
    assert measure.quantile(0.5) == 1.5


def test_measure_from_vector():
    measure = EmpiricalMeasure.from_vector([1.0, 1.0, 2.0])
    np.testing.assert_allclose(measure.weights, [0.25, 0.25, 0.5])
    assert measure.quantile(0.5) == 2


def test_histogram_measure():
    samples = np.linspace(0.005, 0.995, 100)
    measure = EmpiricalMeasure.histogram(samples, bins=np.linspace(0.0, 1.0, 11))
    np.testing.assert_allclose(measure.weights, np.full(10, 0.1))
    np.testing.assert_allclose(measure.density(), np.ones(10))
    with pytest.raises(ValueError):
        measure.as_vector(10)


# --- distances ------------------------------------------------------------------------

def test_total_variation():
    measure = EmpiricalMeasure.discrete(np.array([1, 1, 2, 3]))
    assert distance(measure, [0.25, 0.25, 0.5]) == pytest.approx(0.25)
    assert distance(measure, [1.0]) == pytest.approx(0.5)
    other = EmpiricalMeasure.discrete(np.array([3, 3, 3, 3]))
    assert distance(measure, other) == pytest.approx(0.75)
    assert distance(measure, other, metric="ks") == pytest.approx(0.75)


def test_histogram_l1_and_ks():
    samples = np.linspace(0.005, 0.995, 100)
    edges = np.linspace(0.0, 1.0, 11)
    measure = EmpiricalMeasure.histogram(samples, bins=edges)
    assert distance(measure, lambda x: 1.0, metric="l1_hist") < 1e-12
    assert distance(measure, np.full(10, 0.1), metric="l1_hist") < 1e-12
    assert distance(measure, EmpiricalMeasure.histogram(samples[:50], bins=edges), metric="l1_hist") \
        == pytest.approx(1.0)
    assert distance(measure, stats.uniform.cdf, metric="ks") == pytest.approx(0.005)


def test_distance_errors():
    histogram = EmpiricalMeasure.histogram(np.linspace(0.0, 1.0, 20), bins=10)
    with pytest.raises(ValueError):
        distance(histogram, [0.5, 0.5])
    with pytest.raises(ValueError):
        distance(histogram, EmpiricalMeasure.histogram(np.linspace(0.0, 1.0, 20), bins=5), metric="l1_hist")
    with pytest.raises(ValueError):
        distance(histogram, histogram, metric="wasserstein")


# --- particle system ------------------------------------------------------------------

def test_dynamics_validation():
    with pytest.raises(ValueError):
        KilledDynamics(kind="jump_diffusion")
    with pytest.raises(ValueError):
        KilledDynamics.scalar_diffusion(ScalarDiffusion.wright_fisher(), epsilon=1.5, dt=1e-3)
    dynamics = KilledDynamics.finite_chain(uniform_killing_walk(5, 0.5))
    with pytest.raises(ValueError):
        fv_run(dynamics, 1, 1, 1.0, [1.0], seed=1)
    with pytest.raises(ValueError):
        fv_run(dynamics, 10, 6, 1.0, [1.0], seed=1)
    with pytest.raises(ValueError):
        fv_run(dynamics, 10, 1, 1.0, [0.5, 0.2], seed=1)


def test_chain_run_is_reproducible():
    dynamics = KilledDynamics.finite_chain(uniform_killing_walk(5, 0.5))
    times = [0.0, 1.0, 2.0]
    first = fv_run(dynamics, 50, 3, 2.0, times, seed=4)
    second = fv_run(dynamics, 50, 3, 2.0, times, seed=4)
    assert len(first.snapshots) == 3
    assert first.jump_count == second.jump_count
    for a, b in zip(first.snapshots, second.snapshots):
        np.testing.assert_array_equal(a.samples, b.samples)
    np.testing.assert_array_equal(first.snapshots[0].samples, np.full(50, 3))
    assert first.metadata()["n_particles"] == 50


def test_event_cap():
    dynamics = KilledDynamics.finite_chain(uniform_killing_walk(5, 0.5))
    with pytest.raises(EventCapExceededError):
        fv_run(dynamics, 100, 1, 100.0, [100.0], seed=1, max_events=1000)


def test_uniform_killing_walk_particles_spread_uniformly():
    generator = uniform_killing_walk(10, 0.5)
    times = np.linspace(60.0, 80.0, 21)
    record = fv_run(KilledDynamics.finite_chain(generator), 2000, 1, 80.0, times, seed=3)
    estimate = average_measures(record.snapshots)
    assert distance(estimate, np.full(10, 0.1)) < 0.1
    # killing does not depend on the position, so revivals come at rate d
    assert abs(fv_extinction_rate(record) - 0.5) < 0.02
    assert record.jump_count > 0


def test_linear_chain_particles_find_the_minimal_qsd():
    # mu_1 alpha_1 of the geometric QSD is xi_1 = mu - lambda
    estimate = xi1_from_fv(BirthDeathRates.linear(0.5, 1.0), 1000, 40.0, seed=8)
    assert abs(estimate - 0.5) < 0.1


def test_feller_mortality_plateau_matches_the_bottom_eigenvalue():
    params = FellerParams(r=1.0, c=1.0)
    z_kill = 0.01
    # killing at Z = z_kill is killing at X = 2 sqrt(z_kill)
    _, eigen = discretize_generator(feller_to_kolmogorov(params), epsilon=2 * math.sqrt(z_kill))
    dynamics = KilledDynamics.scalar_diffusion(ScalarDiffusion.feller(params), epsilon=z_kill, dt=1e-3)
    times = np.linspace(5.0, 20.0, 31)
    record = fv_run(dynamics, 2000, 1.0, 20.0, times, seed=17)
    assert fv_extinction_rate(record) == pytest.approx(eigen.lambda1, rel=0.1)

    revivals = np.array([s.revivals for s in record.snapshots[1:]])
    early, late = revivals[:15].sum(), revivals[15:].sum()
    assert late == pytest.approx(early, rel=0.2)


def test_distance_curve_decays_to_the_particle_noise():
    generator = uniform_killing_walk(5, 0.5)
    alpha = solve_qsd_spectral(generator).alpha
    times = np.linspace(0.0, 20.0, 11)
    curve = fv_distance_curve(KilledDynamics.finite_chain(generator), 2000, 1, times, alpha, seed=12)
    assert list(curve.columns) == ["t", "distance", "revivals"]
    assert len(curve) == 11
    assert curve["distance"].iloc[0] == pytest.approx(0.8)
    assert curve["revivals"].iloc[0] == 0
    assert curve["distance"].iloc[-1] < 0.08


def test_killed_ensemble_collapses():
    dynamics = KilledDynamics.scalar_diffusion(ScalarDiffusion.feller(FellerParams(r=1.0, c=1.0)),
                                               epsilon=0.6, dt=1e-3)
    with pytest.raises(EnsembleCollapseError):
        fv_run(dynamics, 100, 0.5, 1.0, [1.0], seed=1)


def test_yaglom_estimate_needs_a_start_for_diffusions():
    dynamics = KilledDynamics.scalar_diffusion(ScalarDiffusion.wright_fisher(), epsilon=0.001, dt=1e-3)
    with pytest.raises(ValueError):
        fv_yaglom_estimate(dynamics, 100, 0.1, 0.1, 2, seed=1)


def test_wright_fisher_snapshots():
    dynamics = KilledDynamics.scalar_diffusion(ScalarDiffusion.wright_fisher(), epsilon=0.001, dt=1e-3)
    edges = np.linspace(0.0, 1.0, 21)
    record = fv_run(dynamics, 500, 0.5, 1.0, [0.0, 0.5, 1.0], seed=2, bins=edges)
    assert [s.time for s in record.snapshots] == pytest.approx([0.0, 0.5, 1.0])
    for snapshot in record.snapshots:
        assert snapshot.kind == "histogram"
        assert snapshot.weights.sum() == pytest.approx(1.0)
        assert np.all((snapshot.samples > 0.001) & (snapshot.samples < 1.0))


# --- long runs ------------------------------------------------------------------------

@pytest.mark.slow
def test_second_example_particles_match_spectral_qsd():
    generator = BirthDeathRates.linear(0.9, 1.0).truncated_generator(100)
    alpha = solve_qsd_spectral(generator).alpha
    estimate = fv_yaglom_estimate(KilledDynamics.finite_chain(generator), 10000, 60.0, 20.0, 21, seed=20)
    assert distance(estimate, alpha) <= 0.05


@pytest.mark.slow
def test_tv_error_scales_like_inverse_square_root():
    generator = uniform_killing_walk(5, 0.5)
    alpha = solve_qsd_spectral(generator).alpha
    sizes = [100, 1000, 10000]
    errors = []
    for n in sizes:
        runs = [distance(fv_yaglom_estimate(KilledDynamics.finite_chain(generator), n, 20.0, 40.0, 41,
                                            seed=replica_seed(30, k)), alpha)
                for k in range(6)]
        errors.append(np.mean(runs))
    slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
    assert abs(slope + 0.5) <= 0.15


@pytest.mark.slow
def test_wright_fisher_yaglom_density():
    dynamics = KilledDynamics.scalar_diffusion(ScalarDiffusion.wright_fisher(), epsilon=0.001, dt=1e-3)
    estimate = fv_yaglom_estimate(dynamics, 10000, 5.0, 5.0, 25, seed=6, init_state=0.5,
                                  bins=np.linspace(0.0, 1.0, 51))
    assert distance(estimate, lambda x: 2.0 - 2.0 * x, metric="l1_hist") < 0.1


@pytest.mark.slow
def test_feller_particles_agree_with_discretized_density():
    params = FellerParams(r=9.0, c=1.0)
    model = feller_to_kolmogorov(params)
    _, eigen = discretize_generator(model, epsilon=0.01)
    population = eigen.population_density(model.to_population)
    z = population["z"].to_numpy()
    cumulative = integrate.cumulative_trapezoid(population["density"].to_numpy(), z, initial=0.0)

    edges = np.linspace(5.0, 13.0, 41)
    bin_masses = np.diff(np.interp(edges, z, cumulative))
    dynamics = KilledDynamics.scalar_diffusion(ScalarDiffusion.feller(params), epsilon=0.001, dt=1e-3)
    estimate = fv_yaglom_estimate(dynamics, 5000, 2.5, 2.5, 25, seed=4, init_state=9.0, bins=edges)

    assert distance(estimate, bin_masses, metric="l1_hist") < 0.05
    centres = 0.5 * (edges[:-1] + edges[1:])
    assert abs(centres[np.argmax(estimate.weights)] - 9.0) <= 1.0
    assert abs(z[np.argmax(population["density"].to_numpy())] - 9.0) <= 1.0
    assert not math.isnan(eigen.lambda1)
