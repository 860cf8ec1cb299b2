"""
Fleming-Viot particle systems.

N particles follow the killed dynamics independently; when one is absorbed it
jumps onto the position of another particle chosen uniformly. The empirical
measure approximates the law conditioned on survival and, averaged over long
times, the Yaglom limit.

Random streams: chain ensembles and diffusion motion use stream 0 of the seed,
revival choices of diffusion ensembles use stream 1.
"""

import bisect
import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import integrate, stats

from .birth_death import BirthDeathRates
from .diffusion import LvParams, ScalarDiffusion, lv_step
from .errors import EnsembleCollapseError, EventCapExceededError
from .finite_qsd import SubGenerator
from .random_streams import make_rng

logger = logging.getLogger("qsd-fleming-viot")

EVENT_CAP = 10**9
DEFAULT_BINS = 100
RANDOM_BLOCK = 8192
REBUILD_EVERY = 10**5

Bins = Union[int, Sequence[float]]


@dataclass
class KilledDynamics:
    """Dynamics followed by each particle between revivals"""
    kind: str
    generator: Optional[SubGenerator] = None
    rates: Optional[BirthDeathRates] = None
    diffusion: Optional[ScalarDiffusion] = None
    lv: Optional[LvParams] = None
    epsilon: float = 0.0
    dt: float = 1e-3

    def __post_init__(self):
        if self.kind == "diffusion" and not 0 < self.epsilon < 1:
            raise ValueError("Diffusion dynamics need killing bounds epsilon and 1/epsilon with 0 < epsilon < 1")
        if self.kind not in ("finite_chain", "bd_chain", "diffusion", "lotka_volterra"):
            raise ValueError(f"Unknown dynamics kind {self.kind!r}")

    @classmethod
    def finite_chain(cls, generator: SubGenerator) -> "KilledDynamics":
        return cls(kind="finite_chain", generator=generator)

    @classmethod
    def bd_chain(cls, rates: BirthDeathRates) -> "KilledDynamics":
        return cls(kind="bd_chain", rates=rates)

    @classmethod
    def scalar_diffusion(cls, diffusion: ScalarDiffusion, epsilon: float, dt: float) -> "KilledDynamics":
        """Killed on leaving (epsilon, 1/epsilon)"""
        return cls(kind="diffusion", diffusion=diffusion, epsilon=epsilon, dt=dt)

    @classmethod
    def lotka_volterra(cls, params: LvParams, dt: float, epsilon: float = 0.0) -> "KilledDynamics":
        """Coordinates freeze at 0 once <= epsilon; killed when every coordinate is 0"""
        return cls(kind="lotka_volterra", lv=params, epsilon=epsilon, dt=dt)

    @property
    def is_chain(self) -> bool:
        return self.kind in ("finite_chain", "bd_chain")


@dataclass
class EmpiricalMeasure:
    """Weights over integer states (discrete) or over histogram bins, each summing to 1"""
    kind: str
    weights: np.ndarray
    support: Optional[np.ndarray] = None
    edges: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None
    time: float = 0.0
    revivals: int = 0

    @classmethod
    def discrete(cls, samples: np.ndarray, time_: float = 0.0, revivals: int = 0) -> "EmpiricalMeasure":
        samples = np.asarray(samples)
        support, counts = np.unique(samples, return_counts=True)
        return cls(kind="discrete", weights=counts / samples.size, support=support, samples=samples,
                   time=time_, revivals=revivals)

    @classmethod
    def from_vector(cls, weights: Sequence[float]) -> "EmpiricalMeasure":
        """Discrete measure with weights over states 1..len(weights)"""
        weights = np.asarray(weights, dtype=float)
        return cls(kind="discrete", weights=weights / weights.sum(), support=np.arange(1, weights.size + 1))

    @classmethod
    def histogram(cls, samples: np.ndarray, bins: Bins = DEFAULT_BINS, time_: float = 0.0,
                  revivals: int = 0) -> "EmpiricalMeasure":
        samples = np.asarray(samples, dtype=float)
        if samples.ndim > 1:
            return cls(kind="samples", weights=np.full(samples.shape[0], 1.0 / samples.shape[0]),
                       samples=samples, time=time_, revivals=revivals)
        if np.ndim(bins) == 0:
            low, high = float(samples.min()), float(samples.max())
            if high <= low:
                high = low + 1e-12
            edges = np.linspace(low, high, int(bins) + 1)
        else:
            edges = np.asarray(bins, dtype=float)
        counts, edges = np.histogram(samples, bins=edges)
        return cls(kind="histogram", weights=counts / samples.size, edges=edges, samples=samples,
                   time=time_, revivals=revivals)

    def as_vector(self, dim: int) -> np.ndarray:
        """Weights over states 1..dim"""
        if self.kind != "discrete":
            raise ValueError("Only discrete measures map to state vectors")
        vector = np.zeros(max(dim, int(self.support.max())))
        np.add.at(vector, self.support.astype(int) - 1, self.weights)
        return vector

    def density(self) -> np.ndarray:
        return self.weights / np.diff(self.edges)

    def mass_at(self, state: int) -> float:
        hit = self.support == state
        return float(self.weights[hit].sum())

    def quantile(self, q: float) -> float:
        if self.samples is not None:
            return float(np.quantile(self.samples, q))
        cumulative = np.cumsum(self.weights)
        return float(self.support[np.searchsorted(cumulative, q)])


@dataclass
class FvRecord:
    """Snapshots of the empirical measure with the revival count"""
    times: np.ndarray
    snapshots: List[EmpiricalMeasure]
    jump_count: int
    n_particles: int
    wall_time: float = 0.0
    events: int = 0

    def metadata(self):
        return {"n_particles": self.n_particles, "jump_count": self.jump_count, "events": self.events,
                "wall_time": self.wall_time}


class RateTree:
    """Fenwick tree over particle rates: O(log N) updates and sampling"""

    def __init__(self, rates: Sequence[float]):
        self.rates = [float(r) for r in rates]
        self.size = len(self.rates)
        self.top = 1 << (self.size.bit_length() - 1)
        self._updates = 0
        self._build()

    def _build(self):
        tree = [0.0] * (self.size + 1)
        for i, rate in enumerate(self.rates, start=1):
            tree[i] += rate
            parent = i + (i & -i)
            if parent <= self.size:
                tree[parent] += tree[i]
        self.tree = tree
        self.total = math.fsum(self.rates)

    def update(self, index: int, rate: float):
        delta = rate - self.rates[index]
        self.rates[index] = rate
        self.total += delta
        i = index + 1
        while i <= self.size:
            self.tree[i] += delta
            i += i & -i
        self._updates += 1
        if self._updates % REBUILD_EVERY == 0:
            self._build()

    def find(self, target: float) -> int:
        """Index i with cumulative rate up to i-1 <= target < cumulative up to i"""
        pos = 0
        mask = self.top
        tree = self.tree
        while mask:
            nxt = pos + mask
            if nxt <= self.size and tree[nxt] <= target:
                pos = nxt
                target -= tree[nxt]
            mask >>= 1
        return min(pos, self.size - 1)


class _ChainMoves:
    """Exit rate and destination sampling for a chain; destination None means killed"""

    def __init__(self, dynamics: KilledDynamics):
        self.dynamics = dynamics
        if dynamics.kind == "finite_chain":
            entries = dynamics.generator.entries
            n = entries.shape[0]
            self.exit_rates = (-np.diag(entries)).tolist()
            self.targets = []
            self.cumulative = []
            for s in range(n):
                rates = np.append(np.delete(entries[s], s), dynamics.generator.kill[s])
                targets = [j + 1 for j in range(n) if j != s] + [None]
                keep = rates > 0
                self.targets.append([t for t, k in zip(targets, keep) if k])
                cum = np.cumsum(rates[keep])
                self.cumulative.append((cum / cum[-1]).tolist())

    def rate(self, state: int) -> float:
        if self.dynamics.kind == "finite_chain":
            return self.exit_rates[state - 1]
        rates = self.dynamics.rates
        return float(rates.birth(state)) + float(rates.death(state))

    def move(self, state: int, u: float) -> Optional[int]:
        if self.dynamics.kind == "finite_chain":
            row = self.cumulative[state - 1]
            return self.targets[state - 1][min(bisect.bisect_right(row, u), len(row) - 1)]
        birth = float(self.dynamics.rates.birth(state))
        if u * (birth + float(self.dynamics.rates.death(state))) < birth:
            return state + 1
        return state - 1 if state > 1 else None


def _uniform_blocks(rng: np.random.Generator):
    while True:
        exponentials = rng.standard_exponential(RANDOM_BLOCK).tolist()
        uniforms = rng.random((RANDOM_BLOCK, 3)).tolist()
        yield from zip(exponentials, uniforms)


def _revival_donor(i: int, n: int, u: float) -> int:
    """Index uniform on {0..n-1} minus {i}, from one uniform u in [0, 1)"""
    j = int(u * (n - 1))
    return j + 1 if j >= i else j


def _revive(positions: np.ndarray, killed: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """
    Move every killed particle onto a particle alive at that moment, in random order.

    Positions are updated in place; returns the donor of each particle (-1 for survivors).
    """
    alive = ~killed
    donors = np.full(killed.size, -1)
    for i in rng.permutation(np.flatnonzero(killed)):
        while True:
            j = int(rng.integers(killed.size))
            if alive[j] and j != i:
                break
        positions[i] = positions[j]
        alive[i] = True
        donors[i] = j
    return donors


def _run_chain(dynamics: KilledDynamics, n: int, init_state: int, t_end: float, record_times: np.ndarray,
               seed: int, max_events: int):
    moves = _ChainMoves(dynamics)
    positions = [int(init_state)] * n
    tree = RateTree([moves.rate(int(init_state))] * n)
    draws = _uniform_blocks(make_rng(seed))
    snapshots: List[EmpiricalMeasure] = []
    t, events, jump_count, revivals, k = 0.0, 0, 0, 0, 0

    while True:
        exponential, (u_particle, u_move, u_target) = next(draws)
        t_next = t + exponential / tree.total
        while k < record_times.size and record_times[k] < t_next:
            snapshots.append(EmpiricalMeasure.discrete(np.array(positions), float(record_times[k]), revivals))
            revivals = 0
            k += 1
        if t_next > t_end:
            break
        t = t_next

        i = tree.find(u_particle * tree.total)
        destination = moves.move(positions[i], u_move)
        if destination is None:
            destination = positions[_revival_donor(i, n, u_target)]
            jump_count += 1
            revivals += 1
        positions[i] = destination
        tree.update(i, moves.rate(destination))

        events += 1
        if events >= max_events:
            raise EventCapExceededError(max_events, t)

    return snapshots, jump_count, events


def _run_diffusion(dynamics: KilledDynamics, n: int, init_state, t_end: float, record_times: np.ndarray,
                   seed: int, bins: Bins):
    motion = make_rng(seed)
    revival = make_rng(seed, 1)
    dt = dynamics.dt
    n_steps = int(math.ceil(t_end / dt - 1e-9))
    record_steps = np.rint(record_times / dt).astype(int)
    multi = dynamics.kind == "lotka_volterra"
    positions = np.tile(np.asarray(init_state, dtype=float), (n, 1)) if multi else np.full(n, float(init_state))
    snapshots: List[EmpiricalMeasure] = []
    jump_count, revivals, k = 0, 0, 0

    while k < record_steps.size and record_steps[k] == 0:
        snapshots.append(EmpiricalMeasure.histogram(positions.copy(), bins, 0.0, 0))
        k += 1

    for step in range(1, n_steps + 1):
        if multi:
            params = dynamics.lv
            moved = lv_step(params, positions, dt, motion.standard_normal(positions.shape))
            positions = np.where((positions > 0) & (moved > dynamics.epsilon), moved, 0.0)
            killed = ~(positions > 0).any(axis=1)
        else:
            positions = dynamics.diffusion.step(positions, dt, motion.standard_normal(n))
            killed = (positions <= dynamics.epsilon) | (positions >= 1.0 / dynamics.epsilon)

        if killed.all():
            raise EnsembleCollapseError(step, step * dt)
        if killed.any():
            _revive(positions, killed, revival)
            jump_count += int(killed.sum())
            revivals += int(killed.sum())

        while k < record_steps.size and record_steps[k] == step:
            snapshots.append(EmpiricalMeasure.histogram(positions.copy(), bins, step * dt, revivals))
            revivals = 0
            k += 1

    return snapshots, jump_count, n_steps


def fv_run(dynamics: KilledDynamics, n_particles: int, init_state, t_end: float,
           record_times: Sequence[float], seed: int, bins: Bins = DEFAULT_BINS,
           max_events: int = EVENT_CAP) -> FvRecord:
    """
    Run the particle system from all particles at init_state.

    Chains evolve event by event: the ensemble is one continuous-time chain with
    total rate the sum of the particle rates, and a killed particle jumps onto
    one of the other N - 1 particles. Diffusions take synchronized Euler steps;
    particles killed in the same step are revived in random order, each onto a
    particle alive at that moment.

    Args:
        dynamics: killed dynamics of one particle
        n_particles: ensemble size N >= 2
        init_state: starting state (1-based for finite chains, a k-vector for Lotka-Volterra)
        t_end: final time
        record_times: nondecreasing snapshot times in [0, t_end]
        seed: random seed
        bins: histogram bins for one-dimensional diffusions (count or edges)

    Returns:
        FvRecord: one empirical measure per record time
    """
    if n_particles < 2:
        raise ValueError("The particle system needs at least 2 particles")
    record_times = np.asarray(record_times, dtype=float)
    if record_times.size and (np.any(np.diff(record_times) < 0) or record_times[0] < 0 or record_times[-1] > t_end):
        raise ValueError("Record times must be nondecreasing within [0, t_end]")

    started = time.perf_counter()
    if dynamics.is_chain:
        if dynamics.kind == "finite_chain" and not 1 <= int(init_state) <= dynamics.generator.dim:
            raise ValueError(f"Initial state {init_state} outside 1..{dynamics.generator.dim}")
        if dynamics.kind == "bd_chain" and int(init_state) < 1:
            raise ValueError("Initial population must be at least 1")
        snapshots, jump_count, events = _run_chain(dynamics, n_particles, init_state, t_end, record_times,
                                                   seed, max_events)
    else:
        snapshots, jump_count, events = _run_diffusion(dynamics, n_particles, init_state, t_end, record_times,
                                                       seed, bins)
    wall_time = time.perf_counter() - started
    logger.info(f"Particle system ({dynamics.kind}, N={n_particles}) to t={t_end}: "
                f"{jump_count} revivals, {events} events, {wall_time:.1f}s")
    return FvRecord(times=record_times, snapshots=snapshots, jump_count=jump_count, n_particles=n_particles,
                    wall_time=wall_time, events=events)


def _default_start(dynamics: KilledDynamics):
    if dynamics.is_chain:
        return 1
    raise ValueError("Diffusion dynamics need an explicit initial state")


def fv_yaglom_estimate(dynamics: KilledDynamics, n_particles: int, t_burnin: float, t_avg: float,
                       n_snapshots: int, seed: int, init_state=None, bins: Bins = DEFAULT_BINS) -> EmpiricalMeasure:
    """
    Time average of the empirical measure over n_snapshots equally spaced times in
    [t_burnin, t_burnin + t_avg].

    Histograms of the averaged measure are built on the pooled samples.
    """
    if n_snapshots < 1:
        raise ValueError("n_snapshots must be positive")
    if init_state is None:
        init_state = _default_start(dynamics)
    times = np.linspace(t_burnin, t_burnin + t_avg, n_snapshots)
    record = fv_run(dynamics, n_particles, init_state, t_burnin + t_avg, times, seed, bins)
    return average_measures(record.snapshots, bins)


def average_measures(snapshots: List[EmpiricalMeasure], bins: Bins = DEFAULT_BINS) -> EmpiricalMeasure:
    pooled = np.concatenate([s.samples for s in snapshots])
    revivals = sum(s.revivals for s in snapshots)
    if snapshots[0].kind == "discrete":
        averaged = EmpiricalMeasure.discrete(pooled, snapshots[-1].time, revivals)
    else:
        averaged = EmpiricalMeasure.histogram(pooled, bins, snapshots[-1].time, revivals)
    return averaged


def fv_extinction_rate(record: FvRecord) -> float:
    """Revivals per particle per unit time between the first and last snapshot"""
    if len(record.snapshots) < 2:
        raise ValueError("Need at least two snapshots")
    duration = record.times[-1] - record.times[0]
    revivals = sum(s.revivals for s in record.snapshots[1:])
    return revivals / (record.n_particles * duration)


def xi1_from_fv(rates: BirthDeathRates, n_particles: int, t_end: float, seed: int,
                n_snapshots: int = 50, init_state: int = 1) -> float:
    """mu_1 times the time-averaged particle mass at state 1 over [t_end/2, t_end]"""
    estimate = fv_yaglom_estimate(KilledDynamics.bd_chain(rates), n_particles, t_end / 2, t_end / 2,
                                  n_snapshots, seed, init_state)
    mu1 = float(rates.death(1))
    return mu1 * estimate.mass_at(1)


def _bin_masses(density: Callable, edges: np.ndarray) -> np.ndarray:
    return np.array([integrate.quad(density, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])


def distance(a: EmpiricalMeasure, b, metric: str = "tv") -> float:
    """
    Distance between an empirical measure and another measure.

    tv: discrete measures or a probability vector over states 1..n;
    l1_hist: histograms on identical bins, bin masses, or a density callable;
    ks: samples, discrete measures, or a CDF callable.
    """
    if metric == "tv":
        if a.kind != "discrete":
            raise ValueError("Total variation needs a discrete measure")
        if isinstance(b, EmpiricalMeasure):
            dim = int(max(a.support.max(), b.support.max()))
            other = b.as_vector(dim)
        else:
            other = np.asarray(b, dtype=float)
            dim = max(other.size, int(a.support.max()))
            other = np.pad(other, (0, dim - other.size))
        return float(0.5 * np.abs(a.as_vector(dim) - other).sum())

    if metric == "l1_hist":
        if a.kind != "histogram":
            raise ValueError("L1 histogram distance needs a histogram")
        if isinstance(b, EmpiricalMeasure):
            if b.edges is None or b.edges.shape != a.edges.shape or not np.allclose(a.edges, b.edges):
                raise ValueError("Histograms have different bins")
            other = b.weights
        elif callable(b):
            other = _bin_masses(b, a.edges)
        else:
            other = np.asarray(b, dtype=float)
            if other.shape != a.weights.shape:
                raise ValueError("Bin masses do not match the histogram bins")
        return float(np.abs(a.weights - other).sum())

    if metric == "ks":
        if callable(b):
            return float(stats.kstest(a.samples, b).statistic)
        if a.kind == "discrete" and b.kind == "discrete":
            dim = int(max(a.support.max(), b.support.max()))
            return float(np.abs(np.cumsum(a.as_vector(dim)) - np.cumsum(b.as_vector(dim))).max())
        return float(stats.ks_2samp(a.samples, b.samples).statistic)

    raise ValueError(f"Unknown metric {metric!r}")


def fv_distance_curve(dynamics: KilledDynamics, n_particles: int, init_state, times: Sequence[float],
                      reference, seed: int, metric: str = "tv", bins: Bins = DEFAULT_BINS) -> pd.DataFrame:
    """
    Distance of the particle empirical measure to a reference measure at each time.

    The reference is anything ``distance`` accepts for the metric; pass bin masses
    rather than a density for l1_hist so the integrals are not redone per snapshot.
    """
    times = np.asarray(times, dtype=float)
    record = fv_run(dynamics, n_particles, init_state, float(times[-1]), times, seed, bins)
    return pd.DataFrame({
        "t": times,
        "distance": [distance(snapshot, reference, metric) for snapshot in record.snapshots],
        "revivals": [snapshot.revivals for snapshot in record.snapshots],
    })
