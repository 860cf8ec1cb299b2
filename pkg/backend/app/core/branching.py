"""
Galton-Watson processes: criticality, the Yaglom limit of the subcritical case
and exact simulation.

Generating functions are iterated through their complements u = 1 - s so
that survival probabilities of order m^n keep full relative precision.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import NoConvergenceError, NotSubcriticalError, PopulationOverflowError
from .random_streams import make_rng

logger = logging.getLogger("qsd-branching")

PMF_TOL = 1e-12
SUPPORT_CAP = 1000
POPULATION_CAP = 10**7
GRID_POINTS = 201
PGF_PMF_TOL = 5e-4
UNDERFLOW_LIMIT = 1e-280

InitialLaw = Union[int, Sequence[float]]


class Criticality(str, Enum):
    SUBCRITICAL = "subcritical"
    CRITICAL = "critical"
    SUPERCRITICAL = "supercritical"


@dataclass
class OffspringDistribution:
    """Offspring law p_0, p_1, ... with an optional closed-form complement 1 - g(1 - u)"""
    pmf: np.ndarray
    closed_complement: Optional[Callable[[np.ndarray], np.ndarray]] = None
    closed_mean: Optional[float] = None
    name: str = "table"

    def __post_init__(self):
        pmf = np.asarray(self.pmf, dtype=float)
        if pmf.ndim != 1 or pmf.size < 2:
            raise ValueError("Offspring pmf needs at least p_0 and p_1")
        if np.any(pmf < 0) or not np.all(np.isfinite(pmf)):
            raise ValueError("Offspring pmf must be finite and nonnegative")
        if abs(pmf.sum() - 1.0) > PMF_TOL:
            raise ValueError(f"Offspring pmf sums to {pmf.sum():.15g}, not 1")
        if not 0 < pmf[0] + pmf[1] < 1:
            raise ValueError("Need 0 < p_0 + p_1 < 1")
        self.pmf = pmf / pmf.sum()

    @classmethod
    def linear_fractional(cls, p0: float, r: float) -> "OffspringDistribution":
        """p_k = (1 - p0)(1 - r) r^(k-1) for k >= 1; the pmf is stored up to a 1e-15 tail"""
        if not (0 < p0 < 1 and 0 < r < 1):
            raise ValueError("Need 0 < p0 < 1 and 0 < r < 1")
        k_max = max(2, int(np.ceil(np.log(1e-15) / np.log(r))) + 1)
        k = np.arange(1, k_max + 1)
        tail = (1 - p0) * (1 - r) * r ** (k - 1)
        pmf = np.concatenate([[p0], tail])
        pmf[-1] += 1.0 - pmf.sum()

        def complement(u):
            return (1 - p0) * u / (1 - r * (1 - u))

        return cls(pmf=pmf, closed_complement=complement, closed_mean=(1 - p0) / (1 - r),
                   name=f"linear_fractional(p0={p0}, r={r})")

    @property
    def mean(self) -> float:
        if self.closed_mean is not None:
            return float(self.closed_mean)
        return float(np.dot(np.arange(self.pmf.size), self.pmf))

    def g(self, s):
        """Generating function sum_k p_k s^k"""
        return 1.0 - self.complement(1.0 - np.asarray(s, dtype=float))

    def complement(self, u):
        """1 - g(1 - u), computed without cancellation for small u"""
        u = np.asarray(u, dtype=float)
        if self.closed_complement is not None:
            return self.closed_complement(u)
        k = np.arange(self.pmf.size)
        with np.errstate(divide="ignore"):
            log_s = np.log1p(-np.clip(u, 0.0, 1.0))
        exponents = np.multiply.outer(log_s, k)
        exponents[..., 0] = 0.0
        return -(np.expm1(exponents) @ self.pmf)


@dataclass
class GwClassification:
    """Criticality with mean offspring and extinction probability"""
    criticality: Criticality
    mean: float
    extinction_probability: float


@dataclass
class GwYaglom:
    """Yaglom limit: its generating function on a grid and its pmf on {1..k_max}"""
    s_grid: np.ndarray
    ghat: np.ndarray
    pmf: np.ndarray
    iterations: int
    residual: float
    mean: float

    def pgf_from_pmf(self, s) -> np.ndarray:
        k = np.arange(1, self.pmf.size + 1)
        return np.power.outer(np.asarray(s, dtype=float), k) @ self.pmf


def classify(offspring: OffspringDistribution, tol: float = 1e-15, max_iter: int = 10**6) -> GwClassification:
    """Sign of m - 1; the supercritical extinction probability is lim g(g(...g(0)))"""
    m = offspring.mean
    if abs(m - 1.0) <= 1e-12:
        return GwClassification(Criticality.CRITICAL, m, 1.0)
    if m < 1.0:
        return GwClassification(Criticality.SUBCRITICAL, m, 1.0)

    q = 0.0
    for _ in range(max_iter):
        q_next = float(offspring.g(q))
        if abs(q_next - q) <= tol:
            q = q_next
            break
        q = q_next
    else:
        raise NoConvergenceError("Extinction probability iteration", max_iter, abs(q_next - q))
    return GwClassification(Criticality.SUPERCRITICAL, m, q)


def _initial_weights(initial: InitialLaw) -> np.ndarray:
    """Weights of the initial law over {1..n}"""
    if isinstance(initial, (int, np.integer)):
        if initial < 1:
            raise ValueError("Initial state must be >= 1")
        weights = np.zeros(int(initial))
        weights[-1] = 1.0
        return weights
    weights = np.asarray(initial, dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > PMF_TOL:
        raise ValueError("Initial law must be a probability vector over 1..n")
    return weights / weights.sum()


def _initial_complement(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """1 - G_nu(1 - u) for the initial law nu"""
    j = np.arange(1, weights.size + 1)
    with np.errstate(divide="ignore"):
        log_s = np.log1p(-np.clip(u, 0.0, 1.0))
    return -(np.expm1(np.multiply.outer(log_s, j)) @ weights)


def _offspring_powers(pmf: np.ndarray, cap: int) -> np.ndarray:
    """T[k, j] = P(sum of k offspring counts = j), truncated to j <= cap"""
    table = np.zeros((cap + 1, cap + 1))
    table[0, 0] = 1.0
    step = pmf[: cap + 1]
    for k in range(1, cap + 1):
        table[k] = np.convolve(table[k - 1], step)[: cap + 1]
    return table


def yaglom_iteration(offspring: OffspringDistribution, s_grid: Optional[np.ndarray] = None,
                     tol: float = 1e-12, n_cap: int = 10**5, initial: InitialLaw = 1,
                     support_cap: int = SUPPORT_CAP) -> GwYaglom:
    """
    Yaglom limit of a subcritical Galton-Watson process.

    Iterates g_{n+1} = g(g_n) on the grid and forms
    g^_n(s) = 1 - (1 - G_nu(g_n(s))) / (1 - G_nu(g_n(0))) until the sup-change is
    below tol. The pmf is obtained separately by evolving the law of Z_n
    conditioned on Z_n > 0 on {1..support_cap}.

    Args:
        offspring: offspring law with m < 1
        s_grid: evaluation points in [0, 1] (default 201 uniform points)
        tol: stopping tolerance on sup_s |g^_{n+1}(s) - g^_n(s)|
        n_cap: maximum number of generations
        initial: starting state (int) or law over {1..n}

    Returns:
        GwYaglom: generating function, pmf and functional-equation residual
    """
    status = classify(offspring)
    if status.criticality != Criticality.SUBCRITICAL:
        raise NotSubcriticalError(
            f"No quasi-stationary distribution: offspring mean {status.mean:.6g} is {status.criticality.value}"
        )
    m = status.mean
    if s_grid is None:
        s_grid = np.linspace(0.0, 1.0, GRID_POINTS)
    s_grid = np.asarray(s_grid, dtype=float)
    if np.any(s_grid < 0) or np.any(s_grid > 1):
        raise ValueError("Grid points must lie in [0, 1]")
    weights = _initial_weights(initial)

    # s = 0 first, then the grid, then g(grid) for the functional-equation residual
    points = np.concatenate([[0.0], s_grid, offspring.g(s_grid)])
    u = 1.0 - points
    ghat = np.zeros(points.size - 1)
    change = np.inf
    iterations = 0
    for iterations in range(1, n_cap + 1):
        u = offspring.complement(u)
        survival = _initial_complement(weights, u)
        if survival[0] < UNDERFLOW_LIMIT:
            raise NoConvergenceError("Survival probability underflowed during iteration", iterations, change)
        new = 1.0 - survival[1:] / survival[0]
        change = float(np.abs(new - ghat).max())
        ghat = new
        logger.debug(f"Generation {iterations}: sup-change {change:.3e}")
        if change <= tol:
            break
    else:
        raise NoConvergenceError("Yaglom generating-function iteration", n_cap, change)

    on_grid = ghat[: s_grid.size]
    at_image = ghat[s_grid.size:]
    residual = float(np.abs(at_image - m * on_grid - (1.0 - m)).max())

    pmf = _conditioned_pmf(offspring, weights, iterations, support_cap)
    result = GwYaglom(s_grid=s_grid, ghat=on_grid, pmf=pmf, iterations=iterations, residual=residual, mean=m)

    mismatch = float(np.abs(result.pgf_from_pmf(s_grid) - on_grid).max())
    if mismatch > PGF_PMF_TOL:
        logger.warning(f"Yaglom pmf and generating function differ by {mismatch:.3e}")
    logger.info(f"GW Yaglom limit after {iterations} generations, residual {residual:.3e}")
    return result


def _conditioned_pmf(offspring: OffspringDistribution, weights: np.ndarray, generations: int,
                     cap: int) -> np.ndarray:
    table = _offspring_powers(offspring.pmf, cap)
    law = np.zeros(cap + 1)
    law[1: min(weights.size, cap) + 1] = weights[:cap]
    law /= law.sum()
    for _ in range(generations):
        law = law @ table
        law[0] = 0.0
        total = law.sum()
        if total <= 0:
            raise NoConvergenceError("Conditioned law lost all mass below the support cap", generations, 1.0)
        law /= total
    return law[1:]


def linear_fractional_yaglom(p0: float, r: float, k_max: int) -> np.ndarray:
    """Geometric Yaglom pmf (1 - rho) rho^(k-1), rho = r / p0, on {1..k_max}"""
    rho = r / p0
    if rho >= 1:
        raise NotSubcriticalError("Linear-fractional law is not subcritical")
    k = np.arange(1, k_max + 1)
    return (1 - rho) * rho ** (k - 1)


def simulate_gw(offspring: OffspringDistribution, z0: int, n_max: int, seed: int,
                population_cap: int = POPULATION_CAP) -> np.ndarray:
    """Z_0..Z_{n_max} of one process; offspring counts are drawn as a multinomial over the pmf support"""
    if z0 < 0:
        raise ValueError("z0 must be nonnegative")
    rng = make_rng(seed)
    support = np.arange(offspring.pmf.size)
    path = np.zeros(n_max + 1, dtype=np.int64)
    path[0] = z0
    for n in range(n_max):
        if path[n] == 0:
            break
        path[n + 1] = rng.multinomial(int(path[n]), offspring.pmf) @ support
        if path[n + 1] > population_cap:
            raise PopulationOverflowError(n + 1, int(path[n + 1]))
    return path


def simulate_gw_ensemble(offspring: OffspringDistribution, z0: int, n_max: int, n_paths: int, seed: int,
                         population_cap: int = POPULATION_CAP) -> np.ndarray:
    """Independent paths as an (n_paths, n_max + 1) array"""
    if z0 < 0:
        raise ValueError("z0 must be nonnegative")
    rng = make_rng(seed)
    support = np.arange(offspring.pmf.size)
    paths = np.zeros((n_paths, n_max + 1), dtype=np.int64)
    paths[:, 0] = z0
    for n in range(n_max):
        alive = np.flatnonzero(paths[:, n] > 0)
        if alive.size == 0:
            break
        paths[alive, n + 1] = rng.multinomial(paths[alive, n], offspring.pmf) @ support
        largest = int(paths[:, n + 1].max())
        if largest > population_cap:
            raise PopulationOverflowError(n + 1, largest)
    return paths


def empirical_hazard(paths: np.ndarray) -> np.ndarray:
    """P(Z_{n+1} = 0 | Z_n > 0) for n = 0..n_max-1; nan once no path survives"""
    paths = np.asarray(paths)
    alive = paths[:, :-1] > 0
    dying = alive & (paths[:, 1:] == 0)
    survivors = alive.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(survivors > 0, dying.sum(axis=0) / survivors, np.nan)
