import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .errors import EventCapExceededError, InconclusiveVerdictError
from .finite_qsd import QsdResult, SubGenerator, left_perron_vector, solve_qsd_spectral
from .random_streams import make_rng

logger = logging.getLogger("qsd-birth-death")

DEFAULT_SERIES_TERMS = 10**4
DEFAULT_H_TERMS = 10**3
RENORMALIZE_EVERY = 50
POSITIVITY_MARGIN = 1e-14
RAABE_MARGIN = 0.1
HARMONIC_SLACK = 0.01
SENSITIVITY_WARNING = 1e-3
TAIL_TOL = 1e-3
EVENT_CAP = 10**8
# xi_1 is declared zero when doubling the H-table length shrinks the bracket below this ratio
XI_SHRINK_RATIO = 0.75
XI_ZERO_TOL = 1e-6

RateFunction = Callable[[Any], Any]


class Verdict(str, Enum):
    HOLDS = "holds"
    FAILS = "fails"
    INCONCLUSIVE = "inconclusive"


class SeriesBehaviour(str, Enum):
    CONVERGENT = "convergent"
    DIVERGENT = "divergent"
    INCONCLUSIVE = "inconclusive"


class QsdRegime(str, Enum):
    NONE = "none"
    UNIQUE_YAGLOM = "unique_yaglom"
    CONTINUUM = "continuum"


@dataclass
class BirthDeathRates:
    """Birth rates lambda_i and death rates mu_i, with lambda_0 = mu_0 = 0"""
    birth: RateFunction
    death: RateFunction
    kind: str = "custom"
    params: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def linear(cls, lam: float, mu: float) -> "BirthDeathRates":
        return cls(birth=lambda i: lam * i, death=lambda i: mu * i,
                   kind="linear", params={"lambda": lam, "mu": mu})

    @classmethod
    def logistic(cls, lam: float, mu: float, c: float) -> "BirthDeathRates":
        """lambda_i = lam i, mu_i = mu i + c i (i - 1)"""
        return cls(birth=lambda i: lam * i, death=lambda i: mu * i + c * i * (i - 1),
                   kind="logistic", params={"lambda": lam, "mu": mu, "c": c})

    @classmethod
    def table(cls, lambdas, mus) -> "BirthDeathRates":
        """Rates listed for i = 1..n; queries beyond n are rejected"""
        lambdas = np.concatenate([[0.0], np.asarray(lambdas, dtype=float)])
        mus = np.concatenate([[0.0], np.asarray(mus, dtype=float)])
        if lambdas.shape != mus.shape:
            raise ValueError("Birth and death tables must have the same length")
        return cls(birth=lambda i: lambdas[i], death=lambda i: mus[i],
                   kind="table", params={"n": int(lambdas.size - 1)})

    @property
    def charge_capacity(self) -> Optional[float]:
        if self.kind != "logistic":
            return None
        return (self.params["lambda"] - self.params["mu"]) / self.params["c"]

    def rates(self, n: int, allow_zero_birth: bool = False) -> Tuple[np.ndarray, np.ndarray]:
        """lambda_1..lambda_n and mu_1..mu_n, checked for positivity"""
        index = np.arange(1, n + 1)
        try:
            lam = np.broadcast_to(np.asarray(self.birth(index), dtype=float), index.shape).copy()
            mu = np.broadcast_to(np.asarray(self.death(index), dtype=float), index.shape).copy()
        except IndexError as e:
            raise ValueError(f"Rate table does not cover states 1..{n}") from e
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(mu))):
            raise ValueError("Rates must be finite")
        if np.any(mu <= 0) or np.any(lam < 0) or (not allow_zero_birth and np.any(lam <= 0)):
            bad = int(np.flatnonzero((mu <= 0) | (lam <= 0))[0]) + 1
            raise ValueError(f"Birth and death rates must be positive (state {bad})")
        return lam, mu

    def truncated_generator(self, n: int) -> SubGenerator:
        """Chain on {1..n} killed at rate mu_1 from state 1, with lambda_n set to 0"""
        lam, mu = self.rates(n)
        jumps = np.zeros((n, n))
        idx = np.arange(n - 1)
        jumps[idx, idx + 1] = lam[:-1]
        jumps[idx + 1, idx] = mu[1:]
        kill = np.zeros(n)
        kill[0] = mu[0]
        return SubGenerator.from_rates(jumps, kill)


@dataclass
class SeriesVerdict:
    """Three-valued outcome of a series test, with the data behind it"""
    verdict: str
    behaviour: SeriesBehaviour
    log_partial_sum: float
    n_terms: int
    detail: str = ""
    log_tail_bound: Optional[float] = None
    extinction_probabilities: Optional[np.ndarray] = None

    @property
    def partial_sum(self) -> float:
        return float(np.exp(self.log_partial_sum)) if self.log_partial_sum < 709 else math.inf


@dataclass
class HPolynomialTable:
    """H_1(x)..H_n(x) stored as mantissa * exp(log_scale)"""
    x: float
    mantissa: np.ndarray
    log_scale: np.ndarray
    lam: np.ndarray
    mu: np.ndarray

    @property
    def sign(self) -> np.ndarray:
        return np.sign(self.mantissa)

    @property
    def log_abs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(np.abs(self.mantissa)) + self.log_scale

    @property
    def values(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return self.mantissa * np.exp(self.log_scale)

    def first_nonpositive(self) -> Optional[int]:
        """1-based index of the first H_n <= 0, or None"""
        bad = np.flatnonzero(self.mantissa <= 0)
        return int(bad[0]) + 1 if bad.size else None

    def sign_changes(self) -> int:
        signs = self.sign[self.sign != 0]
        return int(np.count_nonzero(np.diff(signs)))

    def recursion_residual(self) -> np.ndarray:
        """Relative residual of lambda_n H_{n+1} - (lambda_n + mu_n - x) H_n + mu_n H_{n-1}, n = 1..len-1"""
        n = self.mantissa.size
        nxt = self.mantissa[1:]
        cur = self.mantissa[:-1] * np.exp(self.log_scale[:-1] - self.log_scale[1:])
        prev = np.zeros(n - 1)
        prev[1:] = self.mantissa[:-2] * np.exp(self.log_scale[:-2] - self.log_scale[2:])
        lam, mu = self.lam[: n - 1], self.mu[: n - 1]
        terms = np.vstack([lam * nxt, (lam + mu - self.x) * cur, mu * prev])
        scale = np.abs(terms).max(axis=0)
        scale[scale == 0] = 1.0
        return np.abs(terms[0] - terms[1] + terms[2]) / scale


@dataclass
class Xi1Bracket:
    """Bisection bracket for xi_1 from the positivity of H_1..H_n"""
    lo: float
    hi: float
    n_max: int
    resolved: bool = True

    @property
    def mid(self) -> float:
        return 0.5 * (self.lo + self.hi)


@dataclass
class QsdFamilyPoint:
    """Truncated alpha^(x) with its decay rate theta = x and retained mass"""
    alpha: np.ndarray
    theta: float
    mass: float
    complete: bool = True


@dataclass
class BdClassification:
    """Extinction, explosion and QSD regime of a birth-death chain"""
    nonexplosion: SeriesVerdict
    extinction: SeriesVerdict
    series_S: SeriesVerdict
    qsd_regime: QsdRegime
    xi1: float
    xi1_bracket: Xi1Bracket
    rates: BirthDeathRates
    n_max_h: int = DEFAULT_H_TERMS

    def family_point(self, x: float) -> QsdFamilyPoint:
        if self.qsd_regime == QsdRegime.NONE:
            raise ValueError("No quasi-stationary distribution exists for these rates")
        return qsd_family_point(self.rates, x, self.n_max_h, xi1=self.xi1_bracket.hi)

    def summary(self) -> Dict[str, Any]:
        return {
            "nonexplosion": self.nonexplosion.verdict,
            "extinction": self.extinction.verdict,
            "series_S": self.series_S.behaviour.value,
            "qsd_regime": self.qsd_regime.value,
            "xi1": self.xi1,
            "xi1_lo": self.xi1_bracket.lo,
            "xi1_hi": self.xi1_bracket.hi,
        }


@dataclass
class TruncatedQsd:
    """QSD of the chain reflected at n_trunc, with the doubling sensitivity"""
    result: QsdResult
    n_trunc: int
    sensitivity: Optional[float] = None


def _series_behaviour(log_terms: np.ndarray) -> Tuple[SeriesBehaviour, str, Optional[float]]:
    """Decide convergence of sum a_n from log a_n on the upper half of the terms"""
    n = log_terms.size
    start = n // 2
    tail = log_terms[start:]
    index = np.arange(start + 1, n + 1, dtype=float)
    log_ratio = np.diff(tail)

    if np.all(log_ratio >= -1e-12):
        return SeriesBehaviour.DIVERGENT, "terms do not decrease", None

    if np.all(log_ratio < 0) and log_ratio.max() < np.log1p(-1e-3):
        ratio = float(np.exp(log_ratio.max()))
        bound = tail[-1] + np.log(ratio / (1.0 - ratio))
        return SeriesBehaviour.CONVERGENT, f"ratio test, sup ratio {ratio:.6g}", float(bound)

    raabe = -index[:-1] * np.expm1(log_ratio)
    if raabe.min() > 1.0 + RAABE_MARGIN:
        bound = tail[-1] + np.log(index[-1]) - np.log(raabe.min() - 1.0)
        return SeriesBehaviour.CONVERGENT, f"Raabe test, inf {raabe.min():.4g}", float(bound)
    if raabe.max() < 1.0 - RAABE_MARGIN:
        return SeriesBehaviour.DIVERGENT, f"Raabe test, sup {raabe.max():.4g}", None

    weighted = tail + np.log(index)
    if weighted.min() >= weighted.max() - HARMONIC_SLACK:
        return SeriesBehaviour.DIVERGENT, "comparison with the harmonic series", None
    return SeriesBehaviour.INCONCLUSIVE, "tail tests undecided", None


def _verdict(behaviour: SeriesBehaviour, holds_when: SeriesBehaviour) -> str:
    if behaviour == SeriesBehaviour.INCONCLUSIVE:
        return Verdict.INCONCLUSIVE.value
    return Verdict.HOLDS.value if behaviour == holds_when else Verdict.FAILS.value


def nonexplosion_check(rates: BirthDeathRates, n_max: int = DEFAULT_SERIES_TERMS) -> SeriesVerdict:
    """
    Non-explosion test: the chain is regular iff sum r_n diverges.

    Uses r_n = 1/lambda_n + (mu_n / lambda_n) r_{n-1} with r_0 = 1, in log-space.
    """
    if n_max < 2:
        raise ValueError("n_max must be at least 2")
    lam, mu = rates.rates(n_max)
    log_lam, log_mu = np.log(lam), np.log(mu)
    log_r = np.empty(n_max)
    previous = 0.0
    for n in range(n_max):
        previous = np.logaddexp(-log_lam[n], log_mu[n] - log_lam[n] + previous)
        log_r[n] = previous

    behaviour, detail, bound = _series_behaviour(log_r)
    verdict = _verdict(behaviour, SeriesBehaviour.DIVERGENT)
    logger.debug(f"Non-explosion over {n_max} terms: {verdict} ({detail})")
    return SeriesVerdict(verdict=verdict, behaviour=behaviour, log_partial_sum=float(logsumexp(log_r)),
                         n_terms=n_max, detail=detail, log_tail_bound=bound)


def extinction_check(rates: BirthDeathRates, n_max: int = DEFAULT_SERIES_TERMS,
                     n_report: int = 100) -> SeriesVerdict:
    """
    Almost-sure extinction iff sum_k (mu_1...mu_k)/(lambda_1...lambda_k) diverges.

    When extinction fails, also reports u_i = (1 + U)^-1 sum_{k>=i} a_k, the
    probability of absorption from state i, for i = 1..n_report.
    """
    lam, mu = rates.rates(n_max)
    log_terms = np.cumsum(np.log(mu) - np.log(lam))
    behaviour, detail, bound = _series_behaviour(log_terms)
    verdict = _verdict(behaviour, SeriesBehaviour.DIVERGENT)
    log_sum = float(logsumexp(log_terms))

    probabilities = None
    if behaviour == SeriesBehaviour.CONVERGENT:
        log_tails = np.logaddexp.accumulate(log_terms[::-1])[::-1]
        if bound is not None:
            log_tails = np.logaddexp(log_tails, bound)
            log_sum = float(np.logaddexp(log_sum, bound))
        probabilities = np.exp(log_tails[:n_report] - np.log1p(np.exp(log_sum)))

    return SeriesVerdict(verdict=verdict, behaviour=behaviour, log_partial_sum=log_sum, n_terms=n_max,
                         detail=detail, log_tail_bound=bound, extinction_probabilities=probabilities)


def pi_coefficients(rates: BirthDeathRates, n: int) -> np.ndarray:
    """log pi_1..log pi_n with pi_1 = 1 and pi_n = pi_{n-1} lambda_{n-1} / mu_n"""
    if n < 1:
        raise ValueError("n must be at least 1")
    lam, mu = rates.rates(n)
    log_pi = np.zeros(n)
    log_pi[1:] = np.cumsum(np.log(lam[:-1]) - np.log(mu[1:]))
    return log_pi


def h_polynomials(rates: BirthDeathRates, x: float, n_max: int = DEFAULT_H_TERMS) -> HPolynomialTable:
    """
    H_1(x)..H_{n_max}(x) from H_1 = 1, lambda_1 H_2 = lambda_1 + mu_1 - x and
    lambda_n H_{n+1} = (lambda_n + mu_n - x) H_n - mu_n H_{n-1}.

    The pair (H_{n-1}, H_n) is rescaled every 50 steps, or sooner if it leaves
    [1e-100, 1e100]; the accumulated log scale is kept per entry.
    """
    if x < 0:
        raise ValueError("x must be nonnegative")
    lam, mu = rates.rates(n_max)
    mantissa = np.empty(n_max)
    log_scale = np.empty(n_max)
    mantissa[0], log_scale[0] = 1.0, 0.0

    previous, current, shift = 0.0, 1.0, 0.0
    lam_list, mu_list = lam.tolist(), mu.tolist()
    for n in range(1, n_max):
        lam_n, mu_n = lam_list[n - 1], mu_list[n - 1]
        previous, current = current, ((lam_n + mu_n - x) * current - mu_n * previous) / lam_n
        size = max(abs(current), abs(previous))
        if n % RENORMALIZE_EVERY == 0 or size > 1e100 or 0 < size < 1e-100:
            if size > 0 and math.isfinite(size):
                previous /= size
                current /= size
                shift += math.log(size)
        mantissa[n] = current
        log_scale[n] = shift

    return HPolynomialTable(x=float(x), mantissa=mantissa, log_scale=log_scale, lam=lam, mu=mu)


def _strictly_positive(table: HPolynomialTable) -> bool:
    if np.any(table.mantissa <= 0):
        return False
    log_abs = table.log_abs
    running_max = np.maximum.accumulate(log_abs)
    return bool(np.all(log_abs > running_max + np.log(POSITIVITY_MARGIN)))


def xi1_estimate(rates: BirthDeathRates, n_max: int = DEFAULT_H_TERMS, tol: float = 1e-6) -> Xi1Bracket:
    """
    Bisection for xi_1 = sup{x : H_n(x) > 0 for all n}, restricted to n <= n_max.

    Returns:
        Xi1Bracket: [lo, hi] of width <= tol; resolved is False if the
        positivity predicate is not monotone on sampled points below lo
    """
    lam, mu = rates.rates(1)
    lo, hi = 0.0, float(lam[0] + mu[0])

    def positive(x: float) -> bool:
        return _strictly_positive(h_polynomials(rates, x, n_max))

    if not positive(0.0):
        logger.warning("H-polynomials are not positive at x=0; bracket unresolved")
        return Xi1Bracket(lo=0.0, hi=0.0, n_max=n_max, resolved=False)

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if positive(mid):
            lo = mid
        else:
            hi = mid

    resolved = all(positive(p) for p in np.linspace(0.0, lo, 9)[1:-1])
    if not resolved:
        logger.warning(f"Positivity predicate is not monotone below {lo:.6g}")
    return Xi1Bracket(lo=lo, hi=hi, n_max=n_max, resolved=resolved)


def series_S_check(rates: BirthDeathRates, n_max: int = DEFAULT_SERIES_TERMS) -> SeriesVerdict:
    """
    Convergence of S = sum_n pi_n (1/mu_1 + sum_{i<n} 1/(lambda_i pi_i)).

    Divergent means the QSDs form a continuum (or none exist); convergent
    means the Yaglom limit is the unique QSD.
    """
    lam, mu = rates.rates(n_max)
    log_pi = pi_coefficients(rates, n_max)
    inverse = -np.log(lam) - log_pi
    log_inner = np.empty(n_max)
    log_inner[0] = -np.log(mu[0])
    log_inner[1:] = np.logaddexp(-np.log(mu[0]), np.logaddexp.accumulate(inverse[:-1]))
    log_terms = log_pi + log_inner

    behaviour, detail, bound = _series_behaviour(log_terms)
    verdict = _verdict(behaviour, SeriesBehaviour.CONVERGENT)
    return SeriesVerdict(verdict=verdict, behaviour=behaviour, log_partial_sum=float(logsumexp(log_terms)),
                         n_terms=n_max, detail=detail, log_tail_bound=bound)


def classify_qsd(rates: BirthDeathRates, n_max: int = DEFAULT_SERIES_TERMS,
                 n_max_h: int = DEFAULT_H_TERMS, tol: float = 1e-6) -> BdClassification:
    """
    Combine the extinction test, the series S and xi_1 into the QSD trichotomy:
    no QSD when xi_1 = 0, a unique Yaglom QSD when S converges, and a continuum
    alpha^(x), 0 < x <= xi_1, otherwise.
    """
    nonexplosion = nonexplosion_check(rates, n_max)
    extinction = extinction_check(rates, n_max)
    if extinction.behaviour == SeriesBehaviour.INCONCLUSIVE:
        raise InconclusiveVerdictError("Extinction test is inconclusive", extinction)

    series = series_S_check(rates, n_max)
    bracket = xi1_estimate(rates, n_max_h, tol)

    if extinction.verdict == Verdict.FAILS.value:
        regime, xi1 = QsdRegime.NONE, 0.0
    elif series.behaviour == SeriesBehaviour.INCONCLUSIVE:
        raise InconclusiveVerdictError("Series S test is inconclusive", series)
    elif series.behaviour == SeriesBehaviour.CONVERGENT:
        regime, xi1 = QsdRegime.UNIQUE_YAGLOM, bracket.mid
    else:
        wider = xi1_estimate(rates, 2 * n_max_h, tol)
        if wider.hi <= XI_ZERO_TOL or wider.hi < XI_SHRINK_RATIO * bracket.hi:
            regime, xi1 = QsdRegime.NONE, 0.0
        else:
            regime, xi1, bracket = QsdRegime.CONTINUUM, wider.mid, wider

    logger.info(f"Birth-death classification ({rates.kind}): {regime.value}, xi1={xi1:.6g}")
    return BdClassification(nonexplosion=nonexplosion, extinction=extinction, series_S=series,
                            qsd_regime=regime, xi1=xi1, xi1_bracket=bracket, rates=rates, n_max_h=n_max_h)


def qsd_family_point(rates: BirthDeathRates, x: float, n_max: int = DEFAULT_H_TERMS,
                     xi1: Optional[float] = None, tail_tol: float = TAIL_TOL) -> QsdFamilyPoint:
    """
    alpha^_j(x) = pi_j x H_j(x) / mu_1 on {1..n_max}; a QSD with theta = x for 0 < x <= xi_1.

    The vector is not renormalized; ``mass`` is what the truncation retains and
    ``complete`` is False when more than ``tail_tol`` of it lies beyond n_max.
    A mass above 1 + tail_tol means x is past xi_1 and raises ValueError.
    """
    if xi1 is None:
        xi1 = xi1_estimate(rates, n_max).hi
    if not 0 < x <= xi1 + 1e-12:
        raise ValueError(f"x={x} outside (0, xi_1={xi1:.6g}]")

    table = h_polynomials(rates, x, n_max)
    log_pi = pi_coefficients(rates, n_max)
    with np.errstate(divide="ignore"):
        log_alpha = np.log(x) - np.log(table.mu[0]) + log_pi + table.log_abs
    alpha = table.sign * np.exp(log_alpha)
    # H_j(x) at x = xi_1 may carry rounding-level negative values far in the tail
    alpha[alpha < 0] = 0.0
    mass = float(alpha.sum())
    if mass > 1.0 + tail_tol:
        raise ValueError(f"Family member at x={x} has mass {mass:.6g} > 1: x is above xi_1")
    complete = mass >= 1.0 - tail_tol
    if not complete:
        logger.warning(f"Family member at x={x} keeps mass {mass:.6g} on 1..{n_max}; the tail is truncated")
    return QsdFamilyPoint(alpha=alpha, theta=float(x), mass=mass, complete=complete)


def qsd_system_residual(rates: BirthDeathRates, alpha: np.ndarray) -> np.ndarray:
    """
    Residual of lambda_{j-1} a_{j-1} - (lambda_j + mu_j) a_j + mu_{j+1} a_{j+1} + mu_1 a_1 a_j
    for j = 1..n-1.
    """
    alpha = np.asarray(alpha, dtype=float)
    n = alpha.size
    lam, mu = rates.rates(n)
    inflow_below = np.concatenate([[0.0], lam[:-2] * alpha[:-2]])
    outflow = (lam[:-1] + mu[:-1]) * alpha[:-1]
    inflow_above = mu[1:] * alpha[1:]
    return inflow_below - outflow + inflow_above + mu[0] * alpha[0] * alpha[:-1]


def truncated_qsd(rates: BirthDeathRates, n_trunc: int, check_sensitivity: bool = True,
                  tol: float = 1e-10) -> TruncatedQsd:
    """
    Yaglom limit of the chain on {1..n_trunc} with lambda_{n_trunc} = 0.

    Also reports the total-variation distance between the solutions at n_trunc
    and 2 n_trunc; a warning is logged when it exceeds 1e-3.
    """
    cap = rates.charge_capacity
    if cap is not None and n_trunc <= cap:
        raise ValueError(f"Truncation {n_trunc} must exceed the charge capacity {cap:.4g}")
    result = solve_qsd_spectral(rates.truncated_generator(n_trunc), tol=tol)

    sensitivity = None
    if check_sensitivity:
        wider = rates.truncated_generator(2 * n_trunc)
        alpha_wide, _ = left_perron_vector(wider, tol=tol)
        padded = np.concatenate([result.alpha, np.zeros(n_trunc)])
        sensitivity = float(0.5 * np.abs(padded - alpha_wide).sum())
        if sensitivity > SENSITIVITY_WARNING:
            logger.warning(f"Truncation at {n_trunc} is sensitive: TV to doubled truncation {sensitivity:.3e}")

    return TruncatedQsd(result=result, n_trunc=n_trunc, sensitivity=sensitivity)


def _random_batches(rng: np.random.Generator, size: int = 4096):
    while True:
        exponentials = rng.standard_exponential(size).tolist()
        uniforms = rng.random(size).tolist()
        yield from zip(exponentials, uniforms)


def simulate_bd_path(rates: BirthDeathRates, z0: int, t_max: float, seed: int,
                     max_events: int = EVENT_CAP) -> pd.DataFrame:
    """
    Exact event-driven path of the chain; one row per jump plus the end point.

    Returns:
        pd.DataFrame: columns t, state (piecewise constant between rows)
    """
    if z0 < 0 or t_max < 0:
        raise ValueError("Need z0 >= 0 and t_max >= 0")
    draws = _random_batches(make_rng(seed))
    times, states = [0.0], [int(z0)]
    t, z, events = 0.0, int(z0), 0

    while z > 0:
        birth = float(rates.birth(z))
        total = birth + float(rates.death(z))
        if total <= 0:
            break
        exponential, uniform = next(draws)
        t += exponential / total
        if t >= t_max:
            break
        z += 1 if uniform * total < birth else -1
        events += 1
        if events >= max_events:
            raise EventCapExceededError(max_events, t)
        times.append(t)
        states.append(z)

    if times[-1] < t_max:
        times.append(float(t_max))
        states.append(z)
    return pd.DataFrame({"t": times, "state": states})


def absorption_time(path: pd.DataFrame) -> float:
    hits = path.loc[path["state"] == 0, "t"]
    return float(hits.iloc[0]) if len(hits) else math.inf


def simulate_bd_endpoints(rates: BirthDeathRates, z0: int, t_max: float, n_paths: int, seed: int,
                          z_cap: Optional[int] = None) -> np.ndarray:
    """
    States at t_max of n_paths independent chains, simulated in lockstep.

    Paths reaching z_cap are frozen there (used when the chain escapes to infinity).
    """
    rng = make_rng(seed)
    z = np.full(n_paths, int(z0), dtype=np.int64)
    t = np.zeros(n_paths)
    active = z > 0
    if z_cap is not None:
        active &= z < z_cap

    while active.any():
        idx = np.flatnonzero(active)
        births = np.asarray(rates.birth(z[idx]), dtype=float)
        total = births + np.asarray(rates.death(z[idx]), dtype=float)
        t_next = t[idx] + rng.standard_exponential(idx.size) / total
        up = rng.random(idx.size) * total < births
        moving = t_next < t_max

        movers = idx[moving]
        z[movers] += np.where(up[moving], 1, -1)
        t[movers] = t_next[moving]
        active[idx[~moving]] = False
        still = z[movers] > 0
        if z_cap is not None:
            still &= z[movers] < z_cap
        active[movers] = still
    return z
