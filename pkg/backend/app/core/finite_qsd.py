import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import NoConvergenceError, ReducibleChainError, SurvivalUnderflowError

logger = logging.getLogger("qsd-finite")

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10**6
PROB_TOL = 1e-10
POISSON_TAIL = 1e-12
UNDERFLOW_LIMIT = 1e-300
DENSE_LIMIT = 500
# uniformization rate is this multiple of max|Q_ii|; > 1 keeps I + Q/rate aperiodic
UNIFORMIZATION_SLACK = 1.1
# largest rate*time handled by one Poisson sum before squaring
MAX_POISSON_MEAN = 8.0
CHECK_EVERY = 50


@dataclass
class SubGenerator:
    """Killed (sub-Markovian) rate matrix on the non-absorbed states"""
    entries: np.ndarray
    labels: Optional[List[str]] = None
    kill: Optional[np.ndarray] = None

    def __post_init__(self):
        entries = np.array(self.entries, dtype=float)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1] or entries.shape[0] == 0:
            raise ValueError(f"Generator must be a non-empty square matrix, got shape {entries.shape}")
        if not np.all(np.isfinite(entries)):
            raise ValueError("Generator has non-finite entries")

        off_diagonal = entries - np.diag(np.diag(entries))
        if np.any(off_diagonal < 0):
            raise ValueError("Off-diagonal rates must be nonnegative")

        scale = max(1.0, float(np.abs(entries).max()))
        row_sums = entries.sum(axis=1)
        if np.any(row_sums > 1e-12 * scale):
            raise ValueError("Every row sum of a killed generator must be <= 0")

        if self.kill is None:
            kill = np.clip(-row_sums, 0.0, None)
            kill[kill < 1e-13 * scale] = 0.0
        else:
            kill = np.asarray(self.kill, dtype=float)
        if not np.any(kill > 0):
            raise ValueError("At least one state must be killed (row sum < 0)")

        if self.labels is None:
            self.labels = [str(i + 1) for i in range(entries.shape[0])]
        elif len(self.labels) != entries.shape[0]:
            raise ValueError("One label per state is required")

        self.entries = entries
        self.kill = kill
        if not self.is_irreducible():
            raise ReducibleChainError(f"Generator on {self.dim} states is not irreducible")

    @classmethod
    def from_rates(cls, jumps: np.ndarray, kill: Sequence[float],
                   labels: Optional[List[str]] = None) -> "SubGenerator":
        """Build from off-diagonal jump rates and per-state killing rates"""
        jumps = np.array(jumps, dtype=float)
        np.fill_diagonal(jumps, 0.0)
        kill = np.asarray(kill, dtype=float)
        entries = jumps - np.diag(jumps.sum(axis=1) + kill)
        return cls(entries=entries, labels=labels, kill=kill)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def is_irreducible(self) -> bool:
        """Strong connectivity of the nonzero off-diagonal pattern"""
        if self.dim == 1:
            return True
        pattern = self.entries - np.diag(np.diag(self.entries)) > 0
        n_components, _ = connected_components(csr_matrix(pattern), directed=True, connection="strong")
        return n_components == 1


@dataclass
class QsdResult:
    """Perron-Frobenius output: QSD alpha, decay rate theta, right vector pi, second rate chi"""
    alpha: np.ndarray
    theta: float
    pi: np.ndarray
    chi: float
    iterations: int = 0
    alpha_residual: float = 0.0
    pi_residual: float = 0.0
    labels: Optional[List[str]] = None

    @property
    def gap(self) -> float:
        return abs(self.chi - self.theta)

    @property
    def absorption_matrix(self) -> np.ndarray:
        """A with A_ij = pi_i alpha_j, so that P_t ~ exp(-theta t) A"""
        return np.outer(self.pi, self.alpha)

    def metadata(self) -> Dict[str, Any]:
        return {
            "theta": self.theta,
            "chi": self.chi,
            "gap": self.gap,
            "iterations": self.iterations,
            "alpha_residual": self.alpha_residual,
            "pi_residual": self.pi_residual,
        }


@dataclass
class QProcess:
    """Conservative generator of the process conditioned never to be absorbed"""
    generator: np.ndarray
    stationary: np.ndarray
    labels: List[str] = field(default_factory=list)

    def transition_matrix(self, t: float) -> np.ndarray:
        return _uniformized_expm(self.generator, t)


def validate_prob_vector(weights: Sequence[float], dim: Optional[int] = None) -> np.ndarray:
    """Check a probability vector and return it renormalized to sum exactly 1"""
    vector = np.asarray(weights, dtype=float)
    if vector.ndim != 1:
        raise ValueError("Probability vector must be one-dimensional")
    if dim is not None and vector.shape[0] != dim:
        raise ValueError(f"Probability vector has {vector.shape[0]} entries, expected {dim}")
    if np.any(vector < 0) or not np.all(np.isfinite(vector)):
        raise ValueError("Probability vector entries must be finite and nonnegative")
    total = vector.sum()
    if abs(total - 1.0) > PROB_TOL:
        raise ValueError(f"Probability vector sums to {total}, not 1")
    return vector / total


def point_mass(dim: int, state: int) -> np.ndarray:
    """delta at a 1-based state index"""
    if not 1 <= state <= dim:
        raise ValueError(f"State {state} outside 1..{dim}")
    vector = np.zeros(dim)
    vector[state - 1] = 1.0
    return vector


def uniform_killing_walk(n_states: int, d: float) -> SubGenerator:
    """Random walk on {1..n} with unit nearest-neighbour rates, killed at rate d everywhere"""
    if n_states < 1 or d <= 0:
        raise ValueError("Need n_states >= 1 and d > 0")
    jumps = np.zeros((n_states, n_states))
    idx = np.arange(n_states - 1)
    jumps[idx, idx + 1] = 1.0
    jumps[idx + 1, idx] = 1.0
    return SubGenerator.from_rates(jumps, np.full(n_states, d))


def _poisson_weights(mean: float, tail: float) -> np.ndarray:
    weight = np.exp(-mean)
    weights = [weight]
    k = 0
    while True:
        k += 1
        weight *= mean / k
        weights.append(weight)
        ratio = mean / (k + 1)
        # geometric bound on the remaining Poisson mass
        if ratio < 0.5 and weight * ratio / (1.0 - ratio) < tail:
            break
    return np.array(weights)


def _uniformized_expm(matrix: np.ndarray, t: float) -> np.ndarray:
    if t < 0 or not np.isfinite(t):
        raise ValueError(f"Time must be finite and nonnegative, got {t}")
    if not np.all(np.isfinite(matrix)):
        raise ValueError("Matrix has non-finite entries")
    n = matrix.shape[0]
    identity = np.eye(n)
    rate = UNIFORMIZATION_SLACK * float(np.abs(np.diag(matrix)).max())
    if t == 0 or rate == 0:
        return identity

    jump_chain = identity + matrix / rate
    squarings = 0
    if rate * t > MAX_POISSON_MEAN:
        squarings = int(np.ceil(np.log2(rate * t / MAX_POISSON_MEAN)))
    step = t / 2**squarings
    weights = _poisson_weights(rate * step, POISSON_TAIL / 2**squarings)

    result = weights[0] * identity
    power = identity
    for weight in weights[1:]:
        power = power @ jump_chain
        result += weight * power
    for _ in range(squarings):
        result = result @ result
    return np.clip(result, 0.0, 1.0)


def transition_matrix(generator: SubGenerator, t: float) -> np.ndarray:
    """
    Killed semigroup P_t = exp(tQ) by uniformization.

    Args:
        generator: killed rate matrix
        t: nonnegative time

    Returns:
        np.ndarray: sub-stochastic matrix with entries in [0, 1]
    """
    return _uniformized_expm(generator.entries, t)


def conditioned_distribution(generator: SubGenerator, init: Sequence[float], t: float) -> np.ndarray:
    """
    Law at time t conditioned on survival, (init P_t) / (init P_t 1).

    Raises SurvivalUnderflowError when the survival probability drops below 1e-300;
    use conditioned_path for long horizons.
    """
    init = validate_prob_vector(init, generator.dim)
    unnormalized = init @ transition_matrix(generator, t)
    mass = unnormalized.sum()
    if mass < UNDERFLOW_LIMIT:
        raise SurvivalUnderflowError(
            f"Survival probability {mass:.3e} at t={t} underflows; use conditioned_path"
        )
    return unnormalized / mass


def conditioned_path(generator: SubGenerator, init: Sequence[float],
                     times: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Conditioned laws along a time grid, tracked in log-space.

    Args:
        generator: killed rate matrix
        init: initial probability vector
        times: nondecreasing times starting at or after 0

    Returns:
        Tuple: (len(times) x dim array of conditioned laws, log survival probabilities)
    """
    init = validate_prob_vector(init, generator.dim)
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("Time grid must be a non-empty one-dimensional sequence")
    if times[0] < 0 or np.any(np.diff(times) < 0):
        raise ValueError("Time grid must start at or after 0 and be nondecreasing")

    steps: Dict[float, np.ndarray] = {}
    vector = init.copy()
    log_survival = 0.0
    current = 0.0
    laws = np.empty((times.size, generator.dim))
    log_survivals = np.empty(times.size)

    for k, t in enumerate(times):
        dt = t - current
        if dt > 0:
            key = round(dt, 12)
            if key not in steps:
                steps[key] = transition_matrix(generator, dt)
            vector = vector @ steps[key]
            mass = vector.sum()
            if mass < UNDERFLOW_LIMIT:
                raise SurvivalUnderflowError(
                    f"Survival over a single step of length {dt} underflows; refine the time grid"
                )
            log_survival += np.log(mass)
            vector = vector / mass
            current = t
        laws[k] = vector
        log_survivals[k] = log_survival

    return laws, log_survivals


def survival_probability(generator: SubGenerator, init: Sequence[float], t: float) -> Tuple[float, float]:
    """P_init(T_0 > t) and its logarithm"""
    _, log_survival = conditioned_path(generator, init, [t])
    return float(np.exp(log_survival[0])), float(log_survival[0])


def extinction_rate_curve(generator: SubGenerator, init: Sequence[float],
                          grid: Sequence[float]) -> np.ndarray:
    """
    Hazard of the absorption time, r(t) = -(init P_t Q 1) / (init P_t 1).

    Evaluated through the generator, not by differencing the survival curve.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size > 1 and np.any(np.diff(grid) <= 0):
        raise ValueError("Time grid must be strictly increasing")
    laws, _ = conditioned_path(generator, init, grid)
    return -(laws @ generator.entries.sum(axis=1))


def yaglom_distance_curve(generator: SubGenerator, init: Sequence[float],
                          times: Sequence[float], alpha: np.ndarray) -> pd.DataFrame:
    """Sup-distance of the conditioned law to alpha against the extinction time scale"""
    laws, log_survival = conditioned_path(generator, init, times)
    return pd.DataFrame({
        "t": np.asarray(times, dtype=float),
        "survival": np.exp(log_survival),
        "neg_log_survival": -log_survival,
        "sup_distance": np.abs(laws - alpha[None, :]).max(axis=1),
    })


def qsd_residual(generator: SubGenerator, candidate: Sequence[float]) -> Tuple[float, float]:
    """Implied theta = -(c Q 1) and the residual ||c Q + theta c||_inf"""
    candidate = validate_prob_vector(candidate, generator.dim)
    flux = candidate @ generator.entries
    theta = -flux.sum()
    return float(theta), float(np.abs(flux + theta * candidate).max())


def _leading_dense(entries: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    eigenvalues, left, right = linalg.eig(entries, left=True, right=True)
    # real part descending, ties by modulus descending
    order = np.lexsort((-np.abs(eigenvalues), -eigenvalues.real))
    lead = order[0]
    chi = -eigenvalues[order[1]].real if eigenvalues.size > 1 else np.inf
    alpha = np.abs(left[:, lead].real)
    pi = np.abs(right[:, lead].real)
    return alpha, pi, float(chi)


def _is_tridiagonal(entries: np.ndarray) -> bool:
    return not (np.any(np.triu(entries, 2)) or np.any(np.tril(entries, -2)))


def _log_eigenvector(diagonal: np.ndarray, off: np.ndarray, eigenvalue: float,
                     peak: int) -> Optional[np.ndarray]:
    """
    log of a positive eigenvector of a symmetric tridiagonal matrix.

    Ratios v_{i+1}/v_i are run from the left end and v_{i-1}/v_i from the
    right end, both towards the peak, so components far below machine
    precision relative to the peak keep their relative accuracy.
    """
    n = diagonal.size
    log_v = np.zeros(n)
    ratio = np.inf
    forward = np.empty(peak)
    for i in range(peak):
        coupling = off[i - 1] / ratio if i > 0 else 0.0
        ratio = (eigenvalue - diagonal[i] - coupling) / off[i]
        forward[i] = ratio
    backward = np.empty(n - peak - 1)
    ratio = np.inf
    for j, i in enumerate(range(n - 1, peak, -1)):
        coupling = off[i] / ratio if i < n - 1 else 0.0
        ratio = (eigenvalue - diagonal[i] - coupling) / off[i - 1]
        backward[j] = ratio
    if np.any(forward <= 0) or np.any(backward <= 0) or not (np.all(np.isfinite(forward))
                                                             and np.all(np.isfinite(backward))):
        return None
    log_v[:peak] = -np.cumsum(np.log(forward[::-1]))[::-1]
    log_v[peak + 1:] = -np.cumsum(np.log(backward[::-1]))
    return log_v


def _leading_tridiagonal(entries: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """Leading pair of a tridiagonal generator through its symmetrization D A D^-1"""
    upper = np.diag(entries, 1)
    lower = np.diag(entries, -1)
    diagonal = np.diag(entries)
    off = np.sqrt(upper * lower)
    log_d = np.concatenate([[0.0], np.cumsum(0.5 * (np.log(upper) - np.log(lower)))])
    eigenvalues, vectors = linalg.eigh_tridiagonal(
        diagonal, off, select="i", select_range=(entries.shape[0] - 2, entries.shape[0] - 1)
    )
    v = np.abs(vectors[:, 1])
    log_v = _log_eigenvector(diagonal, off, float(eigenvalues[1]), int(np.argmax(v)))
    if log_v is None:
        logger.debug("Ratio recursion lost positivity; using the eigensolver vector")
        with np.errstate(divide="ignore"):
            log_v = np.log(v)
    alpha = np.exp(log_v + log_d - (log_v + log_d).max())
    pi = np.exp(log_v - log_d - (log_v - log_d).max())
    alpha /= alpha.sum()
    # theta = alpha . kill stays nonnegative when the eigenvalue is below machine precision
    theta = float(alpha @ -entries.sum(axis=1))
    return alpha, pi, theta, float(-eigenvalues[0])


def _residuals(entries: np.ndarray, alpha: np.ndarray, pi: np.ndarray, theta: float) -> Tuple[float, float, float]:
    alpha_res = alpha @ entries + theta * alpha
    pi_res = entries @ pi + theta * pi
    # the Q-process needs pi-weighted alpha residuals and pi-relative pi residuals
    coupled = max(np.abs(alpha_res * pi).max(), np.abs(pi_res / pi).max())
    return float(np.abs(alpha_res).max()), float(np.abs(pi_res).max()), float(coupled)


def _perron_pair(entries: np.ndarray, alpha: np.ndarray, pi: np.ndarray,
                 tol: float, max_iter: int) -> Tuple[np.ndarray, float, np.ndarray, int, float, float]:
    n = entries.shape[0]
    rate = UNIFORMIZATION_SLACK * float(np.abs(np.diag(entries)).max())
    jump_chain = np.eye(n) + entries / rate
    kill = -entries.sum(axis=1)

    alpha = np.asarray(alpha, dtype=float) + 1e-300
    alpha = alpha / alpha.sum()
    pi = np.asarray(pi, dtype=float) + 1e-300
    pi = pi / pi.max()

    residual = np.inf
    for iteration in range(max_iter + 1):
        if iteration % CHECK_EVERY == 0:
            theta = float(alpha @ kill)
            scaled_pi = pi / (alpha @ pi)
            alpha_res, pi_res, coupled = _residuals(entries, alpha, scaled_pi, theta)
            residual = max(alpha_res, pi_res, coupled)
            logger.debug(f"Perron iteration {iteration}: residual {residual:.3e}")
            if residual <= tol:
                return alpha, theta, scaled_pi, iteration, alpha_res, pi_res
        alpha = alpha @ jump_chain
        alpha /= alpha.sum()
        pi = jump_chain @ pi
        pi /= pi.max()

    raise NoConvergenceError("Perron iteration stalled", max_iter, residual)


def left_perron_vector(generator: SubGenerator, initial: Optional[np.ndarray] = None,
                       tol: float = DEFAULT_TOL, max_iter: int = 10**5) -> Tuple[np.ndarray, float]:
    """Left Perron vector only, polished from a starting guess; returns (alpha, theta)"""
    entries = generator.entries
    n = generator.dim
    if initial is None and n <= 2 * DENSE_LIMIT:
        eigenvalues, vectors = linalg.eig(entries.T)
        order = np.lexsort((-np.abs(eigenvalues), -eigenvalues.real))
        initial = np.abs(vectors[:, order[0]].real)
    elif initial is None and _is_tridiagonal(entries):
        alpha, _, theta, _ = _leading_tridiagonal(entries)
        residual = float(np.abs(alpha @ entries + theta * alpha).max())
        if residual <= tol * max(1.0, float(np.abs(np.diag(entries)).max())):
            return alpha, theta
        initial = alpha
    elif initial is None:
        initial = np.full(n, 1.0 / n)
    rate = UNIFORMIZATION_SLACK * float(np.abs(np.diag(entries)).max())
    jump_chain = np.eye(n) + entries / rate
    kill = -entries.sum(axis=1)

    alpha = np.asarray(initial, dtype=float) + 1e-300
    alpha = alpha / alpha.sum()
    residual = np.inf
    for iteration in range(max_iter + 1):
        if iteration % CHECK_EVERY == 0:
            theta = float(alpha @ kill)
            residual = float(np.abs(alpha @ entries + theta * alpha).max())
            if residual <= tol:
                return alpha, theta
        alpha = alpha @ jump_chain
        alpha /= alpha.sum()
    logger.warning(f"Left Perron vector stopped at residual {residual:.3e} after {max_iter} iterations")
    return alpha, float(alpha @ kill)


def _second_rate_by_deflation(entries: np.ndarray, alpha: np.ndarray, pi: np.ndarray,
                              theta: float, max_iter: int) -> float:
    """Wielandt deflation of the leading pair, then power iteration for |nu_2|"""
    n = entries.shape[0]
    rate = UNIFORMIZATION_SLACK * float(np.abs(np.diag(entries)).max())
    jump_chain = np.eye(n) + entries / rate
    leading = 1.0 - theta / rate

    rng = np.random.default_rng(0)
    vector = rng.random(n)
    vector -= (vector @ pi) * alpha
    vector /= np.linalg.norm(vector)
    estimate = 0.0
    for iteration in range(1, max_iter + 1):
        nxt = vector @ jump_chain - leading * (vector @ pi) * alpha
        norm = np.linalg.norm(nxt)
        if norm == 0:
            return np.inf
        previous, estimate = estimate, norm
        vector = nxt / norm
        if iteration > 100 and abs(estimate - previous) <= 1e-12 * estimate:
            break
    else:
        logger.warning("Deflated iteration for the second rate did not settle; chi is approximate")
    return rate * (1.0 - estimate)


def solve_qsd_spectral(generator: SubGenerator, tol: float = DEFAULT_TOL,
                       max_iter: int = DEFAULT_MAX_ITER,
                       initial: Optional[np.ndarray] = None,
                       compute_chi: bool = True) -> QsdResult:
    """
    Quasi-stationary distribution of a finite killed chain.

    Power iteration on the uniformized matrix I + Q/rate for the left and right
    Perron vectors. Up to 500 states a dense eigendecomposition seeds the
    iteration and gives chi; beyond that chi comes from a deflated iteration.

    Args:
        generator: killed rate matrix (irreducible by construction)
        tol: bound on ||alpha Q + theta alpha||_inf and ||Q pi + theta pi||_inf
        max_iter: iteration cap
        initial: optional starting guess for alpha
        compute_chi: skip the deflated iteration above 500 states when False (chi is nan)

    Returns:
        QsdResult: alpha (sums to 1), theta, pi (sum alpha_i pi_i = 1), chi
    """
    entries = generator.entries
    n = generator.dim
    if n == 1:
        theta = -entries[0, 0]
        return QsdResult(alpha=np.ones(1), theta=theta, pi=np.ones(1), chi=np.inf, labels=generator.labels)

    chi = None
    if n <= DENSE_LIMIT:
        alpha0, pi0, chi = _leading_dense(entries)
    elif _is_tridiagonal(entries):
        alpha0, pi0, theta, chi = _leading_tridiagonal(entries)
        scaled_pi = pi0 / (alpha0 @ pi0)
        alpha_res, pi_res, _ = _residuals(entries, alpha0, scaled_pi, theta)
        # large tridiagonal operators are accepted at the precision of the eigensolver
        if initial is None and max(alpha_res, pi_res) <= tol * max(1.0, float(np.abs(np.diag(entries)).max())):
            logger.info(f"QSD on {n} states (tridiagonal): theta={theta:.6g}, chi={chi:.6g}")
            return QsdResult(alpha=alpha0, theta=theta, pi=scaled_pi, chi=chi, alpha_residual=alpha_res,
                             pi_residual=pi_res, labels=generator.labels)
    else:
        alpha0, pi0 = np.full(n, 1.0 / n), np.ones(n)
    if initial is not None:
        alpha0 = validate_prob_vector(initial, n)

    alpha, theta, pi, iterations, alpha_res, pi_res = _perron_pair(entries, alpha0, pi0, tol, max_iter)
    if chi is None:
        chi = _second_rate_by_deflation(entries, alpha, pi, theta, min(max_iter, 200000)) if compute_chi else np.nan

    logger.info(f"QSD on {n} states: theta={theta:.6g}, chi={chi:.6g}, iterations={iterations}")
    return QsdResult(
        alpha=alpha,
        theta=theta,
        pi=pi,
        chi=chi,
        iterations=iterations,
        alpha_residual=alpha_res,
        pi_residual=pi_res,
        labels=generator.labels,
    )


def q_process(result: QsdResult, generator: SubGenerator) -> QProcess:
    """
    Generator of the Q-process, L^_ij = (pi_j / pi_i) L_ij and L^_ii = theta + L_ii.

    Its stationary law is (alpha_j pi_j)_j.
    """
    if result.alpha.shape[0] != generator.dim or result.pi.shape[0] != generator.dim:
        raise ValueError("QSD result and generator have different dimensions")
    entries = generator.entries
    weighted = entries * (result.pi[None, :] / result.pi[:, None])
    np.fill_diagonal(weighted, result.theta + np.diag(entries))
    stationary = result.alpha * result.pi
    return QProcess(generator=weighted, stationary=stationary / stationary.sum(), labels=list(generator.labels))
