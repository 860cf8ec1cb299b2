"""
Continuous-state models: logistic Feller, Wright-Fisher and multi-type
Lotka-Volterra diffusions.

Simulation is Euler-Maruyama with full truncation (the square-root argument
is clamped at 0) and absorption on the first nonpositive value. One-dimensional
models are also available in Kolmogorov form dX = dB - q(X) dt, which is what
the finite-difference eigen-solver discretizes.
"""

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import integrate, optimize

from .birth_death import BirthDeathRates, simulate_bd_path
from .errors import GridTooCoarseError, QuadratureError
from .finite_qsd import SubGenerator, solve_qsd_spectral
from .random_streams import make_rng

logger = logging.getLogger("qsd-diffusion")

STABILITY_LIMIT = 0.1
NORMAL_BLOCK = 65536
POTENTIAL_MARGIN = 40.0
MAX_GRID = 4096
MIN_SURVIVORS = 100
QUAD_RTOL = 1e-8


@dataclass
class FellerParams:
    """dZ = sqrt(2 gamma Z) dB + (r Z - c Z^2) dt"""
    r: float
    c: float
    gamma: float = 0.5

    def __post_init__(self):
        if self.r <= 0 or self.c < 0 or self.gamma <= 0:
            raise ValueError("Feller parameters need r > 0, c >= 0, gamma > 0")

    @property
    def charge_capacity(self) -> float:
        return self.r / self.c if self.c > 0 else math.inf


@dataclass
class KolmogorovModel:
    """dX = dB - q(X) dt on (0, inf) with potential Q(y) = int_1^y 2 q"""
    drift: Callable
    potential: Callable
    name: str = "kolmogorov"
    to_population: Callable = field(default=lambda x: x)
    params: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def brownian(cls) -> "KolmogorovModel":
        return cls(drift=lambda x: np.zeros_like(np.asarray(x, dtype=float)),
                   potential=lambda x: np.zeros_like(np.asarray(x, dtype=float)), name="brownian")

    def density(self, x):
        """Speed-measure density exp(-Q)"""
        return np.exp(-self.potential(x))


@dataclass
class LvParams:
    """dZ^i = sqrt(gamma_i Z^i) dB^i + Z^i (r_i - sum_j c_ij Z^j) dt"""
    gamma: np.ndarray
    r: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        self.r = np.atleast_1d(np.asarray(self.r, dtype=float))
        self.c = np.atleast_2d(np.asarray(self.c, dtype=float))
        k = self.gamma.size
        if self.r.shape != (k,) or self.c.shape != (k, k):
            raise ValueError("gamma, r and c must have shapes (k,), (k,), (k, k)")
        if np.any(self.gamma <= 0) or np.any(self.r <= 0) or np.any(self.c <= 0):
            raise ValueError("Lotka-Volterra parameters must all be positive")

    @property
    def k(self) -> int:
        return self.gamma.size

    @classmethod
    def from_feller(cls, params: FellerParams) -> "LvParams":
        return cls(gamma=[2 * params.gamma], r=[params.r], c=[[params.c]])


@dataclass
class BalanceCheck:
    """Balance flag for c_ij gamma_j = c_ji gamma_i, with the potential V when it holds"""
    balanced: bool
    potential: Optional[Callable] = None
    hessian_asymmetry: Optional[float] = None


@dataclass
class AbsorptionCriterion:
    """Lambda(+inf) = +inf and kappa(0+) < inf, which give almost sure absorption"""
    scale_diverges: bool
    kappa_finite: bool

    @property
    def holds(self) -> bool:
        return self.scale_diverges and self.kappa_finite


@dataclass
class DiffusionPath:
    """Euler path with its absorption time (inf if not absorbed before t_max)"""
    frame: pd.DataFrame
    absorption_time: float


@dataclass
class LvPath:
    """Multi-type path with per-type hitting times of {z_i = 0}"""
    frame: pd.DataFrame
    hit_times: np.ndarray

    @property
    def boundary_time(self) -> float:
        return float(self.hit_times.min())

    @property
    def extinction_time(self) -> float:
        return float(self.hit_times.max())


@dataclass
class ContinuousEigenResult:
    """Leading eigenpair of the discretized killed generator"""
    grid: np.ndarray
    lambda1: float
    eta1: np.ndarray
    alpha_density: np.ndarray
    lambda2: float
    epsilon: float
    x_max: float

    def population_density(self, to_population: Callable) -> pd.DataFrame:
        """The alpha density pushed to population coordinates z = to_population(x)"""
        z = to_population(self.grid)
        density = self.alpha_density / np.gradient(z, self.grid)
        return pd.DataFrame({"z": z, "density": density})

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"x": self.grid, "eta1": self.eta1, "alpha_density": self.alpha_density})

    def metadata(self) -> Dict[str, float]:
        return {"lambda1": self.lambda1, "lambda2": self.lambda2, "epsilon": self.epsilon,
                "x_max": self.x_max, "n_grid": int(self.grid.size)}


@dataclass
class ScalarDiffusion:
    """One Euler-Maruyama step of a one-dimensional model, vectorized over states"""
    step: Callable[[np.ndarray, float, np.ndarray], np.ndarray]
    name: str
    upper: float = math.inf

    @classmethod
    def feller(cls, params: FellerParams) -> "ScalarDiffusion":
        scale = 2 * params.gamma

        def step(z, dt, noise):
            return _square_root_euler(z, params.r - params.c * z, scale, dt, noise)

        return cls(step=step, name="feller")

    @classmethod
    def wright_fisher(cls) -> "ScalarDiffusion":
        below_one = np.nextafter(1.0, 0.0)

        def step(z, dt, noise):
            clipped = np.clip(z, 0.0, 1.0)
            nxt = z - z * dt + np.sqrt(clipped * (1.0 - clipped)) * math.sqrt(dt) * noise
            reflected = np.where(nxt >= 1.0, 2.0 - nxt, nxt)
            return np.minimum(reflected, below_one)

        return cls(step=step, name="wright_fisher", upper=1.0)

    @classmethod
    def kolmogorov(cls, model: KolmogorovModel) -> "ScalarDiffusion":
        def step(x, dt, noise):
            positive = np.maximum(x, np.finfo(float).tiny)
            return x - model.drift(positive) * dt + math.sqrt(dt) * noise

        return cls(step=step, name=model.name)


def _square_root_euler(z, growth, scale, dt, noise):
    return z + z * growth * dt + np.sqrt(scale * np.maximum(z, 0.0)) * math.sqrt(dt) * noise


def _step_count(dt: float, t_max: float) -> int:
    if dt <= 0 or t_max < 0:
        raise ValueError("Need dt > 0 and t_max >= 0")
    return int(math.ceil(t_max / dt - 1e-9))


def default_dt(r: float) -> float:
    return 1e-3 * min(1.0, 1.0 / r)


def normalize_gamma(params: FellerParams) -> Tuple[FellerParams, float]:
    """
    Rescale mass so the noise is sqrt(Z) dB.

    Z = Y / (2 gamma) solves dZ = sqrt(Z) dB + (r Z - 2 gamma c Z^2) dt; the
    returned factor 2 gamma maps back, Y = 2 gamma Z.
    """
    scale = 2.0 * params.gamma
    return FellerParams(r=params.r, c=params.c * scale, gamma=0.5), scale


def feller_to_kolmogorov(params: FellerParams) -> KolmogorovModel:
    """
    X = 2 sqrt(Z) for the gamma = 1/2 Feller diffusion (other gamma are normalized first).

    q(x) = 1/(2x) - r x / 2 + c x^3 / 8 and Q(y) = ln y + (r/2)(1 - y^2) + (c/16)(y^4 - 1).
    """
    normalized, scale = normalize_gamma(params)
    r, c = normalized.r, normalized.c

    def drift(x):
        x = np.asarray(x, dtype=float)
        return 1.0 / (2.0 * x) - r * x / 2.0 + c * x**3 / 8.0

    def potential(y):
        y = np.asarray(y, dtype=float)
        return np.log(y) + (r / 2.0) * (1.0 - y**2) + (c / 16.0) * (y**4 - 1.0)

    def to_population(x):
        return scale * np.asarray(x, dtype=float) ** 2 / 4.0

    return KolmogorovModel(drift=drift, potential=potential, name="feller", to_population=to_population,
                           params={"r": r, "c": c, "mass_scale": scale})


def _quad(func: Callable, a: float, b: float) -> float:
    """int_a^b func for 0 < a, b, integrated in u = ln z so power laws at 0 stay smooth"""

    def integrand(u):
        z = math.exp(u)
        return func(z) * z

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, _ = integrate.quad(integrand, math.log(a), math.log(b), epsrel=QUAD_RTOL, epsabs=0.0, limit=200)
        except (integrate.IntegrationWarning, ZeroDivisionError, OverflowError) as e:
            near = min(a, b)
            raise QuadratureError(f"Quadrature on [{min(a, b):.3g}, {max(a, b):.3g}] failed: {e}",
                                  _local_exponent(func, near)) from e
    return float(value)


def _local_exponent(func: Callable, x: float) -> Optional[float]:
    """Slope of log|f| against log x just above x, i.e. f ~ x^p"""
    a, b = max(x, 1e-12) * 1.01, max(x, 1e-12) * 2.0
    try:
        fa, fb = abs(float(func(a))), abs(float(func(b)))
    except (ValueError, OverflowError, ZeroDivisionError):
        return None
    if fa == 0 or fb == 0 or not (np.isfinite(fa) and np.isfinite(fb)):
        return None
    return math.log(fb / fa) / math.log(b / a)


def scale_functions(model: KolmogorovModel, x: float) -> Tuple[float, float]:
    """
    Lambda(x) = int_1^x e^Q(z) dz and kappa(x) = int_1^x e^Q(y) int_1^y e^-Q(z) dz dy.

    Raises:
        QuadratureError: with the local power exponent of the failing integrand
    """
    if x <= 0:
        raise ValueError("x must be positive")

    def inner(y):
        return _quad(lambda z: math.exp(-float(model.potential(z))), 1.0, y)

    scale = _quad(lambda z: math.exp(float(model.potential(z))), 1.0, x)
    kappa = _quad(lambda y: math.exp(float(model.potential(y))) * inner(y), 1.0, x)
    return scale, kappa


def absorption_criterion(model: KolmogorovModel) -> AbsorptionCriterion:
    """
    Check Lambda(+inf) = +inf from the growth of Q(x) + log x, and kappa(0+) < inf
    from the stability of kappa on 1e-2, 1e-4, ..., 1e-8.
    """
    tail = 10.0 ** np.arange(1, 7)
    growth = model.potential(tail) + np.log(tail)
    scale_diverges = bool(np.all(np.diff(growth) >= -1e-9) or growth.min() > -10.0)

    try:
        values = [scale_functions(model, 10.0 ** -k)[1] for k in (2, 4, 6, 8)]
    except QuadratureError as e:
        logger.debug(f"kappa near 0 did not integrate: {e}")
        return AbsorptionCriterion(scale_diverges=scale_diverges, kappa_finite=False)
    change = abs(values[-1] - values[-2])
    kappa_finite = bool(np.isfinite(values[-1]) and change <= 1e-3 * (1.0 + abs(values[-1])))
    return AbsorptionCriterion(scale_diverges=scale_diverges, kappa_finite=kappa_finite)


def _normal_blocks(rng: np.random.Generator, n_steps: int, shape: Tuple[int, ...]):
    """Standard normals for n_steps steps, drawn in blocks of at most NORMAL_BLOCK steps"""
    done = 0
    while done < n_steps:
        size = min(NORMAL_BLOCK, n_steps - done)
        yield from rng.standard_normal((size,) + shape)
        done += size


def _stability_warning(c: float, largest: float, dt: float):
    if c * largest * dt > STABILITY_LIMIT:
        logger.warning(f"Euler step may be unstable: c*max(Z)*dt = {c * largest * dt:.3g} > {STABILITY_LIMIT}")


def _scalar_path(diffusion: ScalarDiffusion, z0: float, dt: float, t_max: float, seed: int,
                 record_every: int = 1) -> Tuple[np.ndarray, np.ndarray, float]:
    n_steps = _step_count(dt, t_max)
    values = np.zeros(n_steps + 1)
    values[0] = z0
    absorbed_at = math.inf
    if z0 <= 0:
        values[:] = 0.0
        absorbed_at = 0.0
    else:
        z = float(z0)
        for n, noise in enumerate(_normal_blocks(make_rng(seed), n_steps, ()), start=1):
            z = float(diffusion.step(z, dt, noise))
            if z <= 0:
                absorbed_at = n * dt
                break
            values[n] = z
    times = dt * np.arange(n_steps + 1)
    return times[::record_every], values[::record_every], absorbed_at


def simulate_feller(params: FellerParams, z0: float, dt: float, t_max: float, seed: int,
                    record_every: int = 1) -> DiffusionPath:
    """
    Euler path of the logistic Feller diffusion, frozen at 0 from its absorption step.

    Returns:
        DiffusionPath: frame with columns t, x and the absorption time
    """
    times, values, absorbed_at = _scalar_path(ScalarDiffusion.feller(params), z0, dt, t_max, seed, record_every)
    _stability_warning(params.c, float(values.max()), dt)
    return DiffusionPath(frame=pd.DataFrame({"t": times, "x": values}), absorption_time=absorbed_at)


def simulate_wright_fisher(z0: float, dt: float, t_max: float, seed: int, record_every: int = 1) -> DiffusionPath:
    """dZ = sqrt(Z(1 - Z)) dB - Z dt, reflected below 1 and absorbed at 0"""
    if not 0 < z0 < 1:
        raise ValueError("z0 must lie in (0, 1)")
    times, values, absorbed_at = _scalar_path(ScalarDiffusion.wright_fisher(), z0, dt, t_max, seed, record_every)
    return DiffusionPath(frame=pd.DataFrame({"t": times, "x": values}), absorption_time=absorbed_at)


def _scalar_ensemble(diffusion: ScalarDiffusion, z0: float, dt: float, t_max: float, n_paths: int, seed: int,
                     record_times: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    n_steps = _step_count(dt, t_max)
    record_steps = _record_steps(record_times, dt, n_steps)
    rng = make_rng(seed)
    z = np.full(n_paths, float(z0))
    absorbed_at = np.where(z <= 0, 0.0, np.inf)
    z[z <= 0] = 0.0
    snapshots = np.empty((record_steps.size, n_paths))

    k = 0
    while k < record_steps.size and record_steps[k] == 0:
        snapshots[k] = z
        k += 1
    for n in range(1, n_steps + 1):
        alive = np.isinf(absorbed_at)
        if alive.any():
            z[alive] = diffusion.step(z[alive], dt, rng.standard_normal(int(alive.sum())))
            hit = alive & (z <= 0)
            z[hit] = 0.0
            absorbed_at[hit] = n * dt
        while k < record_steps.size and record_steps[k] == n:
            snapshots[k] = z
            k += 1
    return snapshots, absorbed_at


def _record_steps(record_times: Optional[Sequence[float]], dt: float, n_steps: int) -> np.ndarray:
    if record_times is None:
        return np.array([n_steps])
    steps = np.rint(np.asarray(record_times, dtype=float) / dt).astype(int)
    if np.any(np.diff(steps) < 0) or steps.min() < 0 or steps.max() > n_steps:
        raise ValueError("Record times must be nondecreasing within [0, t_max]")
    return steps


def simulate_feller_ensemble(params: FellerParams, z0: float, dt: float, t_max: float, n_paths: int, seed: int,
                             record_times: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """States at record_times (default t_max) as (n_records, n_paths), and absorption times"""
    return _scalar_ensemble(ScalarDiffusion.feller(params), z0, dt, t_max, n_paths, seed, record_times)


def simulate_wright_fisher_ensemble(z0: float, dt: float, t_max: float, n_paths: int, seed: int,
                                    record_times: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    return _scalar_ensemble(ScalarDiffusion.wright_fisher(), z0, dt, t_max, n_paths, seed, record_times)


def kolmogorov_ensemble(model: KolmogorovModel, x0: float, dt: float, t_max: float, n_paths: int, seed: int,
                        record_times: Optional[Sequence[float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Euler ensemble of dX = dB - q(X) dt absorbed at 0"""
    return _scalar_ensemble(ScalarDiffusion.kolmogorov(model), x0, dt, t_max, n_paths, seed, record_times)


def lv_step(params: LvParams, z: np.ndarray, dt: float, noise: np.ndarray) -> np.ndarray:
    """One Euler step for states of shape (..., k); frozen coordinates are the caller's business"""
    return _square_root_euler(z, params.r - z @ params.c.T, params.gamma, dt, noise)


def simulate_lv(params: LvParams, z0: Sequence[float], dt: float, t_max: float, seed: int,
                record_every: int = 1) -> LvPath:
    """
    Euler path of the k-type Lotka-Volterra diffusion.

    A coordinate is frozen at 0 from the first step it is nonpositive; several
    coordinates may freeze in the same step. With k = 1 the path coincides with
    simulate_feller for gamma_feller = gamma / 2.
    """
    z = np.asarray(z0, dtype=float).copy()
    if z.shape != (params.k,) or np.any(z < 0):
        raise ValueError(f"z0 must be a nonnegative vector of length {params.k}")
    n_steps = _step_count(dt, t_max)
    values = np.zeros((n_steps + 1, params.k))
    hit_times = np.where(z <= 0, 0.0, np.inf)
    z[z <= 0] = 0.0
    values[0] = z

    for n, noise in enumerate(_normal_blocks(make_rng(seed), n_steps, (params.k,)), start=1):
        if np.all(z == 0):
            break
        alive = z > 0
        z = np.where(alive, lv_step(params, z, dt, noise), 0.0)
        hit = alive & (z <= 0)
        z[hit] = 0.0
        hit_times[hit] = n * dt
        values[n] = z

    _stability_warning(float(params.c.max()), float(values.max()), dt)
    frame = pd.DataFrame(values[::record_every], columns=[f"x{i + 1}" for i in range(params.k)])
    frame.insert(0, "t", dt * np.arange(n_steps + 1)[::record_every])
    return LvPath(frame=frame, hit_times=hit_times)


def simulate_lv_ensemble(params: LvParams, z0: Sequence[float], dt: float, t_max: float, n_paths: int, seed: int,
                         record_times: Optional[Sequence[float]] = None) -> np.ndarray:
    """States at record_times as an (n_records, n_paths, k) array"""
    n_steps = _step_count(dt, t_max)
    record_steps = _record_steps(record_times, dt, n_steps)
    rng = make_rng(seed)
    z = np.tile(np.asarray(z0, dtype=float), (n_paths, 1))
    z[z < 0] = 0.0
    snapshots = np.empty((record_steps.size, n_paths, params.k))

    k = 0
    while k < record_steps.size and record_steps[k] == 0:
        snapshots[k] = z
        k += 1
    for n in range(1, n_steps + 1):
        alive = z > 0
        rows = np.flatnonzero(alive.any(axis=1))
        if rows.size:
            moved = lv_step(params, z[rows], dt, rng.standard_normal((rows.size, params.k)))
            z[rows] = np.where(alive[rows] & (moved > 0), moved, 0.0)
        while k < record_steps.size and record_steps[k] == n:
            snapshots[k] = z
            k += 1
    return snapshots


def balance_check(params: LvParams, rtol: float = 1e-12) -> BalanceCheck:
    """
    c_ij gamma_j == c_ji gamma_i for all i, j.

    When balanced, the drift of X^i = 2 sqrt(Z^i / gamma_i) is -grad V with
    V(x) = sum_i [ln(x_i)/2 - r_i x_i^2/4 + c_ii gamma_i x_i^4/32] + sum_{i<j} c_ij gamma_j x_i^2 x_j^2/16.
    """
    weighted = params.c * params.gamma[None, :]
    scale = np.abs(weighted).max()
    if np.abs(weighted - weighted.T).max() > rtol * scale:
        return BalanceCheck(balanced=False)

    upper = np.triu(weighted, 1)

    def potential(x):
        x = np.asarray(x, dtype=float)
        squares = x**2
        single = 0.5 * np.log(x) - params.r * squares / 4.0 + np.diag(weighted) * squares**2 / 32.0
        return float(single.sum() + squares @ upper @ squares / 16.0)

    return BalanceCheck(balanced=True, potential=potential,
                        hessian_asymmetry=_hessian_asymmetry(params, np.ones(params.k)))


def lv_kolmogorov_drift(params: LvParams, x: np.ndarray) -> np.ndarray:
    """Drift b with dX = dB + b(X) dt for X^i = 2 sqrt(Z^i / gamma_i)"""
    x = np.asarray(x, dtype=float)
    z = params.gamma * x**2 / 4.0
    return -1.0 / (2.0 * x) + (x / 2.0) * (params.r - params.c @ z)


def _hessian_asymmetry(params: LvParams, x: np.ndarray, h: float = 1e-5) -> float:
    """max |d_j b_i - d_i b_j| by central differences"""
    k = params.k
    jacobian = np.empty((k, k))
    for j in range(k):
        shift = np.zeros(k)
        shift[j] = h
        jacobian[:, j] = (lv_kolmogorov_drift(params, x + shift) - lv_kolmogorov_drift(params, x - shift)) / (2 * h)
    return float(np.abs(jacobian - jacobian.T).max())


def _patterns(k: int) -> List[Tuple[int, ...]]:
    return [combo for size in range(1, k + 1) for combo in itertools.combinations(range(k), size)]


def _pattern_label(pattern: Tuple[int, ...]) -> str:
    return "+".join(str(i + 1) for i in pattern)


def _pattern_frequencies(states: np.ndarray, patterns: List[Tuple[int, ...]]) -> Tuple[int, np.ndarray]:
    alive = states > 0
    surviving = alive.any(axis=1)
    n = int(surviving.sum())
    if n == 0:
        return 0, np.full(len(patterns), np.nan)
    codes = alive[surviving] @ (1 << np.arange(states.shape[1]))
    counts = np.array([np.count_nonzero(codes == sum(1 << i for i in p)) for p in patterns])
    return n, counts / n


def mode_probabilities(params: LvParams, z0: Sequence[float], dt: float, t_grid: Sequence[float], n_paths: int,
                       seed: int, method: str = "monte_carlo") -> pd.DataFrame:
    """
    P(surviving types = pattern | T_0 > t) for every non-empty pattern of types.

    method "monte_carlo" runs n_paths independent paths; "fleming_viot" runs
    n_paths particles conditioned on T_0 > t by the particle system.

    Returns:
        pd.DataFrame: columns t, survivors, void (fewer than 100 survivors) and one column per pattern
    """
    if n_paths < 1000:
        raise ValueError("n_paths must be at least 1000")
    t_grid = np.asarray(t_grid, dtype=float)
    patterns = _patterns(params.k)

    if method == "monte_carlo":
        snapshots = simulate_lv_ensemble(params, z0, dt, float(t_grid.max()), n_paths, seed, t_grid)
    elif method == "fleming_viot":
        from .fleming_viot import KilledDynamics, fv_run

        record = fv_run(KilledDynamics.lotka_volterra(params, dt), n_paths, np.asarray(z0, dtype=float),
                        float(t_grid.max()), t_grid, seed)
        snapshots = np.stack([snapshot.samples for snapshot in record.snapshots])
    else:
        raise ValueError(f"Unknown method {method!r}")

    rows = []
    for t, states in zip(t_grid, snapshots):
        survivors, frequencies = _pattern_frequencies(states, patterns)
        if survivors < MIN_SURVIVORS:
            logger.warning(f"Only {survivors} surviving paths at t={t:.4g}; mode probabilities are not meaningful")
        row = {"t": t, "survivors": survivors, "void": survivors < MIN_SURVIVORS}
        row.update({_pattern_label(p): f for p, f in zip(patterns, frequencies)})
        rows.append(row)
    return pd.DataFrame(rows)


def _reference_point(model: KolmogorovModel, epsilon: float) -> float:
    """Largest interior minimum of Q, or 1 when Q has none"""
    grid = np.geomspace(max(epsilon, 1e-6), 1e3, 4000)
    with np.errstate(over="ignore", invalid="ignore"):
        q = model.drift(grid)
    crossings = np.flatnonzero((q[:-1] < 0) & (q[1:] >= 0))
    if crossings.size == 0:
        return 1.0
    i = crossings[-1]
    return float(optimize.brentq(model.drift, grid[i], grid[i + 1]))


def default_x_max(model: KolmogorovModel, epsilon: float = 0.01) -> float:
    """Point beyond the reference minimum where Q exceeds its value there by 40"""
    start = _reference_point(model, epsilon)
    level = float(model.potential(start)) + POTENTIAL_MARGIN
    upper = 2.0 * start
    while float(model.potential(upper)) < level:
        upper *= 2.0
        if upper > 1e8:
            raise ValueError(f"Potential of {model.name} does not grow; pass x_max explicitly")
    return float(optimize.brentq(lambda x: float(model.potential(x)) - level, start, upper))


def discretize_generator(model: KolmogorovModel, epsilon: float = 0.01, x_max: Optional[float] = None,
                         n_grid: int = 1000) -> Tuple[SubGenerator, ContinuousEigenResult]:
    """
    Central finite differences of L phi = phi''/2 - q phi' on [epsilon, x_max], killed at both ends.

    The grid is doubled until h * max|q| < 1 so that all off-diagonal rates are
    nonnegative; the leading eigenpair comes from finite_qsd.solve_qsd_spectral.

    Args:
        model: one-dimensional Kolmogorov model
        epsilon: lower killing point
        x_max: upper killing point (default: Q reaches its reference minimum + 40)
        n_grid: number of interior grid points before refinement

    Returns:
        Tuple: the killed generator and the eigen-result on the interior grid
    """
    if x_max is None:
        x_max = default_x_max(model, epsilon)
    if not 0 < epsilon < x_max or n_grid < 100:
        raise ValueError("Need 0 < epsilon < x_max and n_grid >= 100")

    while True:
        h = (x_max - epsilon) / (n_grid + 1)
        grid = epsilon + h * np.arange(1, n_grid + 1)
        q = np.asarray(model.drift(grid), dtype=float)
        worst = int(np.argmax(np.abs(q)))
        if h * abs(q[worst]) < 1.0:
            break
        if 2 * n_grid > MAX_GRID:
            raise GridTooCoarseError(f"Drift {q[worst]:.4g} needs h < {1 / abs(q[worst]):.3g}", worst)
        n_grid *= 2
        logger.debug(f"Refining finite-difference grid to {n_grid} points")

    down = 1.0 / (2 * h**2) + q / (2 * h)
    up = 1.0 / (2 * h**2) - q / (2 * h)
    jumps = np.diag(up[:-1], 1) + np.diag(down[1:], -1)
    kill = np.zeros(n_grid)
    kill[0] += down[0]
    kill[-1] += up[-1]
    generator = SubGenerator.from_rates(jumps, kill)

    result = solve_qsd_spectral(generator, tol=1e-8)
    density = result.alpha / h
    density /= integrate.trapezoid(density, grid)
    eta = result.pi / integrate.trapezoid(result.pi * density, grid)
    eigen = ContinuousEigenResult(grid=grid, lambda1=result.theta, eta1=eta, alpha_density=density,
                                  lambda2=result.chi, epsilon=epsilon, x_max=x_max)
    logger.info(f"Discretized {model.name} on {n_grid} points: lambda1={result.theta:.6g}, lambda2={result.chi:.6g}")
    return generator, eigen


def logistic_ode(t, x0: float, r: float, c: float):
    """Solution of x' = r x - c x^2"""
    growth = np.exp(r * np.asarray(t, dtype=float))
    return r * x0 * growth / (r + c * x0 * (growth - 1.0))


def scaled_bd_paths(K: int, lam: float, mu: float, c: float, regime: str, z0: float, t_max: float, seed: int,
                    gamma: float = 0.5) -> pd.DataFrame:
    """
    Birth-death chain Z^K started at round(K z0), returned as X^K = Z^K / K.

    Regime "ode": birth lam i, death mu i + (c/K) i (i - 1).
    Regime "feller": birth gamma K i + lam i, death gamma K i + mu i + (c/K) i (i - 1).
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if regime == "ode":
        extra = 0.0
    elif regime == "feller":
        extra = gamma * K
    else:
        raise ValueError(f"Unknown regime {regime!r}")

    rates = BirthDeathRates(
        birth=lambda i: (extra + lam) * i,
        death=lambda i: (extra + mu) * i + (c / K) * i * (i - 1),
        kind=f"scaled_{regime}",
        params={"K": K, "lambda": lam, "mu": mu, "c": c, "gamma": gamma},
    )
    path = simulate_bd_path(rates, int(round(K * z0)), t_max, seed)
    return pd.DataFrame({"t": path["t"], "x": path["state"] / K})
