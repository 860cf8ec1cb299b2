import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import integrate

from ..core import birth_death, branching, diffusion, finite_qsd, fleming_viot
from ..core.birth_death import BirthDeathRates
from ..core.errors import ScenarioError
from ..core.finite_qsd import SubGenerator
from ..core.random_streams import replica_seed
from .artifacts import ArtifactWriter
from .scenario_loader import Scenario

logger = logging.getLogger("qsd-scenarios")

SOLVER_ORDER = ("spectral", "bd_analytic", "gw", "euler", "fv")
MAX_PATH_ROWS = 10000
GRID_EPSILON = 0.01


def load_generator_csv(path: Path) -> SubGenerator:
    """Dense row-major generator with a header row of state labels"""
    frame = pd.read_csv(path)
    return SubGenerator(entries=frame.to_numpy(dtype=float), labels=[str(c) for c in frame.columns])


def _resolve(path: str, source_dir: Optional[str]) -> Path:
    resolved = Path(path)
    if not resolved.is_absolute() and source_dir:
        resolved = Path(source_dir) / resolved
    return resolved


def load_rate_table_csv(path: Path) -> BirthDeathRates:
    """Birth and death rates from a CSV with columns i, lambda, mu and rows i = 1..n"""
    try:
        frame = pd.read_csv(path)
    except (OSError, ValueError) as e:
        raise ScenarioError(f"Cannot read rate table {path}: {e}", field="model.table_csv")
    if list(frame.columns) != ["i", "lambda", "mu"]:
        raise ScenarioError(f"Rate table {path} needs the header i,lambda,mu, got {list(frame.columns)}",
                            field="model.table_csv")
    if frame.empty or not np.array_equal(frame["i"].to_numpy(), np.arange(1, len(frame) + 1)):
        raise ScenarioError(f"Rate table {path} must list i = 1..n in order", field="model.table_csv")
    return BirthDeathRates.table(frame["lambda"].to_numpy(dtype=float), frame["mu"].to_numpy(dtype=float))


def build_rates(model, source_dir: Optional[str] = None) -> BirthDeathRates:
    if model.rates == "linear":
        return BirthDeathRates.linear(model.lam, model.mu)
    if model.rates == "logistic":
        return BirthDeathRates.logistic(model.lam, model.mu, model.c)
    if model.table_csv:
        return load_rate_table_csv(_resolve(model.table_csv, source_dir))
    return BirthDeathRates.table(model.birth_table, model.death_table)


def _stride(n_steps: int) -> int:
    return max(1, n_steps // MAX_PATH_ROWS)


def _tagged(frame: pd.DataFrame, change: Dict[str, float], start: float) -> pd.DataFrame:
    """Prefix a curve with its variant parameters and starting state"""
    frame.insert(0, "z0", start)
    for key, value in reversed(list(change.items())):
        frame.insert(0, key, value)
    return frame


class ScenarioPipeline:
    """
    Runs the solvers of one scenario and writes the requested artifacts.

    Solvers run in a fixed order (spectral first) so that Monte Carlo estimates
    can be compared against the spectral QSD of the same run.
    """

    def __init__(self, scenario: Scenario, writer: ArtifactWriter):
        self.scenario = scenario
        self.writer = writer
        self.model = scenario.model
        self.settings = scenario.settings
        self.results: Dict[str, Any] = {}
        self.wall_times: Dict[str, float] = {}
        self._alpha: Optional[np.ndarray] = None

    def run(self) -> Dict[str, Any]:
        for solver in sorted(self.scenario.solvers, key=SOLVER_ORDER.index):
            started = time.perf_counter()
            logger.info(f"Running solver {solver} on {self.scenario.name}")
            getattr(self, f"_run_{solver}")()
            self.wall_times[solver] = time.perf_counter() - started

        self.writer.write_manifest({
            "scenario": self.scenario.model_dump(by_alias=True, exclude={"source_dir"}),
            "seed": self.scenario.seed,
            "results": self.results,
            "wall_times": self.wall_times,
        })
        return self.results

    def _wants(self, output: str) -> bool:
        return output in self.scenario.outputs

    def _time_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.settings.t_max, self.settings.n_times)

    def _chain(self) -> Tuple[SubGenerator, np.ndarray]:
        kind = self.model.kind
        if kind == "uniform_killing_walk":
            generator = finite_qsd.uniform_killing_walk(self.model.n_states, self.model.d)
        elif kind == "generator_csv":
            generator = load_generator_csv(_resolve(self.model.path, self.scenario.source_dir))
        else:
            generator = self._rates().truncated_generator(self.model.n_trunc)
        return generator, finite_qsd.point_mass(generator.dim, self.model.init_state)

    def _rates(self, model=None) -> BirthDeathRates:
        return build_rates(model or self.model, self.scenario.source_dir)

    def _variants(self) -> List[Tuple[Dict[str, float], Any]]:
        """(changes, model) pairs; the scenario model alone when no variants are listed"""
        return [(change, self.scenario.model_variant(change)) for change in self.settings.variants] or [({}, self.model)]

    def _starts(self) -> List[float]:
        if self.settings.starts:
            return list(self.settings.starts)
        return [self.model.init_state if self.model.kind == "birth_death" else self.model.z0]

    def _dt(self, model=None) -> float:
        model = model or self.model
        if self.settings.dt is not None:
            return self.settings.dt
        if model.kind == "feller":
            return diffusion.default_dt(model.r)
        if model.kind == "lotka_volterra":
            return diffusion.default_dt(max(model.r))
        return 1e-3

    def _run_spectral(self):
        if self.model.kind == "feller":
            self._run_discretized_feller()
            return

        generator, init = self._chain()
        result = finite_qsd.solve_qsd_spectral(generator, tol=self.scenario.tolerances.spectral)
        self._alpha = result.alpha
        self.results["spectral"] = result.metadata()

        if self._wants("qsd"):
            self.writer.write_frame("qsd", pd.DataFrame({"state": generator.labels, "alpha": result.alpha,
                                                         "pi": result.pi}))
        if self._wants("curves"):
            grid = self._time_grid()
            laws, log_survival = finite_qsd.conditioned_path(generator, init, grid)
            rates = -(laws @ generator.entries.sum(axis=1))
            self.writer.write_frame("curves", pd.DataFrame({"t": grid, "survival": np.exp(log_survival),
                                                            "log_survival": log_survival,
                                                            "extinction_rate": rates}))
        if self._wants("distances"):
            if self.model.kind == "birth_death":
                frame = self._bd_distance_curves()
            else:
                frame = finite_qsd.yaglom_distance_curve(generator, init, self._time_grid(), result.alpha)
            self.writer.write_frame("distances", frame)
        if self._wants("qprocess"):
            process = finite_qsd.q_process(result, generator)
            self.writer.write_frame("qprocess", pd.DataFrame({"state": generator.labels, "alpha": result.alpha,
                                                              "stationary": process.stationary}))
            self.results["spectral"]["qprocess_tv_to_alpha"] = float(0.5 * np.abs(process.stationary - result.alpha).sum())

    def _bd_distance_curves(self) -> pd.DataFrame:
        """Exact sup-distance curves, one per variant and starting state"""
        frames = []
        for change, model in self._variants():
            generator = self._rates(model).truncated_generator(model.n_trunc)
            alpha = finite_qsd.solve_qsd_spectral(generator, tol=self.scenario.tolerances.spectral).alpha
            for start in map(int, self._starts()):
                init = finite_qsd.point_mass(generator.dim, start)
                frame = finite_qsd.yaglom_distance_curve(generator, init, self._time_grid(), alpha)
                self._record_distance(change, start, float(frame["sup_distance"].iloc[-1]))
                frames.append(_tagged(frame, change, start))
        return pd.concat(frames, ignore_index=True)

    def _record_distance(self, change: Dict[str, float], start: float, final: float):
        self.results.setdefault("distances", []).append({**change, "z0": start, "final_distance": final})

    def _feller_params(self, model=None) -> diffusion.FellerParams:
        model = model or self.model
        return diffusion.FellerParams(r=model.r, c=model.c, gamma=model.gamma)

    def _run_discretized_feller(self):
        model = diffusion.feller_to_kolmogorov(self._feller_params())
        _, eigen = diffusion.discretize_generator(model, epsilon=GRID_EPSILON, n_grid=self.settings.n_grid)
        self.results["spectral"] = eigen.metadata()
        population = eigen.population_density(model.to_population)
        self.results["spectral"]["population_mode"] = float(population["z"].iloc[int(population["density"].argmax())])
        if self._wants("qsd"):
            self.writer.write_frame("eigen", eigen.frame())
            self.writer.write_frame("yaglom_density", population)

    def _run_bd_analytic(self):
        rates = self._rates()
        classification = birth_death.classify_qsd(rates, tol=self.scenario.tolerances.bisection)
        summary = classification.summary()
        self.results["bd_analytic"] = summary
        if self._wants("classification"):
            self.writer.write_frame("classification", pd.DataFrame({"quantity": list(summary),
                                                                    "value": [str(v) for v in summary.values()]}))
        if self._wants("qsd") and classification.qsd_regime != birth_death.QsdRegime.NONE:
            truncated = birth_death.truncated_qsd(rates, self.model.n_trunc, tol=self.scenario.tolerances.spectral)
            self.results["bd_analytic"].update({"theta": truncated.result.theta,
                                                "truncation_sensitivity": truncated.sensitivity})
            self.writer.write_frame("bd_qsd", pd.DataFrame({"state": np.arange(1, self.model.n_trunc + 1),
                                                            "alpha": truncated.result.alpha}))

    def _run_gw(self):
        offspring = branching.OffspringDistribution(pmf=self.model.pmf)
        status = branching.classify(offspring)
        self.results["gw"] = {"criticality": status.criticality.value, "mean": status.mean,
                              "extinction_probability": status.extinction_probability}
        if status.criticality == branching.Criticality.SUBCRITICAL:
            yaglom = branching.yaglom_iteration(offspring, tol=self.scenario.tolerances.gw)
            self.results["gw"].update({"iterations": yaglom.iterations, "residual": yaglom.residual})
            if self._wants("qsd"):
                self.writer.write_frame("gw_yaglom", pd.DataFrame({"s": yaglom.s_grid, "ghat": yaglom.ghat}))
                self.writer.write_frame("gw_pmf", pd.DataFrame({"k": np.arange(1, yaglom.pmf.size + 1),
                                                                "pmf": yaglom.pmf}))
        else:
            logger.warning(f"Offspring law is {status.criticality.value}: no quasi-stationary distribution")
        if self._wants("paths") and self.scenario.seed is not None:
            path = branching.simulate_gw(offspring, self.model.z0, self.settings.generations, self.scenario.seed)
            self.writer.write_frame("gw_path", pd.DataFrame({"n": np.arange(path.size), "z": path}))

    def _run_euler(self):
        seed, t_max, dt = self.scenario.seed, self.settings.t_max, self._dt()
        kind = self.model.kind
        stride = _stride(int(t_max / dt))
        if kind == "birth_death":
            frame = birth_death.simulate_bd_path(self._rates(), self.model.init_state, t_max, seed)
            self.results["euler"] = {"absorption_time": birth_death.absorption_time(frame), "events": len(frame) - 2}
        elif kind == "feller":
            path = diffusion.simulate_feller(self._feller_params(), self.model.z0, dt, t_max, seed, stride)
            frame = path.frame
            self.results["euler"] = {"absorption_time": path.absorption_time, "dt": dt}
        elif kind == "wright_fisher":
            path = diffusion.simulate_wright_fisher(self.model.z0, dt, t_max, seed, stride)
            frame = path.frame
            self.results["euler"] = {"absorption_time": path.absorption_time, "dt": dt}
        else:
            params = diffusion.LvParams(gamma=self.model.gamma, r=self.model.r, c=self.model.c)
            path = diffusion.simulate_lv(params, self.model.z0, dt, t_max, seed, stride)
            frame = path.frame
            self.results["euler"] = {"hit_times": path.hit_times, "dt": dt,
                                     "balanced": diffusion.balance_check(params).balanced}
            if self._wants("curves"):
                modes = diffusion.mode_probabilities(params, self.model.z0, dt, self._time_grid(),
                                                     max(1000, self.settings.n_paths), seed)
                self.writer.write_frame("modes", modes)
        if self._wants("paths"):
            self.writer.write_frame("paths", frame)

    def _dynamics(self) -> Tuple[fleming_viot.KilledDynamics, Any]:
        kind, settings = self.model.kind, self.settings
        if kind in ("uniform_killing_walk", "generator_csv"):
            generator, _ = self._chain()
            return fleming_viot.KilledDynamics.finite_chain(generator), self.model.init_state
        if kind == "birth_death":
            return fleming_viot.KilledDynamics.bd_chain(self._rates()), self.model.init_state
        if kind == "feller":
            motion = diffusion.ScalarDiffusion.feller(self._feller_params())
            return fleming_viot.KilledDynamics.scalar_diffusion(motion, settings.epsilon, self._dt()), self.model.z0
        if kind == "wright_fisher":
            motion = diffusion.ScalarDiffusion.wright_fisher()
            return fleming_viot.KilledDynamics.scalar_diffusion(motion, settings.epsilon, self._dt()), self.model.z0
        params = diffusion.LvParams(gamma=self.model.gamma, r=self.model.r, c=self.model.c)
        return fleming_viot.KilledDynamics.lotka_volterra(params, self._dt()), np.asarray(self.model.z0, dtype=float)

    def _run_fv(self):
        settings, seed = self.settings, self.scenario.seed
        if self.model.kind == "lotka_volterra":
            params = diffusion.LvParams(gamma=self.model.gamma, r=self.model.r, c=self.model.c)
            modes = diffusion.mode_probabilities(params, self.model.z0, self._dt(), self._time_grid(),
                                                 max(1000, settings.particles), seed, method="fleming_viot")
            self.results["fv"] = {"final_modes": modes.iloc[-1].drop(["t", "void"]).to_dict()}
            if self._wants("curves"):
                self.writer.write_frame("fv_modes", modes)
            return

        dynamics, init = self._dynamics()
        t_burnin = settings.t_burnin if settings.t_burnin is not None else settings.t_max / 2
        estimate = fleming_viot.fv_yaglom_estimate(dynamics, settings.particles, t_burnin, settings.t_max - t_burnin,
                                                   settings.n_snapshots, seed, init, settings.bins)
        self.results["fv"] = {"particles": settings.particles, "revivals": estimate.revivals,
                              "mean": float(np.mean(estimate.samples))}

        if estimate.kind == "discrete":
            frame = pd.DataFrame({"state": estimate.support, "weight": estimate.weights})
            if self._alpha is not None:
                self.results["fv"]["tv_to_spectral"] = fleming_viot.distance(estimate, self._alpha, "tv")
        else:
            frame = pd.DataFrame({"bin_left": estimate.edges[:-1], "bin_right": estimate.edges[1:],
                                  "weight": estimate.weights})
            if self.model.kind == "wright_fisher":
                self.results["fv"]["l1_to_2_minus_2x"] = fleming_viot.distance(
                    estimate, lambda x: 2.0 - 2.0 * x, "l1_hist")
        if self._wants("qsd"):
            self.writer.write_frame("fv_yaglom", frame)
        if self._wants("distances") and self.model.kind == "feller":
            self.writer.write_frame("distances", self._feller_distance_curves())

    def _feller_distance_curves(self) -> pd.DataFrame:
        """
        L1 distance between particle histograms and the discretized Yaglom density,
        one curve per variant and starting state.

        Bins cover [0, max(largest start, top of the density grid)].
        """
        settings, frames, run = self.settings, [], 0
        for change, model in self._variants():
            params = self._feller_params(model)
            kolmogorov = diffusion.feller_to_kolmogorov(params)
            _, eigen = diffusion.discretize_generator(kolmogorov, epsilon=GRID_EPSILON, n_grid=settings.n_grid)
            population = eigen.population_density(kolmogorov.to_population)
            z = population["z"].to_numpy()
            cumulative = integrate.cumulative_trapezoid(population["density"].to_numpy(), z, initial=0.0)
            edges = np.linspace(0.0, max(max(self._starts()), float(z[-1])), settings.bins + 1)
            reference = np.diff(np.interp(edges, z, cumulative / cumulative[-1]))

            motion = diffusion.ScalarDiffusion.feller(params)
            dynamics = fleming_viot.KilledDynamics.scalar_diffusion(motion, settings.epsilon, self._dt(model))
            for start in self._starts():
                frame = fleming_viot.fv_distance_curve(dynamics, settings.particles, start, self._time_grid(),
                                                       reference, replica_seed(self.scenario.seed, run),
                                                       "l1_hist", edges)
                run += 1
                self._record_distance(change, start, float(frame["distance"].iloc[-1]))
                frames.append(_tagged(frame, change, start))
        return pd.concat(frames, ignore_index=True)
