import logging
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..core.errors import ScenarioError

logger = logging.getLogger("qsd-scenarios")

BUILTIN_DIR = Path(__file__).parent.parent.parent / "data" / "scenarios"
MONTE_CARLO_SOLVERS = {"fv", "euler"}
MODEL_KINDS = {"uniform_killing_walk", "generator_csv", "birth_death", "galton_watson", "feller",
               "wright_fisher", "lotka_volterra"}

# model kinds each solver accepts
SOLVER_MODELS = {
    "spectral": {"uniform_killing_walk", "generator_csv", "birth_death", "feller"},
    "bd_analytic": {"birth_death"},
    "fv": {"uniform_killing_walk", "generator_csv", "birth_death", "feller", "wright_fisher", "lotka_volterra"},
    "euler": {"feller", "wright_fisher", "lotka_volterra", "birth_death"},
    "gw": {"galton_watson"},
}

# short command-line flags and the settings they set
FLAG_KEYS = {
    "seed": "seed",
    "particles": "settings.particles",
    "epsilon": "settings.epsilon",
    "dt": "settings.dt",
    "t_max": "settings.t_max",
}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class UniformKillingWalkModel(_Strict):
    kind: Literal["uniform_killing_walk"]
    n_states: int = Field(100, ge=1)
    d: float = Field(0.001, gt=0)
    init_state: int = Field(1, ge=1)


class GeneratorCsvModel(_Strict):
    kind: Literal["generator_csv"]
    path: str
    init_state: int = Field(1, ge=1)


class BirthDeathModel(_Strict):
    kind: Literal["birth_death"]
    rates: Literal["linear", "logistic", "table"] = "linear"
    lam: Optional[float] = Field(None, alias="lambda", gt=0)
    mu: Optional[float] = Field(None, gt=0)
    c: float = Field(0.0, ge=0)
    birth_table: Optional[List[float]] = None
    death_table: Optional[List[float]] = None
    table_csv: Optional[str] = None
    n_trunc: int = Field(100, ge=2)
    init_state: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _rates_complete(self):
        if self.rates == "table":
            if not self.table_csv and not (self.birth_table and self.death_table):
                raise ValueError("table rates need table_csv or both birth_table and death_table")
        elif self.lam is None or self.mu is None:
            raise ValueError(f"{self.rates} rates need lambda and mu")
        if self.rates == "logistic" and self.c <= 0:
            raise ValueError("logistic rates need c > 0")
        return self


class GaltonWatsonModel(_Strict):
    kind: Literal["galton_watson"]
    pmf: List[float]
    z0: int = Field(1, ge=0)


class FellerModel(_Strict):
    kind: Literal["feller"]
    r: float = Field(gt=0)
    c: float = Field(ge=0)
    gamma: float = Field(0.5, gt=0)
    z0: float = Field(1.0, ge=0)


class WrightFisherModel(_Strict):
    kind: Literal["wright_fisher"]
    z0: float = Field(0.5, gt=0, lt=1)


class LotkaVolterraModel(_Strict):
    kind: Literal["lotka_volterra"]
    gamma: List[float]
    r: List[float]
    c: List[List[float]]
    z0: List[float]


ModelSpec = Annotated[
    Union[UniformKillingWalkModel, GeneratorCsvModel, BirthDeathModel, GaltonWatsonModel, FellerModel,
          WrightFisherModel, LotkaVolterraModel],
    Field(discriminator="kind"),
]


class Settings(_Strict):
    particles: int = Field(10000, ge=2)
    epsilon: float = Field(0.001, gt=0, lt=1)
    dt: Optional[float] = Field(None, gt=0)
    t_max: float = Field(100.0, gt=0)
    t_burnin: Optional[float] = Field(None, ge=0)
    n_times: int = Field(201, ge=2)
    n_snapshots: int = Field(50, ge=1)
    n_paths: int = Field(1000, ge=1)
    n_grid: int = Field(1000, ge=100)
    bins: int = Field(100, ge=1)
    generations: int = Field(40, ge=1)
    starts: Optional[List[float]] = Field(None, min_length=1)
    variants: List[Dict[str, float]] = Field(default_factory=list)


class Tolerances(_Strict):
    spectral: float = Field(1e-10, gt=0)
    bisection: float = Field(1e-6, gt=0)
    gw: float = Field(1e-12, gt=0)


class Scenario(_Strict):
    """A model, the solvers to run on it and the artifacts to write"""
    name: str
    description: str = ""
    model: ModelSpec
    solvers: List[Literal["spectral", "bd_analytic", "fv", "euler", "gw"]] = Field(min_length=1)
    outputs: List[Literal["qsd", "curves", "paths", "distances", "classification", "qprocess"]] = Field(min_length=1)
    seed: Optional[int] = None
    settings: Settings = Field(default_factory=Settings)
    tolerances: Tolerances = Field(default_factory=Tolerances)
    source_dir: Optional[str] = Field(None, exclude=True)

    @model_validator(mode="after")
    def _supported(self):
        for solver in self.solvers:
            if self.model.kind not in SOLVER_MODELS[solver]:
                raise ValueError(f"solver {solver} does not support model kind {self.model.kind}")
        if MONTE_CARLO_SOLVERS.intersection(self.solvers) and self.seed is None:
            raise ValueError("a seed is required for Monte Carlo solvers")
        for variant in self.settings.variants:
            self.model_variant(variant)
        if self.settings.starts and self.model.kind == "birth_death":
            if any(s != int(s) or not 1 <= s <= self.model.n_trunc for s in self.settings.starts):
                raise ValueError(f"birth-death starts must be integers in 1..{self.model.n_trunc}")
        return self

    def model_variant(self, changes: Dict[str, float]):
        """The model with some parameters replaced, validated like the original"""
        fields = self.model.model_dump(by_alias=True)
        unknown = set(changes) - set(fields)
        if unknown:
            raise ValueError(f"variant sets unknown model parameters {sorted(unknown)}")
        try:
            return type(self.model).model_validate({**fields, **changes})
        except ValidationError as e:
            raise ValueError(f"invalid variant {changes}: {e.errors()[0]['msg']}") from None


def list_scenarios() -> List[Tuple[str, str]]:
    """Names and one-line descriptions of the built-in scenarios"""
    entries = []
    for path in sorted(BUILTIN_DIR.glob("*.yaml")):
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
        entries.append((raw.get("name", path.stem), str(raw.get("description", "")).strip().splitlines()[0]
                        if raw.get("description") else ""))
    return entries


def resolve_scenario_path(name_or_path: str) -> Path:
    """A file path, or the name of a built-in scenario"""
    path = Path(name_or_path)
    if path.is_file():
        return path
    builtin = BUILTIN_DIR / f"{name_or_path}.yaml"
    if builtin.is_file():
        return builtin
    raise ScenarioError(f"No scenario file or built-in named {name_or_path!r}")


def _node_line(root: Optional[yaml.Node], location: Tuple[Any, ...]) -> Optional[int]:
    """1-based line of the deepest YAML node along a validation error location"""
    node = root
    line = node.start_mark.line + 1 if node is not None else None
    for key in location:
        if isinstance(node, yaml.MappingNode):
            match = next((value for k, value in node.value if k.value == str(key)), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            match = node.value[key]
        else:
            match = None
        if match is None:
            break
        node = match
        line = node.start_mark.line + 1
    return line


def _set_dotted(raw: Dict[str, Any], key: str, value: Any):
    parts = key.split(".")
    target = raw
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ScenarioError(f"Cannot override {key}: {part} is not a mapping", field=key)
    target[parts[-1]] = value


def _qualify(key: str, raw: Dict[str, Any]) -> str:
    """Map a bare override name to model.<name> or settings.<name>"""
    key = key.replace("-", "_")
    if "." in key:
        return key
    if key in FLAG_KEYS:
        return FLAG_KEYS[key]
    model = raw.get("model") or {}
    if key in model or key in ("lambda", "mu", "c", "d", "r", "gamma", "z0", "n_states", "n_trunc", "init_state"):
        return f"model.{key}"
    if key in Settings.model_fields:
        return f"settings.{key}"
    if key in Tolerances.model_fields:
        return f"tolerances.{key}"
    raise ScenarioError(f"Unknown override {key!r}", field=key)


def apply_overrides(raw: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Apply command-line overrides on top of file values; string values are parsed as YAML scalars"""
    for key, value in overrides.items():
        if isinstance(value, str):
            value = yaml.safe_load(value)
        _set_dotted(raw, _qualify(key, raw), value)
    return raw


def load_scenario(name_or_path: str, overrides: Optional[Dict[str, Any]] = None) -> Scenario:
    """
    Parse and validate a scenario file.

    Args:
        name_or_path: path to a YAML file or the name of a built-in scenario
        overrides: key -> value pairs beating the file values (dotted keys or bare model/settings names)

    Returns:
        Scenario: validated scenario

    Raises:
        ScenarioError: on YAML syntax errors, unknown keys or invalid values, naming field and line
    """
    path = resolve_scenario_path(name_or_path)
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        raw = yaml.safe_load(text) or {}
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ScenarioError(f"Invalid YAML in {path}: {e}", line=mark.line + 1 if mark else None) from e
    if not isinstance(raw, dict):
        raise ScenarioError(f"Scenario {path} must be a mapping")

    raw = apply_overrides(raw, overrides or {})
    raw["source_dir"] = str(path.parent)
    try:
        scenario = Scenario.model_validate(raw)
    except ValidationError as e:
        error = e.errors()[0]
        location = tuple(part for part in error["loc"] if not (isinstance(part, str) and part in MODEL_KINDS))
        field = ".".join(str(part) for part in location) or "scenario"
        raise ScenarioError(f"{path.name}: {error['msg']}", field=field, line=_node_line(root, location)) from e

    logger.info(f"Loaded scenario {scenario.name} ({scenario.model.kind}; solvers {', '.join(scenario.solvers)})")
    return scenario
