from typing import Optional


class QsdError(Exception):
    """Base class for numerical failures raised by the toolkit"""
    exit_code = 3


class ReducibleChainError(QsdError):
    """The killed generator is not strongly connected"""


class NoConvergenceError(QsdError):
    """An iteration stopped before reaching its tolerance"""

    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(f"{message} (iterations={iterations}, residual={residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class SurvivalUnderflowError(QsdError):
    """Survival probability fell below the representable range"""


class NotSubcriticalError(QsdError):
    """Yaglom limit requested for a critical or supercritical Galton-Watson process"""


class InconclusiveVerdictError(QsdError):
    """A series test could not decide convergence"""

    def __init__(self, message: str, verdict=None):
        super().__init__(message)
        self.verdict = verdict


class QuadratureError(QsdError):
    """Adaptive quadrature failed, usually near a singular endpoint"""

    def __init__(self, message: str, singular_exponent: Optional[float] = None):
        if singular_exponent is not None:
            message = f"{message} (local exponent ~ {singular_exponent:.3f})"
        super().__init__(message)
        self.singular_exponent = singular_exponent


class GridTooCoarseError(QsdError):
    """Finite-difference scheme lost its sign structure on some cell"""

    def __init__(self, message: str, cell: int):
        super().__init__(f"{message} (cell {cell})")
        self.cell = cell


class SimulationError(QsdError):
    """Base class for Monte Carlo failures"""
    exit_code = 4


class EnsembleCollapseError(SimulationError):
    def __init__(self, step: int, time: float):
        super().__init__(
            f"All particles absorbed within Euler step {step} (t={time:.6g}); "
            "use more particles or a smaller dt"
        )
        self.step = step
        self.time = time


class EventCapExceededError(SimulationError):
    def __init__(self, events: int, time: float):
        super().__init__(f"Event cap of {events} reached at t={time:.6g}")
        self.events = events
        self.time = time


class PopulationOverflowError(SimulationError):
    def __init__(self, generation: int, size: int):
        super().__init__(f"Population {size} exceeded the cap at generation {generation}")
        self.generation = generation
        self.size = size


class ScenarioError(QsdError):
    """Scenario file failed to parse or validate"""
    exit_code = 2

    def __init__(self, message: str, field: Optional[str] = None, line: Optional[int] = None):
        location = ""
        if field:
            location += f" [field {field}"
            location += f", line {line}]" if line is not None else "]"
        super().__init__(message + location)
        self.field = field
        self.line = line
