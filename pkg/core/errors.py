from __future__ import annotations

from typing import Optional


class FarmError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(FarmError, ValueError):
    pass


class ConfigError(FarmError, ValueError):
    pass


class NumericFailureError(FarmError, ArithmeticError):
    def __init__(self, message: str, cluster: Optional[int] = None, state: Optional[int] = None,
                 eta0: Optional[float] = None) -> None:
        super().__init__(message)
        self.cluster = cluster
        self.state = state
        self.eta0 = eta0


class NoSignChangeError(FarmError):
    def __init__(self, gamma_low: float, gamma_high: float, e_low: float, e_high: float) -> None:
        super().__init__(
            f"Gamma has no sign change on [{e_low:.6g}, {e_high:.6g}]: "
            f"Gamma(low)={gamma_low:.6g}, Gamma(high)={gamma_high:.6g}"
        )
        self.gamma_low = gamma_low
        self.gamma_high = gamma_high
        self.e_low = e_low
        self.e_high = e_high


class StateSpaceTooLargeError(FarmError):
    def __init__(self, states: int, cap: int) -> None:
        super().__init__(f"state space has {states} states, cap is {cap}")
        self.states = states
        self.cap = cap


class ConvergenceError(FarmError):
    def __init__(self, message: str, span: float) -> None:
        super().__init__(f"{message} (final span {span:.3e})")
        self.span = span


class TraceFormatError(FarmError, ValueError):
    def __init__(self, message: str, path: str, line: int) -> None:
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class SimulationError(FarmError, RuntimeError):
    def __init__(self, message: str, time: float) -> None:
        super().__init__(f"t={time:.6g}: {message}")
        self.time = time
