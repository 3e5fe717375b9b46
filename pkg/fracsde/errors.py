"""fracsde 各模块共用的异常类型。

命令行把它们映射为退出码: ``DomainError`` -> 1,
``NumericalFailure`` -> 2, ``PathFileError`` -> 3。
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple


class FracSdeError(Exception):
    """所有 fracsde 异常的基类"""


class DomainError(FracSdeError, ValueError):
    """Invalid parameters, off-grid endpoints or missing input data."""


class PathFileError(FracSdeError, OSError):
    """A path or config file exists but cannot be parsed."""


class NumericalFailure(FracSdeError, RuntimeError):
    """A solver could not produce a trustworthy result."""


class FactorizationError(NumericalFailure):
    def __init__(self, pivot: int, detail: str = ""):
        self.pivot = pivot
        message = f"covariance factorization failed at pivot {pivot}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class ContractionFailure(NumericalFailure):
    def __init__(self, interval: Tuple[float, float], ratios: Sequence[float], reason: str = ""):
        self.interval = interval
        self.ratios = list(ratios)
        message = (
            f"Picard iteration is not contracting on [{interval[0]:.6g}, {interval[1]:.6g}]"
        )
        if reason:
            message = f"{message} ({reason})"
        if self.ratios:
            message = f"{message}; last difference ratios {', '.join(f'{r:.3g}' for r in self.ratios[-3:])}"
        super().__init__(message)


class ResolutionError(NumericalFailure):
    def __init__(self, interval_start: float, tau: float, dt: float):
        self.interval_start = interval_start
        self.tau = tau
        self.dt = dt
        super().__init__(
            f"step size tau={tau:.3g} at t={interval_start:.6g} is below the grid spacing "
            f"dt={dt:.3g}; refine the grid (more steps) or reduce the horizon"
        )


class HorizonExceededError(NumericalFailure):
    """The shift inverse stopped contracting: ``time`` lies past the invertibility horizon."""

    def __init__(self, time: float, ratio: Optional[float], iterations: int, reason: str = ""):
        self.time = time
        self.ratio = ratio
        self.iterations = iterations
        ratio_text = "n/a" if ratio is None else f"{ratio:.3g}"
        message = (
            f"shift inverse did not converge at t={time:.6g} after {iterations} iterations "
            f"(last contraction ratio {ratio_text})"
        )
        if reason:
            message = f"{message}: {reason}"
        super().__init__(message)


class OverflowFlag(NumericalFailure):
    def __init__(self, exponent: float, where: str = ""):
        self.exponent = exponent
        message = f"exponential overflow, exponent {exponent:.6g}"
        if where:
            message = f"{message} in {where}"
        super().__init__(message)


class StiffnessError(NumericalFailure):
    def __init__(self, time: float, step: float):
        self.time = time
        self.step = step
        super().__init__(
            f"ODE step rejected at t={time:.6g} even at the minimum step {step:.3g}"
        )


class McFailure(NumericalFailure):
    def __init__(self, n_nonfinite: int, n_samples: int):
        self.n_nonfinite = n_nonfinite
        self.n_samples = n_samples
        super().__init__(
            f"{n_nonfinite} of {n_samples} Monte Carlo samples are non-finite (limit 1%)"
        )
