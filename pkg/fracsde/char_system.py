"""Characteristic system for Itô SDEs with deterministic coefficients.

For x(t) = eta + int b(s, x) ds + int sigma(s, x) deltaB(s) the system
decouples into a pathwise equation along a driver W,

    z(t) = eta + int_0^t b(s, z) ds + int_0^t sigma(s, z) dW(s)
           + int_0^t sigma(s, z(s)) int_0^s sigma_x(u, z(u)) phi(s, u) du ds,

and a shift of the driver, Gamma(t) = omega + int_0^. h_t(u) du with density

    h_t(u) = int_0^t sigma_x(s, z(s)) phi(s, u) ds.

The Itô solution is x(t) = z(t) along the driver Lambda(t), the inverse of
Gamma(t). The inverse exists only up to a random time; past it the inverse
iteration stops contracting and HorizonExceededError is raised.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .config import (
    DEFAULT_INVERSE_MAX_ITER,
    DEFAULT_INVERSE_TOL,
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    thread_count,
    validate_beta,
)
from .errors import DomainError, HorizonExceededError, NumericalFailure
from .integrators import IntegrandSpec, cumulative_riemann
from .picard import ContractionProblem, PicardReport, constant_h, solve_fixed_point
from .time_grid import (
    BetaLike,
    Kernel,
    SampledPath,
    TimeGrid,
    _beta_value,
    default_hp_exponent,
    hp_norm,
    kernel_cell_masses,
    running_holder_norm,
)

logger = logging.getLogger(__name__)

STALL_LIMIT = 3
LOGISTIC_CAP = 2.0

CoefficientFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CoefficientSet:
    """Deterministic b, sigma and derivatives, with the Lipschitz-type constant L.

    L bounds |b| and |sigma| by L (1 + |x|), and |b_x|, |sigma_x| + |sigma_xx| by L.
    """

    b: CoefficientFn
    b_x: CoefficientFn
    sigma: CoefficientFn
    sigma_x: CoefficientFn
    sigma_xx: CoefficientFn
    lipschitz_L: float
    name: str = "custom"

    def __post_init__(self):
        if not math.isfinite(self.lipschitz_L) or self.lipschitz_L <= 0:
            raise DomainError(f"lipschitz_L must be positive, got {self.lipschitz_L}")

    @classmethod
    def affine(cls, bbar: float, b0: float, abar: float, a0: float) -> "CoefficientSet":
        """b = bbar x + b0, sigma = abar x + a0."""
        bound = max(abs(bbar), abs(b0), abs(abar), abs(a0)) or 1.0
        return cls(
            b=lambda t, x: bbar * x + b0,
            b_x=lambda t, x: bbar + 0.0 * x,
            sigma=lambda t, x: abar * x + a0,
            sigma_x=lambda t, x: abar + 0.0 * x,
            sigma_xx=lambda t, x: 0.0 * x,
            lipschitz_L=bound,
            name=f"affine({bbar}, {b0}, {abar}, {a0})",
        )

    @classmethod
    def linear(cls, bbar: float, abar: float) -> "CoefficientSet":
        return replace(cls.affine(bbar, 0.0, abar, 0.0), name=f"linear({bbar}, {abar})")

    @classmethod
    def sine(cls, scale: float = 1.0) -> "CoefficientSet":
        """b = cos x, sigma = scale sin x."""
        return cls(
            b=lambda t, x: np.cos(x),
            b_x=lambda t, x: -np.sin(x),
            sigma=lambda t, x: scale * np.sin(x),
            sigma_x=lambda t, x: scale * np.cos(x),
            sigma_xx=lambda t, x: -scale * np.sin(x),
            lipschitz_L=max(1.0, math.sqrt(2.0) * abs(scale)),
            name=f"sine({scale})",
        )

    @classmethod
    def logistic(cls, eps: float = 0.1) -> "CoefficientSet":
        """b = x (1 - x) on |x| <= 2 continued by its tangent lines, sigma = eps x."""
        cap = LOGISTIC_CAP

        def b(t, x):
            inside = np.clip(x, -cap, cap)
            return inside * (1 - inside) + (1 - 2 * inside) * (x - inside)

        return cls(
            b=b,
            b_x=lambda t, x: 1 - 2 * np.clip(x, -cap, cap),
            sigma=lambda t, x: eps * x,
            sigma_x=lambda t, x: eps + 0.0 * x,
            sigma_xx=lambda t, x: 0.0 * x,
            lipschitz_L=max(1 + 2 * cap, abs(eps)),
            name=f"logistic({eps})",
        )


def named_coefficients(name: str, params: Sequence[float] = ()) -> CoefficientSet:
    """Look up a family by name: linear, affine, sine or logistic."""
    factories = {
        "linear": (CoefficientSet.linear, 2),
        "affine": (CoefficientSet.affine, 4),
        "sine": (CoefficientSet.sine, 1),
        "logistic": (CoefficientSet.logistic, 1),
    }
    if name not in factories:
        raise DomainError(f"unknown coefficient family {name!r}; choose from {sorted(factories)}")
    factory, arity = factories[name]
    params = tuple(float(p) for p in params)
    if len(params) > arity or (name in ("linear", "affine") and len(params) != arity):
        raise DomainError(f"{name} takes {arity} parameter(s), got {len(params)}")
    return factory(*params)


@dataclass(frozen=True, eq=False)
class ShiftMap:
    """omega -> omega + int_0^. density(u) du for the base time ``base_time``."""

    base_time: float
    density: SampledPath

    def apply(self, omega: SampledPath) -> SampledPath:
        return omega.shifted(cumulative_trapezoid(self.density.values, dx=self.density.grid.dt, initial=0.0))

    def hp_norm(self, p: float) -> float:
        return hp_norm(self.density.values, self.density.grid.dt, p)

    def negated(self) -> "ShiftMap":
        return ShiftMap(self.base_time, SampledPath(self.density.grid, -self.density.values))

    @classmethod
    def identity(cls, grid: TimeGrid, base_time: float = 0.0) -> "ShiftMap":
        return cls(base_time, SampledPath.constant(grid))


@dataclass(eq=False)
class CharSolution:
    z: SampledPath
    gamma: List[ShiftMap]
    picard_report: PicardReport


@dataclass(eq=False)
class CompositionResult:
    """x(t) at the requested times, cut at the first time the inverse failed."""

    times: List[float]
    values: List[float]
    horizon: Optional[float] = None
    flagged: bool = False
    iterations: List[int] = field(default_factory=list)
    error: Optional[HorizonExceededError] = None


@lru_cache(maxsize=4)
def _strict_lower_masses(hurst: float, n_steps: int, horizon: float) -> np.ndarray:
    masses = kernel_cell_masses(Kernel(hurst), TimeGrid(horizon, n_steps))
    lower = np.tril(masses, -1)
    lower.setflags(write=False)
    return lower


def _cell_average(values: np.ndarray) -> np.ndarray:
    return 0.5 * (values[:-1] + values[1:])


def _suffix_holder_norms(values: np.ndarray, dt: float, beta: float) -> np.ndarray:
    """s[k] = ||W||_{t_k, T, beta}."""
    return running_holder_norm(values[::-1], dt, beta)[::-1]


def _z_problem(coeffs: CoefficientSet, eta: float, W: SampledPath, kernel: Kernel, beta: float) -> ContractionProblem:
    grid = W.grid
    lower = _strict_lower_masses(kernel.hurst, grid.n_steps, grid.horizon)
    dW = np.diff(W.values)
    suffix = _suffix_holder_norms(W.values, grid.dt, beta)
    L = coeffs.lipschitz_L
    kappa_global = L * (1.0 + suffix[0])

    def apply_F(prefix: TimeGrid, x: np.ndarray) -> np.ndarray:
        m = x.shape[0]
        t = prefix.nodes
        drift = np.asarray(coeffs.b(t, x), dtype=float)
        sigma = np.asarray(coeffs.sigma(t, x), dtype=float)
        sigma_x = np.asarray(coeffs.sigma_x(t, x), dtype=float)
        inner = lower[:m, : m - 1] @ _cell_average(sigma_x)
        noise = np.concatenate([[0.0], np.cumsum(_cell_average(sigma) * dW[: m - 1])])
        return (
            eta
            + cumulative_trapezoid(drift, dx=prefix.dt, initial=0.0)
            + noise
            + cumulative_trapezoid(sigma * inner, dx=prefix.dt, initial=0.0)
        )

    def kappa_fn(a: float, b: float) -> float:
        return L * (1.0 + suffix[grid.index_of(a)])

    return ContractionProblem(
        apply_F=apply_F,
        F0=eta,
        kappa=kappa_global,
        gamma=beta,
        beta=beta,
        Delta=grid.horizon,
        h_bound=constant_h(kappa_global),
        kappa_fn=kappa_fn,
    )


def solve_z(
    coeffs: CoefficientSet,
    eta: float,
    B: SampledPath,
    beta: BetaLike,
    kernel: Kernel,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    initial: Optional[np.ndarray] = None,
) -> Tuple[SampledPath, PicardReport]:
    """The z-equation along the driver ``B`` as a fixed point of the Picard engine.

    The stochastic integral is the midpoint Riemann sum against the driver and
    kappa on [a, T] is L (1 + ||B||_{a,T,beta}).
    """
    beta = validate_beta(_beta_value(beta), kernel.hurst)
    problem = _z_problem(coeffs, float(eta), B, kernel, beta)
    report = solve_fixed_point(problem, B.grid, tol=tol, max_iter=max_iter, initial=initial)
    return SampledPath(B.grid, report.solution), report


def _gamma_densities(coeffs: CoefficientSet, z: SampledPath, kernel: Kernel, grid: TimeGrid) -> np.ndarray:
    """Column i is h_{t_i}(u) on every node u of ``grid``; ``z`` lives on a prefix of it."""
    n = z.grid.n_steps
    masses = kernel_cell_masses(kernel, grid)[:, :n]
    weights = _cell_average(np.asarray(coeffs.sigma_x(z.times, z.values), dtype=float))
    return np.concatenate([np.zeros((grid.n_steps + 1, 1)), np.cumsum(masses * weights, axis=1)], axis=1)


def build_gamma(coeffs: CoefficientSet, z: SampledPath, kernel: Kernel) -> List[ShiftMap]:
    """One ShiftMap per node t_i with density u -> int_0^{t_i} sigma_x(s, z(s)) phi(s, u) ds.

    The s-integral averages sigma_x over each cell and integrates phi in closed form.
    """
    grid = z.grid
    columns = _gamma_densities(coeffs, z, kernel, grid)
    return [ShiftMap(grid.node(i), SampledPath(grid, columns[:, i])) for i in range(grid.n_steps + 1)]


def solve_characteristic(
    coeffs: CoefficientSet,
    eta: float,
    B: SampledPath,
    beta: BetaLike,
    kernel: Kernel,
    tol: float = DEFAULT_TOL,
) -> CharSolution:
    z, report = solve_z(coeffs, eta, B, beta, kernel, tol=tol)
    return CharSolution(z=z, gamma=build_gamma(coeffs, z, kernel), picard_report=report)


def invert_gamma(
    coeffs: CoefficientSet,
    eta: float,
    B: SampledPath,
    t: float,
    kernel: Kernel,
    beta: BetaLike,
    tol: float = DEFAULT_INVERSE_TOL,
    max_iter: int = DEFAULT_INVERSE_MAX_ITER,
    p: Optional[float] = None,
    z_tol: float = DEFAULT_TOL,
) -> Tuple[ShiftMap, int]:
    """Lambda(t), the inverse of Gamma(t), by lambda_{n+1} = -h_t[omega + int lambda_n].

    Each step re-solves z on [0, t] along the shifted driver, warm-started from
    the previous z. Stops when successive densities differ by less than ``tol``
    in the grid H_p norm. A stalled or diverging iteration is reported as
    HorizonExceededError.
    """
    grid = B.grid
    i = grid.index_of(t)
    p = default_hp_exponent(kernel.hurst) if p is None else float(p)
    if not 1.0 < p < 1.0 / (2.0 - 2.0 * kernel.hurst):
        raise DomainError(f"p must lie in (1, {1.0 / (2.0 - 2.0 * kernel.hurst):.4g}), got {p}")
    if i == 0:
        return ShiftMap.identity(grid, 0.0), 1

    base = B.prefix(i)
    density = np.zeros(grid.n_steps + 1)
    z_prev: Optional[np.ndarray] = None
    previous: Optional[float] = None
    ratio: Optional[float] = None
    stalled = 0
    for iteration in range(1, max_iter + 1):
        shift = cumulative_trapezoid(density[: i + 1], dx=grid.dt, initial=0.0)
        try:
            z, _ = solve_z(coeffs, eta, base.shifted(shift), beta, kernel, tol=z_tol, initial=z_prev)
        except (NumericalFailure, DomainError) as e:
            if iteration == 1:
                raise
            raise HorizonExceededError(t, ratio, iteration, f"z solve failed along the shifted driver: {e}") from e
        updated = -_gamma_densities(coeffs, z, kernel, grid)[:, i]
        if not np.all(np.isfinite(updated)):
            raise HorizonExceededError(t, ratio, iteration, "shift density is no longer finite")
        diff = hp_norm(updated - density, grid.dt, p)
        density, z_prev = updated, z.values
        if diff < tol:
            logger.debug(f"inverse shift at t={t:.6g} converged in {iteration} iteration(s)")
            return ShiftMap(t, SampledPath(grid, density)), iteration
        if previous is not None and previous > 0:
            ratio = diff / previous
            stalled = stalled + 1 if ratio >= 1.0 else 0
            if stalled >= STALL_LIMIT:
                raise HorizonExceededError(t, ratio, iteration, "inverse iteration stopped contracting")
        previous = diff
    raise HorizonExceededError(t, ratio, max_iter, "iteration limit reached")


def gamma_lambda_residual(
    coeffs: CoefficientSet,
    eta: float,
    B: SampledPath,
    t: float,
    Lambda: ShiftMap,
    kernel: Kernel,
    beta: BetaLike,
) -> float:
    """max over nodes of |Gamma(t)(Lambda(t) omega) - omega|."""
    i = B.grid.index_of(t)
    if i == 0:
        return 0.0
    shifted = Lambda.apply(B)
    z, _ = solve_z(coeffs, eta, shifted.prefix(i), beta, kernel)
    density = _gamma_densities(coeffs, z, kernel, B.grid)[:, i]
    restored = ShiftMap(t, SampledPath(B.grid, density)).apply(shifted)
    return float(np.max(np.abs(restored.values - B.values)))


def _solve_at(coeffs, eta, B, t, kernel, beta, tol, max_iter) -> Tuple[float, int]:
    i = B.grid.index_of(t)
    if i == 0:
        return float(eta), 0
    Lambda, iterations = invert_gamma(coeffs, eta, B, t, kernel, beta, tol=tol, max_iter=max_iter)
    z, _ = solve_z(coeffs, eta, Lambda.apply(B).prefix(i), beta, kernel)
    return float(z.values[-1]), iterations


def compose_solution(
    coeffs: CoefficientSet,
    eta: float,
    B: SampledPath,
    out_times: Sequence[float],
    kernel: Kernel,
    beta: BetaLike,
    tol: float = DEFAULT_INVERSE_TOL,
    max_iter: int = DEFAULT_INVERSE_MAX_ITER,
    max_workers: Optional[int] = None,
) -> CompositionResult:
    """x(t) = z(t) along Lambda(t) omega for each requested time.

    Times are handled in parallel. The result keeps every time before the first
    one whose inverse failed; that time is reported as the detected horizon.
    """
    times = sorted(float(t) for t in out_times)
    if not times:
        raise DomainError("compose_solution needs at least one output time")
    for t in times:
        B.grid.index_of(t)
    workers = max_workers or thread_count()

    def run(t: float):
        try:
            return _solve_at(coeffs, eta, B, t, kernel, beta, tol, max_iter)
        except HorizonExceededError as e:
            return e

    with ThreadPoolExecutor(max_workers=min(workers, len(times))) as pool:
        outcomes = list(pool.map(run, times))

    result = CompositionResult(times=[], values=[])
    for t, outcome in zip(times, outcomes):
        if isinstance(outcome, HorizonExceededError):
            result.horizon = t
            result.flagged = True
            result.error = outcome
            logger.warning(f"inverse shift failed at t={t:.6g}; keeping {len(result.times)} earlier time(s)")
            break
        value, iterations = outcome
        result.times.append(t)
        result.values.append(value)
        result.iterations.append(iterations)
    logger.info(f"composed solution at {len(result.times)} of {len(times)} time(s)")
    return result


def horizon_estimate(coeffs: CoefficientSet, B: SampledPath, kernel: Kernel, beta: BetaLike) -> float:
    """Conservative invertibility time 1 / (2 c_R).

    c_R = 2 L^2 (1 + R) H T^(2H-1) with R = max(sup |B|, ||B||_{0,T,beta}).
    """
    beta = _beta_value(beta)
    R = max(float(np.max(np.abs(B.values))), float(running_holder_norm(B.values, B.grid.dt, beta)[-1]))
    h = kernel.hurst
    c_R = 2.0 * coeffs.lipschitz_L**2 * (1.0 + R) * h * B.grid.horizon ** (2 * h - 1)
    return 1.0 / (2.0 * c_R)


def scalar_shift_example(t: float, omega: float) -> float:
    """Gamma(t, omega) = 2 omega e^(-t) - omega, singular at t = ln 2."""
    return 2.0 * omega * math.exp(-t) - omega


def invert_scalar_shift(
    t: float,
    omega: float,
    tol: float = DEFAULT_INVERSE_TOL,
    max_iter: int = DEFAULT_INVERSE_MAX_ITER,
) -> Tuple[float, int]:
    """Solve Gamma(t, w) = omega by w_{n+1} = omega - G(w_n), G(w) = Gamma(t, w) - w.

    The iteration contracts with factor 2 (1 - e^(-t)), so it converges exactly when t < ln 2.
    """
    current = omega
    previous: Optional[float] = None
    ratio: Optional[float] = None
    stalled = 0
    for iteration in range(1, max_iter + 1):
        updated = omega - (scalar_shift_example(t, current) - current)
        diff = abs(updated - current)
        current = updated
        if diff < tol:
            return current, iteration
        if previous is not None and previous > 0:
            ratio = diff / previous
            stalled = stalled + 1 if ratio >= 1.0 else 0
            if stalled >= STALL_LIMIT:
                raise HorizonExceededError(t, ratio, iteration, "scalar shift iteration stopped contracting")
        previous = diff
    raise HorizonExceededError(t, ratio, max_iter, "iteration limit reached")


def shift_lemma_check(f: SampledPath, gamma: ShiftMap, B: SampledPath) -> float:
    """Max node residual of int f d(B + int h) = int f dB + int f h ds for deterministic f."""
    grid = B.grid
    if f.grid != grid or gamma.density.grid != grid:
        raise DomainError("integrand, shift and driver must share one grid")
    integrand = IntegrandSpec.deterministic(f)
    lhs = cumulative_riemann(integrand, gamma.apply(B)).values
    drift = cumulative_trapezoid(f.values * gamma.density.values, dx=grid.dt, initial=0.0)
    rhs = cumulative_riemann(integrand, B).values + drift
    return float(np.max(np.abs(lhs - rhs)))
