"""Fixed points of progressive mappings on path space.

The engine walks the time axis in sub-intervals [T_k, T_k + tau]. On each one
it runs the Picard iteration x_{n+1} = F(x_n) with everything before T_k held
fixed, until successive iterates differ by less than ``tol`` in the sum of the
sup norm and the Hölder norm on the sub-interval. The step tau follows the
contraction rule

    tau <= M^(-1/gamma) ^ (2 kappa)^(-1/gamma) ^ Delta,
    M = h(M2, M2, M1, M1),  M1 = 2 kappa (1 + |x|_{0,T_k}),  M2 = 2 (1 + |x|_{0,T_k})

and is halved when the converged segment breaks the M1/M2 bounds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .config import DEFAULT_MAX_ITER, DEFAULT_TOL
from .errors import ContractionFailure, DomainError, ResolutionError
from .time_grid import NODE_RTOL, BetaLike, TimeGrid, _beta_value, holder_seminorm

logger = logging.getLogger(__name__)

MAX_SHRINKS = 4
STALL_LIMIT = 3

MappingFn = Callable[[TimeGrid, np.ndarray], np.ndarray]
HBound = Callable[[float, float, float, float], float]


@dataclass
class ContractionProblem:
    """A progressive mapping F with the constants of its Hölder bounds.

    ``apply_F(prefix_grid, x)`` receives the candidate on the nodes of
    ``prefix_grid`` (shape ``(k + 1,)`` for scalar states, ``(k + 1, state_dim)``
    otherwise) and returns F(x) on the same nodes. Its output before any time a
    may depend on ``x`` only through the values before a.
    ``kappa_fn(a, b)``, when given, replaces ``kappa`` on the window [a, b].
    """

    apply_F: MappingFn
    F0: np.ndarray
    kappa: float
    gamma: float
    beta: BetaLike
    Delta: float
    h_bound: HBound
    state_dim: int = 1
    kappa_fn: Optional[Callable[[float, float], float]] = None

    def __post_init__(self):
        if self.state_dim < 1:
            raise DomainError(f"state_dim must be positive, got {self.state_dim}")
        self.F0 = np.asarray(self.F0, dtype=float)
        allowed = [(), (1,)] if self.state_dim == 1 else [(self.state_dim,)]
        if self.F0.shape not in allowed or not np.all(np.isfinite(self.F0)):
            raise DomainError(f"F0 must be a finite state of dimension {self.state_dim}")
        if self.state_dim == 1:
            self.F0 = self.F0.reshape(())
        for name in ("kappa", "Delta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be positive and finite, got {value}")
        if not 0.0 < self.gamma <= 1.0:
            raise DomainError(f"gamma must lie in (0, 1], got {self.gamma}")
        _beta_value(self.beta)

    @property
    def F0_norm(self) -> float:
        return float(np.max(np.abs(self.F0)))

    def kappa_on(self, a: float, b: float) -> float:
        if self.kappa_fn is None:
            return self.kappa
        value = float(self.kappa_fn(a, b))
        if not math.isfinite(value) or value <= 0:
            raise DomainError(f"kappa callback returned {value} on [{a}, {b}]")
        return value

    def trajectory_shape(self, grid: TimeGrid) -> Tuple[int, ...]:
        n = grid.n_steps + 1
        return (n,) if self.state_dim == 1 else (n, self.state_dim)


@dataclass
class PicardReport:
    solution: np.ndarray
    grid: TimeGrid
    sub_intervals: List[Tuple[float, float]] = field(default_factory=list)
    iterations_per_interval: List[int] = field(default_factory=list)
    residual: float = 0.0
    bound_constants: Tuple[float, float] = (0.0, 0.0)

    @property
    def total_iterations(self) -> int:
        return int(sum(self.iterations_per_interval))


def constant_h(value: float) -> HBound:
    """h_bound that ignores its arguments."""
    return lambda m1, m2, m3, m4: value


def growth_constants(problem: ContractionProblem) -> Tuple[float, float]:
    """(c1, c2) with sup_bound <= c2 exp(c1 kappa^(1/gamma) T) (1 + |F0|)."""
    kappa_root = problem.kappa ** (1.0 / problem.gamma)
    c1 = math.log(2.0) * max(2.0 ** (1.0 / problem.gamma), 1.0 / (problem.Delta * kappa_root))
    return c1, 4.0


def growth_bound(problem: ContractionProblem, T: float) -> Tuple[float, float, float]:
    """A priori (sup_bound, holder_bound, tau0) from the doubling recursion A_{k+1} <= 2 + 2 A_k.

    tau0 = (2 kappa)^(-1/gamma) ^ Delta and N = floor(T / tau0) + 1 uniform steps
    cover [0, T]; sup_bound = 2^(N+1) + 2^N |F0| and the Hölder bound on any
    window of length tau0 is 4 kappa (1 + sup_bound).
    """
    if T <= 0:
        raise DomainError(f"T must be positive, got {T}")
    tau0 = min((2.0 * problem.kappa) ** (-1.0 / problem.gamma), problem.Delta)
    n = math.floor(T / tau0) + 1
    sup_bound = 2.0 ** (n + 1) + 2.0**n * problem.F0_norm
    holder_bound = 4.0 * problem.kappa * (1.0 + sup_bound)
    return sup_bound, holder_bound, tau0


def _combined_norm(values: np.ndarray, dt: float, beta: float) -> float:
    return float(np.max(np.abs(values))) + holder_seminorm(values, dt, beta)


def _step_size(problem: ContractionProblem, kappa: float, x_norm: float, remaining: float) -> float:
    m1 = 2.0 * kappa * (1.0 + x_norm)
    m2 = 2.0 * (1.0 + x_norm)
    m = float(problem.h_bound(m2, m2, m1, m1))
    if not math.isfinite(m) or m < 0:
        raise DomainError(f"h_bound returned {m}")
    rate_limit = math.inf if m == 0 else m ** (-1.0 / problem.gamma)
    return min(rate_limit, (2.0 * kappa) ** (-1.0 / problem.gamma), problem.Delta, remaining)


def _iterate_segment(
    problem: ContractionProblem,
    grid: TimeGrid,
    x: np.ndarray,
    start: int,
    end: int,
    tol: float,
    max_iter: int,
    beta: float,
) -> int:
    """Picard iteration on nodes start..end of ``x`` (in place); returns the iteration count."""
    prefix = grid.sub_grid(end)
    interval = (grid.node(start), grid.node(end))
    ratios: List[float] = []
    previous = None
    stalled = 0
    first = 0 if start == 0 else start + 1
    for iteration in range(1, max_iter + 1):
        image = np.asarray(problem.apply_F(prefix, x[: end + 1]), dtype=float)
        if image.shape != x[: end + 1].shape:
            raise DomainError(f"apply_F returned shape {image.shape}, expected {x[: end + 1].shape}")
        if not np.all(np.isfinite(image[start : end + 1])):
            raise ContractionFailure(interval, ratios, "mapping produced non-finite values")
        change = image[start : end + 1] - x[start : end + 1]
        x[first : end + 1] = image[first : end + 1]
        diff = _combined_norm(change, grid.dt, beta)
        if diff < tol:
            return iteration
        if previous is not None and previous > 0:
            ratio = diff / previous
            ratios.append(ratio)
            stalled = stalled + 1 if ratio >= 1.0 else 0
            if stalled >= STALL_LIMIT:
                raise ContractionFailure(interval, ratios, f"{STALL_LIMIT} consecutive non-contracting steps")
        previous = diff
    raise ContractionFailure(interval, ratios, f"no convergence within {max_iter} iterations")


def solve_fixed_point(
    problem: ContractionProblem,
    grid: TimeGrid,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    initial: Optional[np.ndarray] = None,
) -> PicardReport:
    """Unique fixed point x = F(x) on ``grid``.

    Each new sub-interval starts from ``x(T_k)`` held constant, or from
    ``initial`` on that segment when a full starting trajectory is supplied.
    Raises ResolutionError when the step rule asks for less than one grid cell.
    """
    if tol <= 0:
        raise DomainError(f"tol must be positive, got {tol}")
    if max_iter < 1:
        raise DomainError(f"max_iter must be positive, got {max_iter}")
    beta = _beta_value(problem.beta)
    shape = problem.trajectory_shape(grid)
    if initial is None:
        guess = None
        x = np.broadcast_to(problem.F0, shape).astype(float)
    else:
        guess = np.asarray(initial, dtype=float)
        if guess.shape != shape or not np.all(np.isfinite(guess)):
            raise DomainError(f"initial trajectory must be finite with shape {shape}")
        x = guess.copy()
        x[0] = problem.F0

    report = PicardReport(solution=x, grid=grid, bound_constants=growth_constants(problem))
    n, dt = grid.n_steps, grid.dt
    start = 0
    while start < n:
        t_start = grid.node(start)
        kappa = problem.kappa_on(t_start, min(t_start + problem.Delta, grid.horizon))
        x_norm = float(np.max(np.abs(x[: start + 1])))
        tau = _step_size(problem, kappa, x_norm, grid.horizon - t_start)
        m1, m2 = 2.0 * kappa * (1.0 + x_norm), 2.0 * (1.0 + x_norm)
        for shrink in range(MAX_SHRINKS + 1):
            steps = int(math.floor(tau / dt + NODE_RTOL))
            if steps < 1:
                raise ResolutionError(t_start, tau, dt)
            end = min(start + steps, n)
            x[start + 1 : end + 1] = x[start] if guess is None else guess[start + 1 : end + 1]
            iterations = _iterate_segment(problem, grid, x, start, end, tol, max_iter, beta)
            segment = x[start : end + 1]
            within = (
                float(np.max(np.abs(segment))) <= m2
                and holder_seminorm(segment, dt, beta) <= m1
            )
            if within:
                break
            if shrink < MAX_SHRINKS:
                logger.warning(
                    f"segment at t={t_start:.6g} breaks the step bounds (M1={m1:.3g}, M2={m2:.3g}); "
                    f"halving tau={tau:.3g}"
                )
                tau *= 0.5
            else:
                logger.warning(f"步长减半 {MAX_SHRINKS} 次后保留 t={t_start:.6g} 处的子区间")
        report.sub_intervals.append((t_start, grid.node(end) - t_start))
        report.iterations_per_interval.append(iterations)
        logger.debug(
            f"sub-interval [{t_start:.6g}, {grid.node(end):.6g}] accepted after {iterations} iterations"
        )
        start = end

    image = np.asarray(problem.apply_F(grid, x), dtype=float)
    report.residual = float(np.max(np.abs(image - x)))
    logger.info(
        f"fixed point on [0, {grid.horizon:.6g}]: {len(report.sub_intervals)} sub-interval(s), "
        f"{report.total_iterations} iterations, residual {report.residual:.3g}"
    )
    return report


def check_progressive(
    problem: ContractionProblem,
    grid: TimeGrid,
    trajectory: np.ndarray,
    n_trials: int = 8,
    seed: int = 0,
) -> float:
    """Largest change of F(x) before a random cut when x is perturbed after it (0 for a progressive F)."""
    rng = np.random.default_rng(seed)
    x = np.asarray(trajectory, dtype=float)
    base = np.asarray(problem.apply_F(grid, x), dtype=float)
    worst = 0.0
    for _ in range(n_trials):
        # cut in [0, n_steps): node cut stays fixed, nodes after it move
        cut = int(rng.integers(0, grid.n_steps))
        perturbed = x.copy()
        perturbed[cut + 1 :] += rng.normal(size=perturbed[cut + 1 :].shape)
        image = np.asarray(problem.apply_F(grid, perturbed), dtype=float)
        worst = max(worst, float(np.max(np.abs(image[: cut + 1] - base[: cut + 1]))))
    return worst
