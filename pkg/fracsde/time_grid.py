"""Uniform grids, sampled paths, Hölder norms and closed-form kernel integrals.

Every integral of the covariance density

    phi(u, v) = H (2H - 1) |u - v|^(2H - 2)

goes through an antiderivative, so the diagonal ``u == v`` is never evaluated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Optional, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import toeplitz

from .errors import DomainError

logger = logging.getLogger(__name__)

NODE_RTOL = 1e-9


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i * dt`` on ``[0, horizon]`` with ``n_steps`` cells."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.horizon) or self.horizon <= 0:
            raise DomainError(f"horizon must be positive and finite, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        nodes = np.arange(self.n_steps + 1, dtype=float) * self.dt
        nodes[-1] = self.horizon
        nodes.setflags(write=False)
        return nodes

    def node(self, i: int) -> float:
        return float(self.nodes[i])

    def index_of(self, t: float) -> int:
        """Index of the node at time ``t``; off-grid times are a domain error."""
        t = float(t)
        i = int(round(t / self.dt))
        if i < 0 or i > self.n_steps or abs(t - i * self.dt) > NODE_RTOL * max(self.dt, abs(t)):
            raise DomainError(f"time {t} is not a node of the grid (dt={self.dt}, T={self.horizon})")
        return i

    def sub_grid(self, stop_index: int) -> "TimeGrid":
        """The grid restricted to ``[0, t_stop]``; nodes coincide with the first ``stop_index + 1``."""
        if not 1 <= stop_index <= self.n_steps:
            raise DomainError(f"stop index {stop_index} outside 1..{self.n_steps}")
        if stop_index == self.n_steps:
            return self
        return TimeGrid(stop_index * self.dt, stop_index)

    def coarsen(self, factor: int) -> "TimeGrid":
        if factor < 1 or self.n_steps % factor:
            raise DomainError(f"cannot coarsen {self.n_steps} steps by a factor {factor}")
        return TimeGrid(self.horizon, self.n_steps // factor)


@dataclass(frozen=True, eq=False)
class SampledPath:
    """Finite values of a real function at the ``N + 1`` nodes of a grid."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n_steps + 1,):
            raise DomainError(
                f"path needs {self.grid.n_steps + 1} values for its grid, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise DomainError(f"path value at node {bad} (t={self.grid.node(bad)}) is not finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "SampledPath":
        return cls(grid, np.broadcast_to(fn(grid.nodes), grid.nodes.shape))

    @classmethod
    def constant(cls, grid: TimeGrid, value: float = 0.0) -> "SampledPath":
        return cls(grid, np.full(grid.n_steps + 1, float(value)))

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def at(self, t: float) -> float:
        return float(self.values[self.grid.index_of(t)])

    def prefix(self, stop_index: int) -> "SampledPath":
        return SampledPath(self.grid.sub_grid(stop_index), self.values[: stop_index + 1])

    def coarsen(self, factor: int) -> "SampledPath":
        """Every ``factor``-th node: the same path seen on a nested coarser grid."""
        return SampledPath(self.grid.coarsen(factor), self.values[::factor])

    def shifted(self, increment: np.ndarray) -> "SampledPath":
        return SampledPath(self.grid, self.values + np.asarray(increment, dtype=float))


@dataclass(frozen=True, eq=False)
class FlaggedPath:
    """Grid values where some nodes carry no defined value (``valid`` is False, value NaN)."""

    grid: TimeGrid
    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        valid = np.array(self.valid, dtype=bool)
        values[~valid] = np.nan
        values.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "valid", valid)

    @property
    def all_valid(self) -> bool:
        return bool(self.valid.all())

    def to_path(self) -> SampledPath:
        if not self.all_valid:
            bad = np.flatnonzero(~self.valid)
            raise DomainError(
                f"{bad.size} node(s) have no defined value, first at t={self.grid.node(int(bad[0]))}"
            )
        return SampledPath(self.grid, self.values)


@dataclass(frozen=True)
class HolderExponent:
    beta: float

    def __post_init__(self):
        if not 0.5 < float(self.beta) <= 1.0:
            raise DomainError(f"Hölder exponent must lie in (1/2, 1], got {self.beta}")
        object.__setattr__(self, "beta", float(self.beta))

    def __float__(self) -> float:
        return self.beta


BetaLike = Union[float, HolderExponent]


def _beta_value(beta: BetaLike) -> float:
    value = float(beta)
    if not 0.0 < value <= 1.0:
        raise DomainError(f"Hölder exponent must lie in (0, 1], got {value}")
    return value


@dataclass(frozen=True)
class Kernel:
    """The fBm increment density phi(u, v) = H(2H-1)|u-v|^(2H-2)."""

    hurst: float

    def __post_init__(self):
        if not 0.5 < float(self.hurst) < 1.0:
            raise DomainError(f"hurst must lie strictly inside (0.5, 1), got {self.hurst}")
        object.__setattr__(self, "hurst", float(self.hurst))

    def phi(self, u, v) -> np.ndarray:
        gap = np.abs(np.asarray(u, dtype=float) - np.asarray(v, dtype=float))
        if np.any(gap == 0):
            raise DomainError("phi is singular on the diagonal u == v; integrate it instead")
        h = self.hurst
        return h * (2 * h - 1) * gap ** (2 * h - 2)

    def antiderivative(self, x) -> np.ndarray:
        """d/dx of the result is phi(0, x); continuous through 0."""
        x = np.asarray(x, dtype=float)
        h = self.hurst
        return h * np.sign(x) * np.abs(x) ** (2 * h - 1)

    def moment_antiderivative(self, x) -> np.ndarray:
        """Antiderivative of x * phi(0, x)."""
        x = np.asarray(x, dtype=float)
        h = self.hurst
        return 0.5 * (2 * h - 1) * np.abs(x) ** (2 * h)

    def partial_integral(self, s, t) -> np.ndarray:
        """int_0^t phi(s, u) du."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if np.any(s < 0) or np.any(t < 0):
            raise DomainError("kernel integrals need nonnegative times")
        return self.antiderivative(t - s) - self.antiderivative(-s)

    def double_integral(self, t) -> np.ndarray:
        """int_0^t int_0^t phi(u, v) du dv = t^(2H)."""
        t = np.asarray(t, dtype=float)
        if np.any(t < 0):
            raise DomainError("kernel integrals need nonnegative times")
        return t ** (2 * self.hurst)

    def lp_norm(self, s: float, horizon: float, p: float) -> float:
        """(int_0^T phi(s, u)^p du)^(1/p); finite for p < 1/(2-2H)."""
        h = self.hurst
        q = p * (2 * h - 2)
        if q <= -1:
            raise DomainError(f"phi(s, .) is not in L^{p} for hurst {h}")
        integral = (s ** (q + 1) + (horizon - s) ** (q + 1)) / (q + 1)
        return float(h * (2 * h - 1) * integral ** (1.0 / p))


def kernel_partial_integral(kernel: Kernel, s, t):
    result = kernel.partial_integral(s, t)
    return float(result) if result.ndim == 0 else result


def kernel_double_integral(kernel: Kernel, t):
    result = kernel.double_integral(t)
    return float(result) if result.ndim == 0 else result


def default_hp_exponent(hurst: float) -> float:
    """Midpoint of (1, 1/(2-2H))."""
    return 0.5 * (1.0 + 1.0 / (2.0 - 2.0 * hurst))


@lru_cache(maxsize=8)
def _cell_masses(hurst: float, n_steps: int, horizon: float) -> np.ndarray:
    kernel = Kernel(hurst)
    t = TimeGrid(horizon, n_steps).nodes
    primitive = kernel.antiderivative(t[None, :] - t[:, None])
    masses = primitive[:, 1:] - primitive[:, :-1]
    masses.setflags(write=False)
    return masses


@lru_cache(maxsize=4)
def _cell_moments(hurst: float, n_steps: int, horizon: float) -> np.ndarray:
    kernel = Kernel(hurst)
    t = TimeGrid(horizon, n_steps).nodes
    masses = _cell_masses(hurst, n_steps, horizon)
    primitive = kernel.moment_antiderivative(t[None, :] - t[:, None])
    moments = primitive[:, 1:] - primitive[:, :-1] + (t[:, None] - t[None, :-1]) * masses
    moments.setflags(write=False)
    return moments


def kernel_cell_masses(kernel: Kernel, grid: TimeGrid) -> np.ndarray:
    """Read-only ``C[i, j] = int_{t_j}^{t_{j+1}} phi(t_i, v) dv``, shape (N+1, N)."""
    return _cell_masses(kernel.hurst, grid.n_steps, grid.horizon)


def kernel_cell_moments(kernel: Kernel, grid: TimeGrid) -> np.ndarray:
    """Read-only ``int_{t_j}^{t_{j+1}} (v - t_j) phi(t_i, v) dv``, shape (N+1, N)."""
    return _cell_moments(kernel.hurst, grid.n_steps, grid.horizon)


def increment_covariance(kernel: Kernel, grid: TimeGrid) -> np.ndarray:
    """Covariance of the fBm increments over the grid cells (a Toeplitz matrix)."""
    k = np.arange(grid.n_steps, dtype=float)
    two_h = 2 * kernel.hurst
    gamma = 0.5 * grid.dt ** two_h * (
        np.abs(k + 1) ** two_h - 2 * np.abs(k) ** two_h + np.abs(k - 1) ** two_h
    )
    return toeplitz(gamma)


def holder_seminorm(values, dt: float, beta: float, max_lag: Optional[int] = None, dyadic: bool = False) -> float:
    """max over node pairs of |x(t) - x(s)| / (t - s)^beta.

    ``values`` may be 2-D (nodes x components); the component norm is the max norm.
    ``dyadic`` restricts the lags to powers of two, an approximation from below.
    """
    x = np.asarray(values, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0] - 1
    if n < 1:
        return 0.0
    top = n if max_lag is None else max(1, min(int(max_lag), n))
    if dyadic:
        lags = [1 << e for e in range(int(np.log2(top)) + 1)]
    else:
        lags = range(1, top + 1)
    best = 0.0
    for k in lags:
        gap = np.abs(x[k:] - x[:-k]).max()
        best = max(best, float(gap) / (k * dt) ** beta)
    return best


def running_holder_norm(values, dt: float, beta: float) -> np.ndarray:
    """r[i] = ||x||_{0, t_i, beta}; r[0] = 0."""
    x = np.asarray(values, dtype=float)
    n = x.size - 1
    best_ending = np.zeros(n + 1)
    for k in range(1, n + 1):
        ratio = np.abs(x[k:] - x[:-k]) / (k * dt) ** beta
        np.maximum(best_ending[k:], ratio, out=best_ending[k:])
    return np.maximum.accumulate(best_ending)


def _checked_span(path: SampledPath, a: float, b: float):
    if a >= b:
        raise DomainError(f"norm window needs a < b, got a={a}, b={b}")
    return path.grid.index_of(a), path.grid.index_of(b)


def holder_norm(
    path: SampledPath,
    a: float,
    b: float,
    beta: BetaLike,
    dyadic: bool = False,
    window: Optional[float] = None,
) -> float:
    """||x||_{a,b,beta} over all node pairs in [a, b].

    ``window`` keeps only pairs with t - s <= window.
    """
    i0, i1 = _checked_span(path, a, b)
    max_lag = None if window is None else int(np.floor(window / path.grid.dt + NODE_RTOL))
    return holder_seminorm(path.values[i0 : i1 + 1], path.grid.dt, _beta_value(beta), max_lag, dyadic)


def sup_norm(path: SampledPath, a: float, b: float) -> float:
    i0, i1 = _checked_span(path, a, b)
    return float(np.abs(path.values[i0 : i1 + 1]).max())


def hp_norm(density, dt: float, p: float) -> float:
    """Trapezoidal (int |h'|^p)^(1/p) of a density sampled on a uniform grid."""
    d = np.abs(np.asarray(density, dtype=float))
    if d.size < 2:
        return 0.0
    return float(trapezoid(d**p, dx=dt) ** (1.0 / p))
