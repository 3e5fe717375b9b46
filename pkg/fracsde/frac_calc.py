"""Riemann-Liouville integrals and Weyl derivatives of sampled paths.

All three operators use product integration: the path is replaced by its
piecewise-linear interpolant and the singular weights (t - s)^(alpha - 1) and
(t - s)^(-alpha - 1) are integrated against it in closed form. The result is
exact for piecewise-linear input.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import gamma as gamma_fn

from .errors import DomainError
from .time_grid import FlaggedPath, SampledPath

logger = logging.getLogger(__name__)

DIRECT_CONVOLUTION_LIMIT = 512


@dataclass(frozen=True)
class FracOrder:
    alpha: float

    def __post_init__(self):
        if not 0.0 < float(self.alpha) < 1.0:
            raise DomainError(f"fractional order must lie strictly inside (0, 1), got {self.alpha}")
        object.__setattr__(self, "alpha", float(self.alpha))

    def __float__(self) -> float:
        return self.alpha


def _order(alpha) -> float:
    return FracOrder(float(alpha)).alpha


def _causal_convolve(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """First ``n`` entries of the full convolution of ``a`` and ``b``."""
    if n <= 0:
        return np.zeros(0)
    if max(a.size, b.size) <= DIRECT_CONVOLUTION_LIMIT:
        return np.convolve(a, b)[:n]
    return fftconvolve(a, b)[:n]


def _integral_weights(alpha: float, dt: float, n: int):
    r0 = np.arange(n, dtype=float) * dt
    r1 = r0 + dt
    level = (r1**alpha - r0**alpha) / alpha
    ramp = (r1 ** (alpha + 1) - r0 ** (alpha + 1)) / (alpha + 1) - r0 * level
    return level, ramp


def _derivative_weights(alpha: float, dt: float, n: int):
    r0 = np.arange(n, dtype=float) * dt
    r1 = r0 + dt
    jump = np.zeros(n)
    jump[1:] = (r0[1:] ** -alpha - r1[1:] ** -alpha) / alpha
    ramp = (r1 ** (1 - alpha) - r0 ** (1 - alpha)) / (1 - alpha)
    ramp[1:] -= r0[1:] * jump[1:]
    return jump, ramp


def _left_integral_values(g: np.ndarray, alpha: float, dt: float) -> np.ndarray:
    n = g.size - 1
    out = np.zeros(n + 1)
    if n == 0:
        return out
    level, ramp = _integral_weights(alpha, dt, n)
    slopes = np.diff(g) / dt
    out[1:] = _causal_convolve(g[1:], level, n) - _causal_convolve(slopes, ramp, n)
    return out / gamma_fn(alpha)


def _left_derivative_values(g: np.ndarray, alpha: float, dt: float):
    """Values and validity of D^alpha_{0+} g on its own nodes (index 0 is the base point)."""
    n = g.size - 1
    out = np.zeros(n + 1)
    valid = np.ones(n + 1, dtype=bool)
    if g[0] != 0.0:
        valid[0] = False
        out[0] = np.nan
    if n == 0:
        return out / gamma_fn(1 - alpha), valid
    jump, ramp = _derivative_weights(alpha, dt, n)
    slopes = np.diff(g) / dt
    elapsed = np.arange(1, n + 1) * dt
    # jump[0] = 0: the cell ending at t carries no jump term
    inner = g[1:] * np.cumsum(jump) - _causal_convolve(g[1:], jump, n)
    inner = inner + _causal_convolve(slopes, ramp, n)
    out[1:] = g[1:] / elapsed**alpha + alpha * inner
    return out / gamma_fn(1 - alpha), valid


@dataclass(frozen=True, eq=False)
class FractionalIntegral(SampledPath):
    """I^alpha_{a+} f on the grid, with the power terms it starts with at ``base``.

    ``leading`` holds pairs (c, p) such that the integral behaves like
    sum c (t - base)^p near the base point. A derivative taken from the same
    base point treats those terms in closed form instead of through the
    piecewise-linear interpolant, which cannot follow (t - a)^alpha on the
    first cell.
    """

    base: float = 0.0
    order: float = 0.5
    leading: Tuple[Tuple[float, float], ...] = ()


def frac_integral_left(f: SampledPath, alpha, a: float) -> FractionalIntegral:
    """(1/Gamma(alpha)) int_a^t (t - s)^(alpha - 1) f(s) ds at every node; 0 before ``a``."""
    alpha = _order(alpha)
    ia = f.grid.index_of(a)
    values = np.zeros(f.grid.n_steps + 1)
    values[ia:] = _left_integral_values(f.values[ia:], alpha, f.grid.dt)
    leading = [(float(f.values[ia]) / gamma_fn(1 + alpha), alpha)]
    if ia < f.grid.n_steps:
        slope = (f.values[ia + 1] - f.values[ia]) / f.grid.dt
        leading.append((float(slope) / gamma_fn(2 + alpha), 1 + alpha))
    return FractionalIntegral(f.grid, values, base=f.grid.node(ia), order=alpha, leading=tuple(leading))


def _leading_terms(f: SampledPath, a: float):
    if isinstance(f, FractionalIntegral) and math.isclose(f.base, a, abs_tol=0.5 * f.grid.dt):
        return tuple((c, p) for c, p in f.leading if c != 0.0)
    return ()


def weyl_derivative_left(f: SampledPath, alpha, a: float) -> FlaggedPath:
    """D^alpha_{a+} f(t) = [f(t)/(t-a)^alpha + alpha int_a^t (f(t)-f(s))/(t-s)^(alpha+1) ds] / Gamma(1-alpha).

    Nodes before ``a`` are undefined; the node ``a`` itself is 0 when f(a) = 0
    and undefined otherwise. A :class:`FractionalIntegral` based at ``a`` has
    its leading power terms differentiated exactly.
    """
    alpha = _order(alpha)
    ia = f.grid.index_of(a)
    dt = f.grid.dt
    values = np.full(f.grid.n_steps + 1, np.nan)
    valid = np.zeros(f.grid.n_steps + 1, dtype=bool)
    g = np.array(f.values[ia:], dtype=float)
    elapsed = np.arange(g.size) * dt
    terms = _leading_terms(f, a)
    for c, p in terms:
        g -= c * elapsed**p
    head, head_valid = _left_derivative_values(g, alpha, dt)
    for c, p in terms:
        # D^alpha (t-a)^p = Gamma(p+1)/Gamma(p+1-alpha) (t-a)^(p-alpha)
        scale = c * gamma_fn(p + 1) / gamma_fn(p + 1 - alpha)
        head[1:] += scale * elapsed[1:] ** (p - alpha)
        if math.isclose(p, alpha):
            head[0] += scale
        elif p < alpha:
            head[0], head_valid[0] = np.nan, False
    values[ia:], valid[ia:] = head, head_valid
    return FlaggedPath(f.grid, values, valid)


def weyl_derivative_right(f: SampledPath, alpha, b: float) -> FlaggedPath:
    """Real form of D^alpha_{b-} f(t):

        [f(t)/(b-t)^alpha + alpha int_t^b (f(t)-f(s))/(s-t)^(alpha+1) ds] / Gamma(1-alpha)

    The complex phase of the usual definition is left out; the pairing in
    :func:`fracsde.integrators.young_fractional` carries the sign instead.
    """
    alpha = _order(alpha)
    ib = f.grid.index_of(b)
    values = np.full(f.grid.n_steps + 1, np.nan)
    valid = np.zeros(f.grid.n_steps + 1, dtype=bool)
    mirrored, mirrored_valid = _left_derivative_values(f.values[: ib + 1][::-1], alpha, f.grid.dt)
    values[: ib + 1] = mirrored[::-1]
    valid[: ib + 1] = mirrored_valid[::-1]
    return FlaggedPath(f.grid, values, valid)
