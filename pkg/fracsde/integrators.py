"""Pathwise and Wick-Itô integrals against sampled paths, plus Itô formula checks.

The pathwise integral is computed two ways: as a Riemann sum and through the
fractional integration by parts formula. The Itô integral is the pathwise one
minus the correction int_a^b D^phi_t f(t) dt, where

    D^phi_t f(t) = int_0^T phi(t, s) D_s f(t) ds

and ``D_s f(t)`` is the Malliavin derivative kernel supplied by the caller.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from .errors import DomainError
from .frac_calc import FracOrder, weyl_derivative_left, weyl_derivative_right
from .time_grid import (
    BetaLike,
    Kernel,
    SampledPath,
    TimeGrid,
    _beta_value,
    kernel_cell_masses,
    kernel_cell_moments,
)

logger = logging.getLogger(__name__)

EVAL_POINTS = ("left", "mid", "right")
ALPHA_MARGIN = 0.01
DEFAULT_REFINE = 64

KERNEL_ZERO = "zero"
KERNEL_INDICATOR = "indicator"
KERNEL_GENERAL = "general"
KERNEL_DIAGONAL = "diagonal"


@dataclass(frozen=True, eq=False)
class MalliavinKernel:
    """The kernel (s, t) -> D_s f(t) of an integrand.

    ``indicator`` kernels have the form 1_[0,t](s) c(t) with ``factor`` = c on
    the grid (c = 1 for f = B). ``diagonal`` kernels carry the finished path
    t -> D^phi_t f(t) directly. ``general`` kernels call ``evaluator``.
    """

    kind: str
    evaluator: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    factor: Optional[SampledPath] = None
    diagonal: Optional[SampledPath] = None

    def __post_init__(self):
        if self.kind not in (KERNEL_ZERO, KERNEL_INDICATOR, KERNEL_GENERAL, KERNEL_DIAGONAL):
            raise DomainError(f"unknown Malliavin kernel kind {self.kind!r}")
        if self.kind == KERNEL_INDICATOR and self.factor is None:
            raise DomainError("indicator kernels need the factor c(t)")
        if self.kind == KERNEL_GENERAL and self.evaluator is None:
            raise DomainError("general kernels need an evaluator (s, t) -> D_s f(t)")
        if self.kind == KERNEL_DIAGONAL and self.diagonal is None:
            raise DomainError("diagonal kernels need the path t -> D^phi_t f(t)")

    @classmethod
    def zero(cls) -> "MalliavinKernel":
        return cls(KERNEL_ZERO)

    @classmethod
    def indicator(cls, factor: SampledPath) -> "MalliavinKernel":
        return cls(KERNEL_INDICATOR, factor=factor)

    @classmethod
    def general(cls, evaluator: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "MalliavinKernel":
        return cls(KERNEL_GENERAL, evaluator=evaluator)

    @classmethod
    def from_diagonal(cls, diagonal: SampledPath) -> "MalliavinKernel":
        return cls(KERNEL_DIAGONAL, diagonal=diagonal)

    def __call__(self, s, t) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == KERNEL_ZERO:
            return np.zeros(np.broadcast(s, t).shape)
        if self.kind == KERNEL_INDICATOR:
            c = np.interp(t, self.factor.grid.nodes, self.factor.values)
            return np.where(s <= t, c, 0.0)
        if self.kind == KERNEL_GENERAL:
            return np.broadcast_to(self.evaluator(s, t), np.broadcast(s, t).shape)
        raise DomainError("a diagonal kernel only stores D^phi_t f(t), not D_s f(t)")


@dataclass(frozen=True, eq=False)
class IntegrandSpec:
    """An integrand along one realised path, its Malliavin kernel and asserted regularity."""

    values: SampledPath
    malliavin: Optional[MalliavinKernel] = None
    holder_beta: BetaLike = 1.0

    def __post_init__(self):
        _beta_value(self.holder_beta)

    @property
    def grid(self) -> TimeGrid:
        return self.values.grid

    @classmethod
    def deterministic(cls, values: SampledPath, holder_beta: BetaLike = 1.0) -> "IntegrandSpec":
        return cls(values, MalliavinKernel.zero(), holder_beta)


@dataclass(frozen=True)
class ScalarFunction:
    """F(t, x) with the partial derivatives the Itô formulas need; all vectorised."""

    value: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dx: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dt: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(default=lambda t, x: 0.0 * x)
    dxx: Callable[[np.ndarray, np.ndarray], np.ndarray] = field(default=lambda t, x: 0.0 * x)


def _same_grid(*paths: SampledPath) -> TimeGrid:
    grid = paths[0].grid
    for other in paths[1:]:
        if other.grid != grid:
            raise DomainError(f"paths live on different grids: {grid} vs {other.grid}")
    return grid


def _span(grid: TimeGrid, a: float, b: float):
    ia, ib = grid.index_of(a), grid.index_of(b)
    if ia >= ib:
        raise DomainError(f"integration needs a < b on the grid, got a={a}, b={b}")
    return ia, ib


def _cell_points(values: np.ndarray, eval_point: str) -> np.ndarray:
    if eval_point == "left":
        return values[:-1]
    if eval_point == "right":
        return values[1:]
    if eval_point == "mid":
        return 0.5 * (values[:-1] + values[1:])
    raise DomainError(f"eval_point must be one of {EVAL_POINTS}, got {eval_point!r}")


def young_riemann(f: IntegrandSpec, g: SampledPath, a: float, b: float, eval_point: str = "mid") -> float:
    """sum_k f(xi_k) (g(t_{k+1}) - g(t_k)) over the cells of [a, b].

    ``mid`` averages the two cell endpoints of f.
    """
    ia, ib = _span(_same_grid(f.values, g), a, b)
    points = _cell_points(f.values.values[ia : ib + 1], eval_point)
    return float(np.dot(points, np.diff(g.values[ia : ib + 1])))


def cumulative_riemann(f: IntegrandSpec, g: SampledPath, eval_point: str = "mid") -> SampledPath:
    """t_i -> young_riemann(f, g, 0, t_i), with 0 at t = 0."""
    grid = _same_grid(f.values, g)
    terms = _cell_points(f.values.values, eval_point) * np.diff(g.values)
    return SampledPath(grid, np.concatenate([[0.0], np.cumsum(terms)]))


def admissible_alpha(f_beta: float, g_beta: float, alpha: Optional[float] = None) -> float:
    """Order for the fractional pairing: inside (1 - g_beta, f_beta).

    Without an explicit ``alpha`` the window centre is used, kept ALPHA_MARGIN
    away from both ends when the window is wide enough.
    """
    lower, upper = 1.0 - g_beta, f_beta
    if lower >= upper:
        raise DomainError(
            f"no admissible order: Hölder exponents {f_beta} + {g_beta} must exceed 1"
        )
    if alpha is not None:
        alpha = FracOrder(alpha).alpha
        if not lower < alpha < upper:
            raise DomainError(f"alpha={alpha} is outside the admissible window ({lower:.4g}, {upper:.4g})")
        return alpha
    centre = 0.5 * (lower + upper)
    lo, hi = lower + ALPHA_MARGIN, upper - ALPHA_MARGIN
    return float(np.clip(centre, lo, hi)) if lo < hi else centre


def _refined(values: np.ndarray, factor: int) -> np.ndarray:
    coarse = np.arange(values.size, dtype=float)
    fine = np.arange((values.size - 1) * factor + 1, dtype=float) / factor
    return np.interp(fine, coarse, values)


def young_fractional(
    f: IntegrandSpec,
    g: SampledPath,
    a: float,
    b: float,
    alpha: Optional[float] = None,
    g_beta: Optional[BetaLike] = None,
    refine: int = DEFAULT_REFINE,
) -> float:
    """Pathwise integral by fractional integration by parts:

        f(a) (g(b) - g(a)) - int_a^b D^alpha_{a+}(f - f(a))(t) D^{1-alpha}_{b-}(g - g(b))(t) dt

    Both derivatives are exact for the piecewise-linear interpolants. The outer
    integral is a trapezoid rule on a grid ``refine`` times finer than the input.
    Its error comes from the (t - t_k)^(1-alpha) and (t_k - t)^alpha cusps at the
    input nodes and falls like refine^-(1 + min(alpha, 1 - alpha)).
    ``g_beta`` defaults to the integrand's Hölder exponent.
    """
    grid = _same_grid(f.values, g)
    ia, ib = _span(grid, a, b)
    f_beta = _beta_value(f.holder_beta)
    alpha = admissible_alpha(f_beta, f_beta if g_beta is None else _beta_value(g_beta), alpha)
    if refine < 1:
        raise DomainError(f"refine must be a positive integer, got {refine}")

    fv = _refined(f.values.values[ia : ib + 1], refine)
    gv = _refined(g.values[ia : ib + 1], refine)
    window = TimeGrid(grid.node(ib) - grid.node(ia), (ib - ia) * refine)
    # both operators commute with translation, so the window starts at 0
    df = weyl_derivative_left(SampledPath(window, fv - fv[0]), alpha, 0.0).values
    dg = weyl_derivative_right(SampledPath(window, gv - gv[-1]), 1.0 - alpha, window.horizon).values
    pairing = trapezoid(df * dg, dx=window.dt)
    return float(fv[0] * (gv[-1] - gv[0]) - pairing)


def _require_malliavin(f: IntegrandSpec) -> MalliavinKernel:
    if f.malliavin is None:
        raise DomainError("the Itô integral needs the integrand's Malliavin kernel; use MalliavinKernel.zero() for deterministic integrands")
    return f.malliavin


def dphi_diagonal(f: IntegrandSpec, kernel: Kernel) -> SampledPath:
    """The path t -> D^phi_t f(t) = int_0^T phi(t, s) D_s f(t) ds.

    Indicator kernels use int_0^t phi(t, s) ds = H t^(2H-1); general kernels are
    integrated against phi by product integration on their piecewise-linear
    interpolant in s.
    """
    malliavin = _require_malliavin(f)
    grid = f.grid
    t = grid.nodes
    if malliavin.kind == KERNEL_ZERO:
        return SampledPath.constant(grid, 0.0)
    if malliavin.kind == KERNEL_DIAGONAL:
        _same_grid(malliavin.diagonal, f.values)
        return malliavin.diagonal
    if malliavin.kind == KERNEL_INDICATOR:
        _same_grid(malliavin.factor, f.values)
        return SampledPath(grid, malliavin.factor.values * kernel.partial_integral(t, t))
    sections = np.asarray(malliavin(t[None, :], t[:, None]), dtype=float)
    if not np.all(np.isfinite(sections)):
        raise DomainError("Malliavin kernel evaluator returned non-finite values")
    masses = kernel_cell_masses(kernel, grid)
    moments = kernel_cell_moments(kernel, grid)
    slopes = np.diff(sections, axis=1) / grid.dt
    values = np.sum(sections[:, :-1] * masses + slopes * moments, axis=1)
    return SampledPath(grid, values)


def _cell_corrections(f: IntegrandSpec, kernel: Kernel) -> np.ndarray:
    """int over each cell of D^phi_t f(t) dt."""
    malliavin = _require_malliavin(f)
    grid = f.grid
    if malliavin.kind == KERNEL_ZERO:
        return np.zeros(grid.n_steps)
    if malliavin.kind == KERNEL_INDICATOR:
        # c(t) H t^(2H-1) with c averaged over the cell, the power integrated exactly
        c = malliavin.factor.values
        powers = grid.nodes ** (2 * kernel.hurst)
        return 0.5 * (c[:-1] + c[1:]) * 0.5 * np.diff(powers)
    diagonal = dphi_diagonal(f, kernel).values
    return 0.5 * (diagonal[:-1] + diagonal[1:]) * grid.dt


def ito_integral(
    f: IntegrandSpec,
    B: SampledPath,
    a: float,
    b: float,
    kernel: Kernel,
    eval_point: str = "left",
) -> float:
    """Left-point pathwise integral minus int_a^b D^phi_t f(t) dt.

    A missing Malliavin kernel is an error; deterministic integrands must say so
    with ``MalliavinKernel.zero()``. With ``eval_point="mid"`` the f = B case
    telescopes to B(b)^2/2 - B(a)^2/2 - (b^2H - a^2H)/2 exactly; the left sum
    differs from it by -sum (dB)^2 / 2, which vanishes only as the grid refines.
    """
    _require_malliavin(f)
    ia, ib = _span(_same_grid(f.values, B), a, b)
    correction = float(np.sum(_cell_corrections(f, kernel)[ia:ib]))
    return young_riemann(f, B, a, b, eval_point) - correction


def cumulative_ito(f: IntegrandSpec, B: SampledPath, kernel: Kernel, eval_point: str = "left") -> SampledPath:
    pathwise = cumulative_riemann(f, B, eval_point)
    corrections = np.concatenate([[0.0], np.cumsum(_cell_corrections(f, kernel))])
    return pathwise.shifted(-corrections)


def _node_integral(values: np.ndarray, dt: float) -> np.ndarray:
    return cumulative_trapezoid(values, dx=dt, initial=0.0)


def check_pathwise_ito_formula(
    F: ScalarFunction,
    eta0: float,
    f: IntegrandSpec,
    g: SampledPath,
    B: SampledPath,
) -> float:
    """Max node residual of the pathwise chain rule for eta = eta0 + int g ds + int f dB.

    Compares F(t, eta(t)) against
    F(0, eta0) + int (F_t + F_x g) ds + int F_x f dB (pathwise).
    """
    grid = _same_grid(f.values, g, B)
    t = grid.nodes
    eta = eta0 + _node_integral(g.values, grid.dt) + cumulative_riemann(f, B).values
    lhs = np.asarray(F.value(t, eta), dtype=float)
    f_x = np.asarray(F.dx(t, eta), dtype=float)
    drift = np.asarray(F.dt(t, eta), dtype=float) + f_x * g.values
    noise = IntegrandSpec(SampledPath(grid, f_x * f.values.values), holder_beta=f.holder_beta)
    rhs = lhs[0] + _node_integral(drift, grid.dt) + cumulative_riemann(noise, B).values
    residual = float(np.max(np.abs(lhs - rhs)))
    logger.debug(f"pathwise Itô formula residual {residual:.3g} on {grid.n_steps} steps")
    return residual


def check_ito_ito_formula(
    F: ScalarFunction,
    eta0: float,
    f: IntegrandSpec,
    g: SampledPath,
    B: SampledPath,
    kernel: Kernel,
    eta_dphi: Optional[SampledPath],
) -> float:
    """Max node residual of the Itô chain rule for eta = eta0 + int g ds + int f deltaB.

    ``eta_dphi`` is the path s -> D^phi_s eta(s). The right-hand side is

        F(0, eta0) + int (F_t + F_x g) ds + int F_x f deltaB + int F_xx f D^phi_s eta(s) ds

    where the Itô integral of F_x f uses the chain rule
    D^phi(F_x f) = F_xx f D^phi eta + F_x D^phi f for its correction.
    """
    if eta_dphi is None:
        raise DomainError("the Itô formula needs D^phi_s eta(s) for the second-order term")
    grid = _same_grid(f.values, g, B, eta_dphi)
    t = grid.nodes
    eta = eta0 + _node_integral(g.values, grid.dt) + cumulative_ito(f, B, kernel, "mid").values
    lhs = np.asarray(F.value(t, eta), dtype=float)
    f_x = np.asarray(F.dx(t, eta), dtype=float)
    f_xx = np.asarray(F.dxx(t, eta), dtype=float)
    second_order = f_xx * f.values.values * eta_dphi.values
    noise_dphi = second_order + f_x * dphi_diagonal(f, kernel).values
    noise = IntegrandSpec(
        SampledPath(grid, f_x * f.values.values),
        MalliavinKernel.from_diagonal(SampledPath(grid, noise_dphi)),
        f.holder_beta,
    )
    drift = np.asarray(F.dt(t, eta), dtype=float) + f_x * g.values + second_order
    rhs = lhs[0] + _node_integral(drift, grid.dt) + cumulative_ito(noise, B, kernel, "mid").values
    residual = float(np.max(np.abs(lhs - rhs)))
    logger.debug(f"Itô formula residual {residual:.3g} on {grid.n_steps} steps")
    return residual
