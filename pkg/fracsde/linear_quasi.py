"""Quasilinear equations dx = b(t, x) dt + (a1(t) x + a0(t)) deltaB with deterministic a1, a0.

With sigma_x = a1 deterministic the shift densities are explicit,

    h(t, u) = int_0^t a1(s) phi(s, u) ds,    Lambda(t) omega = omega - int_0^. h(t, u) du,

and the integrating factors A1 = exp(-int a1 dW), A2 = int A1 a0 dW turn the
z-equation along a driver W into the pathwise ODE

    y' = A1(t) [b(t, z) + (a1(t) z + a0(t)) g(t)],    z = (y + A2) / A1,

where g(t) = int_0^t a1(u) phi(t, u) du. The affine drift b = beta1 x + beta0
also has the closed form evaluated by :func:`solve_linear_explicit`.
"""
from __future__ import annotations

import inspect
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from numpy.polynomial.polynomial import polyval
from scipy.integrate import cumulative_trapezoid

from .char_system import ShiftMap, _cell_average
from .config import DEFAULT_ODE_TOL
from .errors import DomainError, OverflowFlag, StiffnessError
from .integrators import IntegrandSpec, cumulative_riemann
from .io import read_json
from .time_grid import Kernel, SampledPath, TimeGrid, increment_covariance, kernel_cell_masses

logger = logging.getLogger(__name__)

EXP_LIMIT = 700.0
MAX_SUBSTEPS = 64

TimeFn = Callable[[np.ndarray], np.ndarray]
DriftFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
RowDrift = Callable[[int, int, float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CoefficientSpec:
    """Deterministic t -> c(t), a polynomial in ascending powers of t."""

    coeffs: Tuple[float, ...]
    kind: str = "polynomial"

    def __post_init__(self):
        if self.kind not in ("constant", "polynomial"):
            raise DomainError(f"unknown coefficient kind {self.kind!r}")
        coeffs = tuple(float(c) for c in self.coeffs)
        if not coeffs or not np.all(np.isfinite(coeffs)):
            raise DomainError("a coefficient needs at least one finite value")
        if self.kind == "constant" and len(coeffs) != 1:
            raise DomainError("a constant coefficient takes exactly one value")
        object.__setattr__(self, "coeffs", coeffs)

    @classmethod
    def constant(cls, value: float) -> "CoefficientSpec":
        return cls((float(value),), "constant")

    @classmethod
    def from_dict(cls, data: Any) -> "CoefficientSpec":
        """``{"kind": "constant", "value": c}``, ``{"kind": "polynomial", "coeffs": [...]}`` or a bare number."""
        if isinstance(data, (int, float)):
            return cls.constant(data)
        if not isinstance(data, dict):
            raise DomainError(f"coefficient spec must be a number or an object, got {data!r}")
        kind = data.get("kind")
        if kind == "constant":
            if "value" not in data:
                raise DomainError("constant coefficient spec needs a 'value'")
            return cls.constant(data["value"])
        if kind == "polynomial":
            return cls(tuple(data.get("coeffs", ())), "polynomial")
        raise DomainError(f"unknown coefficient kind {kind!r}; use 'constant' or 'polynomial'")

    def to_dict(self) -> Dict[str, Any]:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.coeffs[0]}
        return {"kind": "polynomial", "coeffs": list(self.coeffs)}

    def __call__(self, t):
        return polyval(np.asarray(t, dtype=float), self.coeffs)


def _required_positional(fn) -> Optional[int]:
    try:
        signature = inspect.signature(fn)
    except (TypeError, ValueError):
        return None
    return sum(
        1
        for p in signature.parameters.values()
        if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD) and p.default is p.empty
    )


def _sample(fn: TimeFn, grid: TimeGrid, label: str) -> np.ndarray:
    values = np.broadcast_to(np.asarray(fn(grid.nodes), dtype=float), grid.nodes.shape).copy()
    if not np.all(np.isfinite(values)):
        raise DomainError(f"coefficient {label} is not finite on the grid")
    return values


@dataclass(frozen=True, eq=False)
class QuasilinearCoeffs:
    """a1(t), a0(t) and the drift b(t, x); ``beta1``/``beta0`` are set for affine drifts."""

    a1: TimeFn
    a0: TimeFn
    b: DriftFn
    beta1: Optional[TimeFn] = None
    beta0: Optional[TimeFn] = None
    name: str = "quasilinear"

    def __post_init__(self):
        for label, fn, arity in (("a1", self.a1, 1), ("a0", self.a0, 1), ("b", self.b, 2)):
            if not callable(fn):
                raise DomainError(f"coefficient {label} must be callable")
            required = _required_positional(fn)
            if required is not None and required > arity:
                raise DomainError(
                    f"coefficient {label} takes {required} arguments; "
                    f"only deterministic coefficients of {'t' if arity == 1 else '(t, x)'} are supported"
                )

    @classmethod
    def linear(cls, beta1: TimeFn, beta0: TimeFn, a1: TimeFn, a0: TimeFn) -> "QuasilinearCoeffs":
        return cls(
            a1=a1,
            a0=a0,
            b=lambda t, x: beta1(t) * x + beta0(t),
            beta1=beta1,
            beta0=beta0,
            name="linear",
        )

    @property
    def is_linear(self) -> bool:
        return self.beta1 is not None and self.beta0 is not None

    def sample(self, grid: TimeGrid) -> Tuple[np.ndarray, np.ndarray]:
        return _sample(self.a1, grid, "a1"), _sample(self.a0, grid, "a0")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QuasilinearCoeffs":
        """``{"a1": spec, "a0": spec, "b": drift}``; missing a1/a0 are zero.

        The drift is ``{"beta1": spec, "beta0": spec}`` or ``{"kind": "logistic", "rate": r}``
        for b = r x (1 - x).
        """
        if not isinstance(data, dict):
            raise DomainError("coefficient file must hold a JSON object")
        a1 = CoefficientSpec.from_dict(data.get("a1", 0.0))
        a0 = CoefficientSpec.from_dict(data.get("a0", 0.0))
        drift = data.get("b")
        if not isinstance(drift, dict):
            raise DomainError("coefficient file needs a drift object 'b'")
        if drift.get("kind") == "logistic":
            rate = float(drift.get("rate", 1.0))
            return cls(a1=a1, a0=a0, b=lambda t, x: rate * x * (1.0 - x), name=f"logistic({rate})")
        if "beta1" in drift or "beta0" in drift:
            beta1 = CoefficientSpec.from_dict(drift.get("beta1", 0.0))
            beta0 = CoefficientSpec.from_dict(drift.get("beta0", 0.0))
            return cls.linear(beta1, beta0, a1, a0)
        raise DomainError(f"unknown drift spec {drift!r}")


def load_coefficient_file(path: str) -> QuasilinearCoeffs:
    coeffs = QuasilinearCoeffs.from_dict(read_json(path))
    logger.info(f"从 {path} 加载 {coeffs.name} 系数")
    return coeffs


@dataclass(frozen=True, eq=False)
class LinearKernels:
    """Phi(t, s) along the driver and Psi(t, s) with the kernel correction, at grid nodes.

    Both exponent matrices are indexed [t, s] and only their lower triangle is used.
    """

    grid: TimeGrid
    phi_exponent: np.ndarray
    psi_exponent: np.ndarray

    def _pair(self, t: float, s: float) -> Tuple[int, int]:
        i, j = self.grid.index_of(t), self.grid.index_of(s)
        if j > i:
            raise DomainError(f"kernels need s <= t, got s={s}, t={t}")
        return i, j

    def Phi(self, t: float, s: float) -> float:
        return float(np.exp(self.phi_exponent[self._pair(t, s)]))

    def Psi(self, t: float, s: float) -> float:
        return float(np.exp(self.psi_exponent[self._pair(t, s)]))

    def psi_matrix(self) -> np.ndarray:
        lower = np.tril(np.ones_like(self.psi_exponent, dtype=bool))
        return np.where(lower, np.exp(np.where(lower, self.psi_exponent, 0.0)), 0.0)


def _check_exponent(exponent: np.ndarray, where: str) -> None:
    worst = int(np.argmax(np.abs(exponent)))
    value = float(exponent.flat[worst])
    if abs(value) > EXP_LIMIT:
        raise OverflowFlag(value, where)


def _shift_densities(a1v: np.ndarray, kernel: Kernel, grid: TimeGrid) -> np.ndarray:
    """Column i is h(t_i, u) on every node u."""
    weighted = kernel_cell_masses(kernel, grid) * _cell_average(a1v)
    return np.concatenate([np.zeros((grid.n_steps + 1, 1)), np.cumsum(weighted, axis=1)], axis=1)


def _kernel_drift(a1v: np.ndarray, kernel: Kernel, grid: TimeGrid) -> np.ndarray:
    """g(t_k) = int_0^{t_k} a1(u) phi(t_k, u) du."""
    weighted = kernel_cell_masses(kernel, grid) * _cell_average(a1v)
    return np.tril(weighted, -1).sum(axis=1)


def _square_masses(a1v: np.ndarray, kernel: Kernel, grid: TimeGrid) -> np.ndarray:
    """S[i, j] = int_0^{t_i} int_0^{t_j} a1(u) a1(v) phi(u, v) du dv."""
    w = _cell_average(a1v)
    pairs = increment_covariance(kernel, grid) * np.outer(w, w)
    square = np.zeros((grid.n_steps + 1, grid.n_steps + 1))
    square[1:, 1:] = np.cumsum(np.cumsum(pairs, axis=0), axis=1)
    return square


def _tail_masses(a1v: np.ndarray, kernel: Kernel, grid: TimeGrid) -> np.ndarray:
    """R[j, i] = int_{t_j}^{t_i} a1(v) phi(t_j, v) dv, zero for i <= j."""
    weighted = np.triu(kernel_cell_masses(kernel, grid) * _cell_average(a1v))
    return np.concatenate([np.zeros((grid.n_steps + 1, 1)), np.cumsum(weighted, axis=1)], axis=1)


def quasilinear_gamma_lambda(
    coeffs: QuasilinearCoeffs, kernel: Kernel, grid: TimeGrid
) -> Tuple[List[ShiftMap], List[ShiftMap]]:
    """Gamma(t_i) and its inverse Lambda(t_i) for every node; the densities are exact negatives."""
    a1v, _ = coeffs.sample(grid)
    densities = _shift_densities(a1v, kernel, grid)
    gamma = [ShiftMap(grid.node(i), SampledPath(grid, densities[:, i])) for i in range(grid.n_steps + 1)]
    return gamma, [shift.negated() for shift in gamma]


def integrating_factors(
    coeffs: QuasilinearCoeffs, B: SampledPath, shift: Optional[ShiftMap] = None
) -> Tuple[SampledPath, SampledPath]:
    """A1 = exp(-int_0^t a1 dW) and A2 = int_0^t A1 a0 dW along W = shift(B), or B itself."""
    grid = B.grid
    driver = B if shift is None else shift.apply(B)
    a1v, a0v = coeffs.sample(grid)
    exponent = -cumulative_riemann(IntegrandSpec(SampledPath(grid, a1v)), driver).values
    _check_exponent(exponent, "integrating factor A1")
    A1 = SampledPath(grid, np.exp(exponent))
    A2 = cumulative_riemann(IntegrandSpec(SampledPath(grid, A1.values * a0v)), driver)
    return A1, A2


def _factor_rows(a1v: np.ndarray, a0v: np.ndarray, drivers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`integrating_factors` for a stack of drivers."""
    increments = np.diff(drivers, axis=1)
    exponent = np.zeros_like(drivers)
    exponent[:, 1:] = -np.cumsum(_cell_average(a1v) * increments, axis=1)
    _check_exponent(exponent, "integrating factors along the inverse shifts")
    A1 = np.exp(exponent)
    weighted = A1 * a0v
    A2 = np.zeros_like(drivers)
    A2[:, 1:] = np.cumsum(0.5 * (weighted[:, :-1] + weighted[:, 1:]) * increments, axis=1)
    return A1, A2


def _transformed_drift(
    b: DriftFn,
    grid: TimeGrid,
    A1: np.ndarray,
    A2: np.ndarray,
    a1v: np.ndarray,
    a0v: np.ndarray,
    g: np.ndarray,
) -> RowDrift:
    """B(t, y) = A1 [b(t, z) + (a1 z + a0) g] with every input linear inside a cell."""
    nodes, dt = grid.nodes, grid.dt

    def rhs(lo: int, k: int, theta: float, y: np.ndarray) -> np.ndarray:
        def lerp(values):
            return (1.0 - theta) * values[..., k] + theta * values[..., k + 1]

        s = nodes[k] + theta * dt
        factor = lerp(A1[lo:])
        z = (y + lerp(A2[lo:])) / factor
        drift = np.asarray(b(s, z), dtype=float) + (lerp(a1v) * z + lerp(a0v)) * lerp(g)
        return factor * drift

    return rhs


def _rk4_cell(rhs: RowDrift, lo: int, k: int, y: np.ndarray, substeps: int, dt: float) -> np.ndarray:
    h = dt / substeps
    d = 1.0 / substeps
    for j in range(substeps):
        theta = j * d
        k1 = rhs(lo, k, theta, y)
        k2 = rhs(lo, k, theta + 0.5 * d, y + 0.5 * h * k1)
        k3 = rhs(lo, k, theta + 0.5 * d, y + 0.5 * h * k2)
        k4 = rhs(lo, k, theta + d, y + h * k3)
        y = y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y


def _integrate_rows(rhs: RowDrift, y0: np.ndarray, grid: TimeGrid, ode_tol: float, staggered: bool) -> np.ndarray:
    """Classical RK4 over each grid cell with step doubling as the acceptance test.

    A cell is first taken in one step and compared with two half steps; the
    number of sub-steps doubles until both agree to ``ode_tol`` (relative to
    1 + |y|). Past MAX_SUBSTEPS the cell is rejected with StiffnessError.
    With ``staggered`` row i stops at node i and the diagonal is returned;
    otherwise the full trajectories (rows x nodes) are returned.
    """
    n, dt = grid.n_steps, grid.dt
    y = np.array(y0, dtype=float)
    if staggered:
        out = np.empty(n + 1)
        out[0] = y[0]
    else:
        out = np.empty((y.size, n + 1))
        out[:, 0] = y
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n):
            lo = k + 1 if staggered else 0
            substeps = 1
            coarse = _rk4_cell(rhs, lo, k, y[lo:], substeps, dt)
            while True:
                fine = _rk4_cell(rhs, lo, k, y[lo:], 2 * substeps, dt)
                if np.all(np.isfinite(fine)) and np.all(np.isfinite(coarse)):
                    scale = 1.0 + float(np.max(np.abs(fine)))
                    if float(np.max(np.abs(fine - coarse))) <= ode_tol * scale:
                        break
                substeps *= 2
                if 2 * substeps > MAX_SUBSTEPS:
                    raise StiffnessError(grid.node(k), dt / MAX_SUBSTEPS)
                coarse = fine
            if substeps > 1:
                logger.debug(f"cell at t={grid.node(k):.6g} needed {2 * substeps} RK4 sub-steps")
            y[lo:] = fine
            if staggered:
                out[k + 1] = y[k + 1]
            else:
                out[:, k + 1] = y
    return out


@dataclass(eq=False)
class TransformedSolution:
    """The z-equation along one driver and its pathwise ODE variable y = A1 z - A2."""

    z: SampledPath
    y: SampledPath
    A1: SampledPath
    A2: SampledPath


def solve_transformed(
    coeffs: QuasilinearCoeffs,
    eta: float,
    B: SampledPath,
    kernel: Kernel,
    shift: Optional[ShiftMap] = None,
    ode_tol: float = DEFAULT_ODE_TOL,
) -> TransformedSolution:
    """z along W = shift(B) (or B) through the integrating-factor ODE."""
    grid = B.grid
    a1v, a0v = coeffs.sample(grid)
    A1, A2 = integrating_factors(coeffs, B, shift)
    g = _kernel_drift(a1v, kernel, grid)
    rhs = _transformed_drift(coeffs.b, grid, A1.values[None, :], A2.values[None, :], a1v, a0v, g)
    y = _integrate_rows(rhs, np.array([float(eta)]), grid, ode_tol, staggered=False)[0]
    z = (y + A2.values) / A1.values
    return TransformedSolution(z=SampledPath(grid, z), y=SampledPath(grid, y), A1=A1, A2=A2)


def solve_quasilinear(
    coeffs: QuasilinearCoeffs,
    eta: float,
    B: SampledPath,
    kernel: Kernel,
    ode_tol: float = DEFAULT_ODE_TOL,
) -> SampledPath:
    """The Itô solution x(t_i) = z(t_i) along Lambda(t_i) omega at every node.

    For each node the inverse shift is explicit, the integrating factors are
    recomputed along the shifted driver and the transformed ODE is integrated
    up to that node. All nodes are integrated together as one vector ODE.
    """
    if ode_tol <= 0:
        raise DomainError(f"ode_tol must be positive, got {ode_tol}")
    grid = B.grid
    n = grid.n_steps
    a1v, a0v = coeffs.sample(grid)
    densities = _shift_densities(a1v, kernel, grid)
    drivers = B.values[None, :] - cumulative_trapezoid(densities.T, dx=grid.dt, axis=1, initial=0.0)
    A1, A2 = _factor_rows(a1v, a0v, drivers)
    g = _kernel_drift(a1v, kernel, grid)
    rhs = _transformed_drift(coeffs.b, grid, A1, A2, a1v, a0v, g)
    y = _integrate_rows(rhs, np.full(n + 1, float(eta)), grid, ode_tol, staggered=True)
    idx = np.arange(n + 1)
    x = (y + A2[idx, idx]) / A1[idx, idx]
    logger.info(f"solved quasilinear equation ({coeffs.name}) on {n} steps; x(T)={x[-1]:.6g}")
    return SampledPath(grid, x)


def linear_kernels(beta1: TimeFn, a1: TimeFn, B: SampledPath, kernel: Kernel) -> LinearKernels:
    """Phi and Psi for the drift coefficient beta1 and the noise coefficient a1.

    Phi(t, s) = exp{int_s^t (beta1 + a1 g) du + int_s^t a1 dB},
    Psi(t, s) = exp{int_s^t beta1 du + int_s^t a1 dB - int_s^t a1(u) int_u^t a1(v) phi(u, v) dv du}.
    The last integral is half the double integral over [s, t]^2 and uses the
    exact cell-pair masses of phi.
    """
    grid = B.grid
    b1v = _sample(beta1, grid, "beta1")
    a1v = _sample(a1, grid, "a1")
    additive = cumulative_trapezoid(b1v, dx=grid.dt, initial=0.0)
    additive = additive + cumulative_riemann(IntegrandSpec(SampledPath(grid, a1v)), B).values
    square = _square_masses(a1v, kernel, grid)
    diag = np.diag(square)
    window = diag[:, None] + diag[None, :] - 2.0 * square
    phi_exponent = (additive + 0.5 * diag)[:, None] - (additive + 0.5 * diag)[None, :]
    psi_exponent = additive[:, None] - additive[None, :] - 0.5 * window
    lower = np.tril(np.ones_like(square, dtype=bool))
    _check_exponent(np.where(lower, phi_exponent, 0.0), "Phi")
    _check_exponent(np.where(lower, psi_exponent, 0.0), "Psi")
    return LinearKernels(grid=grid, phi_exponent=phi_exponent, psi_exponent=psi_exponent)


def _row_trapezoid(F: np.ndarray, dt: float) -> np.ndarray:
    """Row i: trapezoid of F[i, 0..i] (F is lower triangular)."""
    return dt * (F.sum(axis=1) - 0.5 * F[:, 0] - 0.5 * np.diag(F))


def solve_linear_explicit(
    beta1: TimeFn,
    beta0: TimeFn,
    a1: TimeFn,
    a0: TimeFn,
    x0: float,
    B: SampledPath,
    kernel: Kernel,
) -> SampledPath:
    """Closed-form solution of dx = (beta1 x + beta0) dt + (a1 x + a0) deltaB:

        x(t) = Psi(t, 0) x0 + int_0^t Psi(t, s) beta0 ds + int_0^t Psi(t, s) a0 dB(s)
               - int_0^t Psi(t, s) a0(s) int_s^t a1(v) phi(s, v) dv ds

    The dB integral is the midpoint Riemann sum of s -> Psi(t, s) a0(s).
    """
    grid = B.grid
    dt = grid.dt
    b0v = _sample(beta0, grid, "beta0")
    a1v = _sample(a1, grid, "a1")
    a0v = _sample(a0, grid, "a0")
    psi = linear_kernels(beta1, a1, B, kernel).psi_matrix()
    forced = psi * a0v[None, :]
    mids = np.tril(0.5 * (forced[:, :-1] + forced[:, 1:]), -1)
    x = (
        psi[:, 0] * float(x0)
        + _row_trapezoid(psi * b0v[None, :], dt)
        + mids @ np.diff(B.values)
        - _row_trapezoid(forced * _tail_masses(a1v, kernel, grid).T, dt)
    )
    return SampledPath(grid, x)


def explicit_solution(coeffs: QuasilinearCoeffs, x0: float, B: SampledPath, kernel: Kernel) -> SampledPath:
    if not coeffs.is_linear:
        raise DomainError(f"{coeffs.name} drift is not affine; use solve_quasilinear")
    return solve_linear_explicit(coeffs.beta1, coeffs.beta0, coeffs.a1, coeffs.a0, x0, B, kernel)
