"""Refinement studies: error against dt on nested grids and the fitted order."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .config import default_beta, validate_beta, validate_hurst
from .errors import DomainError
from .fbm import FbmConfig, sample_fbm
from .integrators import IntegrandSpec, young_fractional, young_riemann
from .linear_quasi import CoefficientSpec, QuasilinearCoeffs, solve_quasilinear
from .picard import ContractionProblem, constant_h, solve_fixed_point
from .time_grid import Kernel, SampledPath, TimeGrid
from .utils import fit_order

logger = logging.getLogger(__name__)

MIN_LEVELS = 3
STUDIES = ("young-methods", "linear-oracle", "picard-ode")
ORACLE_DRIFT = 0.1
ORACLE_NOISE = 0.5


@dataclass
class ConvergenceRow:
    n_steps: int
    dt: float
    error: float


@dataclass
class ConvergenceTable:
    experiment: str
    rows: List[ConvergenceRow] = field(default_factory=list)
    order: float = math.nan

    def to_dict(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "order": self.order,
            "rows": [{"n_steps": r.n_steps, "dt": r.dt, "error": r.error} for r in self.rows],
        }


def validate_levels(steps: Sequence[int]) -> List[int]:
    """Step counts sorted ascending; each level must double the previous one."""
    levels = sorted(int(n) for n in steps)
    if len(levels) < MIN_LEVELS:
        raise DomainError(f"a refinement study needs at least {MIN_LEVELS} levels, got {len(levels)}")
    for coarse, fine in zip(levels, levels[1:]):
        if fine != 2 * coarse:
            raise DomainError(f"step counts must double from level to level, got {coarse} then {fine}")
    return levels


def _young_error(B: SampledPath, beta: float) -> float:
    T = B.grid.horizon
    f = IntegrandSpec(B, holder_beta=beta)
    return abs(young_fractional(f, B, 0.0, T) - young_riemann(f, B, 0.0, T))


def _linear_oracle_error(B: SampledPath, kernel: Kernel) -> float:
    coeffs = QuasilinearCoeffs.linear(
        CoefficientSpec.constant(ORACLE_DRIFT),
        CoefficientSpec.constant(0.0),
        CoefficientSpec.constant(ORACLE_NOISE),
        CoefficientSpec.constant(0.0),
    )
    T = B.grid.horizon
    x = solve_quasilinear(coeffs, 1.0, B, kernel)
    exact = math.exp(
        ORACLE_DRIFT * T + ORACLE_NOISE * B.values[-1] - 0.5 * ORACLE_NOISE**2 * T ** (2 * kernel.hurst)
    )
    return abs(x.values[-1] - exact)


def _picard_ode_error(grid: TimeGrid) -> float:
    """x = 1 + int_0^t x ds with the left-point rule; the exact value at T is e^T."""

    def apply_F(prefix: TimeGrid, x: np.ndarray) -> np.ndarray:
        return 1.0 + np.concatenate([[0.0], np.cumsum(x[:-1])]) * prefix.dt

    problem = ContractionProblem(
        apply_F=apply_F, F0=1.0, kappa=1.0, gamma=1.0, beta=1.0, Delta=grid.horizon, h_bound=constant_h(1.0)
    )
    report = solve_fixed_point(problem, grid)
    return abs(float(report.solution[-1]) - math.exp(grid.horizon))


def convergence_study(
    experiment: str,
    steps: Sequence[int],
    hurst: float,
    horizon: float = 1.0,
    seed: int = 0,
    beta: Optional[float] = None,
) -> ConvergenceTable:
    """Errors on a doubling sequence of grids and the least-squares order.

    The fBm path is sampled once on the finest grid and coarsened, so every
    level sees the same realisation.
    """
    if experiment not in STUDIES:
        raise DomainError(f"unknown study {experiment!r}; choose from {STUDIES}")
    levels = validate_levels(steps)
    hurst = validate_hurst(hurst)
    beta = validate_beta(default_beta(hurst) if beta is None else beta, hurst)
    finest = TimeGrid(horizon, levels[-1])
    kernel = Kernel(hurst)
    B = None if experiment == "picard-ode" else sample_fbm(FbmConfig(hurst, finest, seed=seed))

    table = ConvergenceTable(experiment=experiment)
    for n in levels:
        grid = TimeGrid(horizon, n)
        if experiment == "picard-ode":
            error = _picard_ode_error(grid)
        else:
            path = B.coarsen(levels[-1] // n)
            error = _young_error(path, beta) if experiment == "young-methods" else _linear_oracle_error(path, kernel)
        table.rows.append(ConvergenceRow(n_steps=n, dt=grid.dt, error=float(error)))
        logger.info(f"{experiment}: N={n} 误差={error:.3e}")
    table.order = fit_order([r.dt for r in table.rows], [r.error for r in table.rows])
    logger.info(f"{experiment}: 在 {len(levels)} 个网格层上拟合的收敛阶为 {table.order:.3f}")
    return table
