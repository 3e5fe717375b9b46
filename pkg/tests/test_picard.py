"""
Tests for the fixed-point engine
"""
import math
import os
import sys

import numpy as np
import pytest
from scipy.integrate import cumulative_trapezoid

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from fracsde.errors import ContractionFailure, DomainError, ResolutionError
from fracsde.picard import (
    ContractionProblem,
    check_progressive,
    constant_h,
    growth_bound,
    solve_fixed_point,
)
from fracsde.time_grid import TimeGrid, holder_seminorm


def _linear_ode(c, rate, beta=0.6, **extra):
    """F(x)(t) = c + int_0^t rate x(s) ds, fixed point c e^(rate t)."""

    def apply_F(grid, x):
        return c + cumulative_trapezoid(rate * x, dx=grid.dt, initial=0.0)

    return ContractionProblem(
        apply_F=apply_F, F0=c, kappa=rate, gamma=1.0, beta=beta, Delta=1.0,
        h_bound=constant_h(rate), **extra,
    )


def test_exponential_fixed_point():
    grid = TimeGrid(1.0, 4096)
    report = solve_fixed_point(_linear_ode(1.0, 1.0), grid)
    assert report.solution[-1] == pytest.approx(math.e, abs=1e-5)
    assert report.residual < 1e-9
    assert report.sub_intervals[0] == pytest.approx((0.0, 0.5))
    assert len(report.sub_intervals) == 2


def test_constant_map_converges_immediately():
    grid = TimeGrid(1.0, 64)
    problem = ContractionProblem(
        apply_F=lambda g, x: np.full_like(x, 2.5), F0=2.5, kappa=1.0, gamma=1.0,
        beta=0.6, Delta=1.0, h_bound=constant_h(0.0),
    )
    report = solve_fixed_point(problem, grid)
    np.testing.assert_array_equal(report.solution, np.full(65, 2.5))
    assert report.iterations_per_interval[0] == 1


def test_fast_rate_needs_several_sub_intervals():
    grid = TimeGrid(1.0, 1024)
    report = solve_fixed_point(_linear_ode(0.5, 5.0), grid)
    assert len(report.sub_intervals) >= 10
    assert all(tau > 0 for _, tau in report.sub_intervals)
    starts = [start for start, _ in report.sub_intervals]
    assert starts == sorted(starts)
    assert report.solution[-1] == pytest.approx(0.5 * math.exp(5.0), rel=1e-4)


def test_solution_respects_growth_bound():
    grid = TimeGrid(1.0, 512)
    problem = _linear_ode(1.0, 1.0)
    report = solve_fixed_point(problem, grid)
    sup_bound, holder_bound, tau0 = growth_bound(problem, 1.0)
    assert np.max(np.abs(report.solution)) <= sup_bound
    window = int(tau0 / grid.dt)
    assert holder_seminorm(report.solution, grid.dt, 0.6, max_lag=window) <= holder_bound


def test_growth_bound_values():
    flat = ContractionProblem(lambda g, x: x, 0.0, 1.0, 1.0, 0.6, 1.0, constant_h(1.0))
    sup_bound, _, tau0 = growth_bound(flat, 1.0)
    assert tau0 == pytest.approx(0.5)
    assert sup_bound == pytest.approx(16.0)
    # kappa -> 0 with Delta beyond the horizon leaves a single step
    tiny = ContractionProblem(lambda g, x: x, 1.5, 1e-12, 1.0, 0.6, 2.0, constant_h(0.0))
    sup_bound, _, tau0 = growth_bound(tiny, 1.0)
    assert tau0 == pytest.approx(2.0)
    assert sup_bound == pytest.approx(4 + 2 * 1.5)


def test_growth_bound_exponent_grows_with_horizon():
    problem = ContractionProblem(lambda g, x: x, 0.0, 1.0, 1.0, 0.6, 1.0, constant_h(1.0))
    short, _, _ = growth_bound(problem, 1.0)
    long, _, _ = growth_bound(problem, 2.0)
    assert math.log(long) - math.log(short) == pytest.approx(2 * math.log(2.0))


def test_uniqueness_from_different_starts():
    grid = TimeGrid(1.0, 256)
    problem = _linear_ode(1.0, 2.0)
    tol = 1e-10
    first = solve_fixed_point(problem, grid, tol=tol)
    shifted = np.full(257, 2.0)
    second = solve_fixed_point(problem, grid, tol=tol, initial=shifted)
    assert np.max(np.abs(first.solution - second.solution)) < 2 * tol


def test_linear_mapping_is_progressive():
    grid = TimeGrid(1.0, 64)
    problem = _linear_ode(1.0, 3.0)
    assert check_progressive(problem, grid, np.linspace(0, 1, 65)) == 0.0


def test_progressive_check_on_a_single_cell():
    grid = TimeGrid(1.0, 1)
    problem = _linear_ode(1.0, 3.0)
    assert check_progressive(problem, grid, np.array([1.0, 2.0])) == 0.0

    def peeking(grid, x):
        return np.full_like(x, x[-1])

    future = ContractionProblem(
        apply_F=peeking, F0=0.0, kappa=1.0, gamma=1.0, beta=0.6, Delta=1.0, h_bound=constant_h(1.0),
    )
    assert check_progressive(future, grid, np.array([1.0, 2.0])) > 0.0


def test_understated_kappa_with_long_window_fails():
    grid = TimeGrid(1.0, 256)
    # the true Lipschitz rate is 40; kappa = 0.1 and Delta = 1 let tau cover [0, 1] at once
    problem = ContractionProblem(
        apply_F=lambda g, x: 1.0 + cumulative_trapezoid(40.0 * x, dx=g.dt, initial=0.0), F0=1.0,
        kappa=0.1, gamma=1.0, beta=0.6, Delta=1.0, h_bound=constant_h(0.1),
    )
    with pytest.raises(ContractionFailure) as excinfo:
        solve_fixed_point(problem, grid)
    assert excinfo.value.interval == (0.0, 1.0)
    assert len(excinfo.value.ratios) >= 3
    assert all(r > 1.0 for r in excinfo.value.ratios[-3:])


def test_non_contracting_map_fails():
    grid = TimeGrid(1.0, 64)
    # doubles the distance to the fixed point 0 on every pass
    problem = ContractionProblem(
        apply_F=lambda g, x: np.concatenate([[0.0], 2.0 * x[1:] + 1e-3]), F0=0.0, kappa=1.0,
        gamma=1.0, beta=0.6, Delta=1.0, h_bound=constant_h(1.0),
    )
    with pytest.raises(ContractionFailure) as excinfo:
        solve_fixed_point(problem, grid)
    assert excinfo.value.interval[0] == 0.0


def test_iteration_cap_reported():
    grid = TimeGrid(1.0, 4096)
    with pytest.raises(ContractionFailure):
        solve_fixed_point(_linear_ode(1.0, 1.0), grid, max_iter=2)


def test_step_below_grid_spacing_is_a_resolution_error():
    grid = TimeGrid(1.0, 8)
    with pytest.raises(ResolutionError) as excinfo:
        solve_fixed_point(_linear_ode(1.0, 100.0), grid)
    assert excinfo.value.dt == pytest.approx(0.125)


def test_path_dependent_kappa_callback_is_used():
    grid = TimeGrid(1.0, 256)
    calls = []

    def kappa_fn(a, b):
        calls.append((a, b))
        return 1.0

    report = solve_fixed_point(_linear_ode(1.0, 1.0, kappa_fn=kappa_fn), grid)
    assert calls[0] == (0.0, 1.0)
    assert len(calls) == len(report.sub_intervals)


def test_problem_validation():
    with pytest.raises(DomainError):
        ContractionProblem(lambda g, x: x, 0.0, -1.0, 1.0, 0.6, 1.0, constant_h(1.0))
    with pytest.raises(DomainError):
        ContractionProblem(lambda g, x: x, 0.0, 1.0, 1.5, 0.6, 1.0, constant_h(1.0))
    with pytest.raises(DomainError):
        ContractionProblem(lambda g, x: x, [0.0, 1.0], 1.0, 1.0, 0.6, 1.0, constant_h(1.0))


def test_vector_states():
    grid = TimeGrid(1.0, 512)

    def apply_F(g, x):
        # x' = (x2, -x1): rotation started at (1, 0)
        drift = np.stack([x[:, 1], -x[:, 0]], axis=1)
        return np.array([1.0, 0.0]) + cumulative_trapezoid(drift, dx=g.dt, axis=0, initial=0.0)

    problem = ContractionProblem(apply_F, [1.0, 0.0], 1.0, 1.0, 0.6, 1.0, constant_h(1.0), state_dim=2)
    report = solve_fixed_point(problem, grid)
    np.testing.assert_allclose(report.solution[-1], [math.cos(1.0), -math.sin(1.0)], atol=1e-5)
