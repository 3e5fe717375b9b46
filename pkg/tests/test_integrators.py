"""
Tests for the pathwise and Itô integrals and the Itô formula checks
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from fracsde.errors import DomainError
from fracsde.fbm import FbmConfig, sample_fbm, sample_fbm_batch
from fracsde.integrators import (
    IntegrandSpec,
    MalliavinKernel,
    ScalarFunction,
    admissible_alpha,
    check_ito_ito_formula,
    check_pathwise_ito_formula,
    cumulative_ito,
    cumulative_riemann,
    dphi_diagonal,
    ito_integral,
    young_fractional,
    young_riemann,
)
from fracsde.time_grid import Kernel, SampledPath, TimeGrid

HURST = 0.75
KERNEL = Kernel(HURST)


def _fbm(n, seed=9, horizon=1.0):
    return sample_fbm(FbmConfig(HURST, TimeGrid(horizon, n), seed=seed))


def _ones(grid):
    return SampledPath.constant(grid, 1.0)


def test_riemann_of_constant_telescopes():
    B = _fbm(64)
    f = IntegrandSpec.deterministic(_ones(B.grid))
    for point in ("left", "mid", "right"):
        assert young_riemann(f, B, 0.25, 1.0, point) == pytest.approx(B.at(1.0) - B.at(0.25))


def test_midpoint_riemann_of_path_against_itself():
    B = _fbm(256)
    f = IntegrandSpec(B, holder_beta=0.7)
    expected = 0.5 * (B.at(1.0) ** 2 - B.at(0.5) ** 2)
    assert young_riemann(f, B, 0.5, 1.0) == pytest.approx(expected, rel=1e-12, abs=1e-14)


def test_left_and_mid_sums_approach_each_other():
    fine = _fbm(4096, seed=21)
    gaps = []
    for factor in (16, 1):
        B = fine.coarsen(factor)
        f = IntegrandSpec(B, holder_beta=0.7)
        gaps.append(abs(young_riemann(f, B, 0.0, 1.0, "left") - young_riemann(f, B, 0.0, 1.0, "mid")))
    assert gaps[1] < gaps[0]


def test_unknown_eval_point_rejected():
    B = _fbm(8)
    with pytest.raises(DomainError):
        young_riemann(IntegrandSpec(B), B, 0.0, 1.0, "centre")


def test_reversed_interval_rejected():
    B = _fbm(8)
    with pytest.raises(DomainError):
        young_riemann(IntegrandSpec(B), B, 0.5, 0.5)


def test_cumulative_riemann_ends_at_full_integral():
    B = _fbm(32)
    f = IntegrandSpec(B, holder_beta=0.7)
    running = cumulative_riemann(f, B)
    assert running.values[0] == 0.0
    assert running.values[-1] == pytest.approx(young_riemann(f, B, 0.0, 1.0))


def test_admissible_alpha_window():
    assert admissible_alpha(0.7, 0.7) == pytest.approx(0.5)
    assert admissible_alpha(0.98, 0.98) == pytest.approx(0.5)
    assert admissible_alpha(0.6, 0.95) == pytest.approx(0.325)
    with pytest.raises(DomainError):
        admissible_alpha(0.3, 0.6)
    with pytest.raises(DomainError):
        admissible_alpha(0.7, 0.7, alpha=0.8)


def test_fractional_of_constant_is_increment():
    B = _fbm(64)
    f = IntegrandSpec.deterministic(_ones(B.grid))
    assert young_fractional(f, B, 0.0, 1.0, g_beta=0.7) == pytest.approx(B.at(1.0) - B.at(0.0))


def test_fractional_riemann_stieltjes_value():
    grid = TimeGrid(1.0, 128)
    t = SampledPath.from_function(grid, lambda s: s)
    assert young_fractional(IntegrandSpec(t), t, 0.0, 1.0) == pytest.approx(0.5, abs=1e-3)


@pytest.mark.parametrize("seed", range(20))
def test_fractional_agrees_with_riemann_on_fbm(seed):
    finest = _fbm(2048, seed=seed)
    gaps = []
    for factor in (8, 4, 2, 1):
        B = finest.coarsen(factor)
        f = IntegrandSpec(B, holder_beta=0.7)
        riemann = young_riemann(f, B, 0.0, 1.0)
        gaps.append(abs(young_fractional(f, B, 0.0, 1.0) - riemann))
    assert all(fine < coarse for coarse, fine in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-4
    # a value near zero makes the relative gap meaningless
    if abs(riemann) > 1e-2:
        assert gaps[-1] / abs(riemann) < 1e-2


def test_fractional_gap_shrinks_with_finer_quadrature():
    B = _fbm(256, seed=4)
    f = IntegrandSpec(B, holder_beta=0.7)
    riemann = young_riemann(f, B, 0.0, 1.0)
    coarse = abs(young_fractional(f, B, 0.0, 1.0, refine=4) - riemann)
    fine = abs(young_fractional(f, B, 0.0, 1.0, refine=32) - riemann)
    assert fine < coarse / 8


def test_fractional_is_additive_within_tolerance():
    B = _fbm(512, seed=8)
    f = IntegrandSpec(B, holder_beta=0.7)
    whole = young_fractional(f, B, 0.0, 1.0)
    parts = young_fractional(f, B, 0.0, 0.5) + young_fractional(f, B, 0.5, 1.0)
    assert whole == pytest.approx(parts, abs=0.02)


def test_fractional_rejects_alpha_outside_window():
    B = _fbm(16)
    with pytest.raises(DomainError):
        young_fractional(IntegrandSpec(B, holder_beta=0.7), B, 0.0, 1.0, alpha=0.9)


def test_ito_of_deterministic_integrand_equals_pathwise():
    B = _fbm(64)
    f = IntegrandSpec.deterministic(SampledPath.from_function(B.grid, np.cos))
    assert ito_integral(f, B, 0.0, 1.0, KERNEL) == young_riemann(f, B, 0.0, 1.0, "left")


def test_ito_of_path_against_itself():
    B = _fbm(128, horizon=2.0)
    f = IntegrandSpec(B, MalliavinKernel.indicator(_ones(B.grid)), 0.7)
    expected = 0.5 * B.at(2.0) ** 2 - 0.5 * 2.0**1.5
    assert ito_integral(f, B, 0.0, 2.0, KERNEL, "mid") == pytest.approx(expected, abs=1e-12)
    partial = 0.5 * (B.at(1.0) ** 2 - B.at(0.5) ** 2) - 0.5 * (1.0 - 0.5**1.5)
    assert ito_integral(f, B, 0.5, 1.0, KERNEL, "mid") == pytest.approx(partial, abs=1e-12)


def test_ito_defaults_to_left_points():
    B = _fbm(128, horizon=2.0)
    f = IntegrandSpec(B, MalliavinKernel.indicator(_ones(B.grid)), 0.7)
    left = ito_integral(f, B, 0.0, 2.0, KERNEL)
    correction = 0.5 * 2.0**1.5
    assert left == pytest.approx(young_riemann(f, B, 0.0, 2.0, "left") - correction, abs=1e-12)
    quadratic = 0.5 * np.sum(np.diff(B.values) ** 2)
    assert left == pytest.approx(ito_integral(f, B, 0.0, 2.0, KERNEL, "mid") - quadratic, abs=1e-12)


def test_left_and_mid_ito_agree_under_refinement():
    finest = _fbm(2048, seed=21)
    f_of = lambda B: IntegrandSpec(B, MalliavinKernel.indicator(_ones(B.grid)), 0.7)
    gaps = []
    for factor in (16, 4, 1):
        B = finest.coarsen(factor)
        gaps.append(abs(ito_integral(f_of(B), B, 0.0, 1.0, KERNEL) - ito_integral(f_of(B), B, 0.0, 1.0, KERNEL, "mid")))
    assert gaps[2] < gaps[1] < gaps[0]


def test_ito_integral_is_additive():
    B = _fbm(64)
    f = IntegrandSpec(SampledPath(B.grid, np.sin(B.values)),
                      MalliavinKernel.indicator(SampledPath(B.grid, np.cos(B.values))), 0.7)
    whole = ito_integral(f, B, 0.0, 1.0, KERNEL)
    parts = ito_integral(f, B, 0.0, 0.375, KERNEL) + ito_integral(f, B, 0.375, 1.0, KERNEL)
    assert whole == pytest.approx(parts, abs=1e-12)
    running = cumulative_ito(f, B, KERNEL)
    assert running.values[-1] == pytest.approx(whole, abs=1e-12)


def test_ito_without_malliavin_kernel_fails():
    B = _fbm(16)
    with pytest.raises(DomainError):
        ito_integral(IntegrandSpec(B), B, 0.0, 1.0, KERNEL)


def test_ito_of_path_has_zero_mean():
    grid = TimeGrid(1.0, 32)
    paths = sample_fbm_batch(FbmConfig(HURST, grid), 3000, base_seed=500)
    ones = MalliavinKernel.indicator(_ones(grid))
    samples = np.array([
        ito_integral(IntegrandSpec(SampledPath(grid, row), ones, 0.7), SampledPath(grid, row), 0.0, 1.0, KERNEL, "mid")
        for row in paths
    ])
    stderr = samples.std(ddof=1) / np.sqrt(samples.size)
    assert abs(samples.mean()) < 4 * stderr


def test_dphi_diagonal_indicator_kernel():
    grid = TimeGrid(1.0, 16)
    f = IntegrandSpec(_ones(grid), MalliavinKernel.indicator(_ones(grid)))
    np.testing.assert_allclose(dphi_diagonal(f, KERNEL).values, HURST * grid.nodes ** (2 * HURST - 1))


def test_dphi_diagonal_general_kernel_is_exact_for_linear_sections():
    grid = TimeGrid(1.0, 16)
    t = grid.nodes
    constant = IntegrandSpec(_ones(grid), MalliavinKernel.general(lambda s, u: np.ones_like(s * u)))
    np.testing.assert_allclose(dphi_diagonal(constant, KERNEL).values, KERNEL.partial_integral(t, 1.0), rtol=1e-12)
    linear = IntegrandSpec(_ones(grid), MalliavinKernel.general(lambda s, u: s + 0 * u))
    expected = (KERNEL.moment_antiderivative(1.0 - t) - KERNEL.moment_antiderivative(-t)
                + t * KERNEL.partial_integral(t, 1.0))
    np.testing.assert_allclose(dphi_diagonal(linear, KERNEL).values, expected, rtol=1e-10)


def test_malliavin_kernel_validation():
    with pytest.raises(DomainError):
        MalliavinKernel("indicator")
    with pytest.raises(DomainError):
        MalliavinKernel("symbolic")
    kernel = MalliavinKernel.indicator(_ones(TimeGrid(1.0, 4)))
    assert kernel(0.25, 0.5) == 1.0
    assert kernel(0.75, 0.5) == 0.0


IDENTITY = ScalarFunction(value=lambda t, x: x, dx=lambda t, x: np.ones_like(x))
HALF_SQUARE = ScalarFunction(value=lambda t, x: 0.5 * x**2, dx=lambda t, x: x, dxx=lambda t, x: np.ones_like(x))
SQUARE = ScalarFunction(value=lambda t, x: x**2, dx=lambda t, x: 2 * x, dxx=lambda t, x: 2 + 0 * x)
TIME_TIMES_STATE = ScalarFunction(value=lambda t, x: t * x, dx=lambda t, x: t + 0 * x, dt=lambda t, x: x)


def _geometric(hurst):
    def value(t, x):
        return np.exp(x - 0.5 * t ** (2 * hurst))

    return ScalarFunction(
        value=value,
        dx=value,
        dxx=value,
        dt=lambda t, x: -hurst * t ** (2 * hurst - 1) * value(t, x),
    )


def test_pathwise_formula_identity_case():
    B = _fbm(128)
    f = IntegrandSpec(SampledPath(B.grid, np.cos(B.values)), holder_beta=0.7)
    g = SampledPath.from_function(B.grid, np.sin)
    assert check_pathwise_ito_formula(IDENTITY, 0.3, f, g, B) < 1e-12


def test_pathwise_formula_half_square_of_fbm():
    B = _fbm(256)
    zero = SampledPath.constant(B.grid)
    f = IntegrandSpec.deterministic(_ones(B.grid))
    assert check_pathwise_ito_formula(HALF_SQUARE, 0.0, f, zero, B) < 1e-10


def test_pathwise_formula_smooth_deterministic_case():
    grid = TimeGrid(1.0, 512)
    B = _fbm(512)
    f = IntegrandSpec.deterministic(SampledPath.constant(grid))
    assert check_pathwise_ito_formula(TIME_TIMES_STATE, 0.0, f, _ones(grid), B) < 1e-10


def test_ito_formula_square_of_fbm():
    B = _fbm(256)
    f = IntegrandSpec.deterministic(_ones(B.grid))
    eta_dphi = SampledPath(B.grid, HURST * B.grid.nodes ** (2 * HURST - 1))
    zero = SampledPath.constant(B.grid)
    assert check_ito_ito_formula(SQUARE, 0.0, f, zero, B, KERNEL, eta_dphi) < 1e-10


def test_ito_formula_geometric_case_converges():
    fine = _fbm(1024, seed=13)
    residuals = []
    for factor in (16, 1):
        B = fine.coarsen(factor)
        f = IntegrandSpec.deterministic(_ones(B.grid))
        eta_dphi = SampledPath(B.grid, HURST * B.grid.nodes ** (2 * HURST - 1))
        zero = SampledPath.constant(B.grid)
        residuals.append(check_ito_ito_formula(_geometric(HURST), 0.0, f, zero, B, KERNEL, eta_dphi))
    assert residuals[1] < residuals[0]
    assert residuals[1] < 1e-2


def test_ito_formula_needs_eta_derivative():
    B = _fbm(16)
    f = IntegrandSpec.deterministic(_ones(B.grid))
    with pytest.raises(DomainError):
        check_ito_ito_formula(SQUARE, 0.0, f, SampledPath.constant(B.grid), B, KERNEL, None)
