#!/usr/bin/env python
"""
Library use: sample a path, integrate against it and solve an equation on it.
"""
import os
import sys

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from fracsde.char_system import CoefficientSet, compose_solution
from fracsde.config import default_beta
from fracsde.fbm import FbmConfig, sample_fbm
from fracsde.integrators import IntegrandSpec, MalliavinKernel, ito_integral, young_riemann
from fracsde.linear_quasi import CoefficientSpec, solve_linear_explicit
from fracsde.time_grid import Kernel, SampledPath, TimeGrid


def example_integrals(B: SampledPath, kernel: Kernel):
    """Pathwise and Itô-type integral of B against itself."""
    f = IntegrandSpec(B, MalliavinKernel.indicator(SampledPath.constant(B.grid, 1.0)))
    pathwise = young_riemann(f, B, 0.0, B.grid.horizon)
    ito_left = ito_integral(f, B, 0.0, B.grid.horizon, kernel)
    ito_mid = ito_integral(f, B, 0.0, B.grid.horizon, kernel, "mid")
    exact = 0.5 * B.values[-1] ** 2 - 0.5 * B.grid.horizon ** (2 * kernel.hurst)
    print(f"pathwise: {pathwise:.6f}  (B_T^2/2 = {0.5 * B.values[-1] ** 2:.6f})")
    print(f"itô:      {ito_left:.6f} left, {ito_mid:.6f} mid  (B_T^2/2 - T^2H/2 = {exact:.6f})")


def example_linear(B: SampledPath, kernel: Kernel):
    """Geometric fBm from the explicit solution."""
    zero, one = CoefficientSpec.constant(0.0), CoefficientSpec.constant(1.0)
    x = solve_linear_explicit(zero, zero, one, zero, 1.0, B, kernel)
    print(f"geometric fBm at T: {x.values[-1]:.6f}")


def example_nonlinear(B: SampledPath, kernel: Kernel):
    """Sine coefficients through the characteristic system; stops at the invertibility horizon."""
    result = compose_solution(CoefficientSet.sine(1.0), 0.5, B, [0.25, 0.5, 1.0], kernel, default_beta(kernel.hurst))
    for t, value in zip(result.times, result.values):
        print(f"x({t}) = {value:.6f}")
    if result.flagged:
        print(f"stopped at t={result.horizon}: {result.error}")


def main():
    kernel = Kernel(0.75)
    B = sample_fbm(FbmConfig(kernel.hurst, TimeGrid(1.0, 512), seed=42))
    print("=" * 50)
    example_integrals(B, kernel)
    print("=" * 50)
    example_linear(B, kernel)
    print("=" * 50)
    example_nonlinear(B, kernel)


if __name__ == "__main__":
    main()
