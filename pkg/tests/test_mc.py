"""
Tests for the Monte Carlo harness
"""
import os
import sys
from unittest import mock

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from fracsde import mc
from fracsde.errors import DomainError, McFailure
from fracsde.fbm import FbmConfig
from fracsde.integrators import IntegrandSpec, MalliavinKernel
from fracsde.mc import McExperiment, McPlan, isometry_target, make_experiment, run_mc, variance_check
from fracsde.time_grid import Kernel, SampledPath, TimeGrid

HURST = 0.75
GRID = TimeGrid(1.0, 32)


@pytest.mark.parametrize("name", [
    "terminal-mean", "zero-mean-ito", "zero-mean-ito-square", "zero-mean-ito-sine",
    "pathwise-mean", "isometry", "lognormal-mean",
])
def test_experiments_hit_their_targets(name):
    result = run_mc(McPlan(2000, base_seed=7), make_experiment(name, HURST, GRID))
    assert result.passed
    assert result.n_used == 2000


def test_geometric_explicit_solution_has_unit_mean():
    result = run_mc(McPlan(400, base_seed=3), make_experiment("geometric-explicit", HURST, TimeGrid(1.0, 16)))
    assert result.passed


def test_pathwise_integral_is_not_centred():
    pathwise = make_experiment("pathwise-mean", HURST, GRID)
    wrong = McExperiment("pathwise-vs-zero", pathwise.fbm, pathwise.estimator, target=0.0)
    result = run_mc(McPlan(2000, base_seed=7), wrong)
    assert not result.passed
    assert result.estimate == pytest.approx(0.5, abs=0.1)


def test_runs_are_reproducible():
    experiment = make_experiment("lognormal-mean", HURST, GRID)
    first = run_mc(McPlan(500, base_seed=11), experiment)
    second = run_mc(McPlan(500, base_seed=11), experiment, max_workers=1)
    assert first.to_dict() == second.to_dict()


def test_stderr_scales_with_sample_count():
    experiment = make_experiment("terminal-mean", HURST, GRID)
    small = run_mc(McPlan(400, base_seed=1), experiment)
    large = run_mc(McPlan(1600, base_seed=1), experiment)
    assert large.stderr / small.stderr == pytest.approx(0.5, rel=0.2)


def test_absolute_tolerance():
    experiment = make_experiment("terminal-mean", HURST, GRID)
    assert run_mc(McPlan(200, tolerance=10.0), experiment).passed


def test_nonfinite_samples_are_dropped_up_to_one_percent():
    config = FbmConfig(HURST, GRID)

    def with_nans(k):
        return lambda paths: np.where(np.arange(len(paths)) < k, np.nan, paths[:, -1])

    plan = McPlan(200, batch_size=200)
    result = run_mc(plan, McExperiment("nan", config, with_nans(2), 0.0))
    assert result.n_nonfinite == 2
    assert result.n_used == 198
    with pytest.raises(McFailure):
        run_mc(plan, McExperiment("nan", config, with_nans(3), 0.0))


def test_variance_check_constant_and_zero_integrands():
    ones = IntegrandSpec.deterministic(SampledPath.constant(GRID, 1.0))
    result = variance_check(McPlan(3000, base_seed=5), ones, HURST)
    assert result.target == pytest.approx(1.0, rel=1e-12)
    assert result.passed
    zeros = IntegrandSpec.deterministic(SampledPath.constant(GRID, 0.0))
    result = variance_check(McPlan(200), zeros, HURST)
    assert result.estimate == 0.0
    assert result.passed


def test_isometry_target_for_linear_integrand():
    grid = TimeGrid(1.0, 256)
    f = SampledPath.from_function(grid, lambda t: t)
    assert isometry_target(f, Kernel(HURST)) == pytest.approx(2.0 / 7.0, abs=1e-4)


def test_variance_check_rejects_random_integrands():
    f = IntegrandSpec(SampledPath.constant(GRID, 1.0), MalliavinKernel.indicator(SampledPath.constant(GRID, 1.0)))
    with pytest.raises(DomainError):
        variance_check(McPlan(200), f, HURST)


def test_plan_validation():
    with pytest.raises(DomainError):
        McPlan(99)
    with pytest.raises(DomainError):
        McPlan(200, tolerance=0.0)
    with pytest.raises(DomainError):
        make_experiment("variance-reduction", HURST, GRID)


def test_checkpoint_resumes_and_is_removed(tmp_path):
    checkpoint = str(tmp_path / "run.cache.json")
    experiment = make_experiment("terminal-mean", HURST, GRID)
    plan = McPlan(300, base_seed=2, batch_size=100)
    reference = run_mc(plan, experiment)

    real_batch = mc._run_batch
    calls = []

    def failing(experiment, plan, indices):
        if indices.start == 100:
            raise RuntimeError("interrupted")
        return real_batch(experiment, plan, indices)

    with mock.patch("fracsde.mc._run_batch", side_effect=failing):
        with pytest.raises(RuntimeError):
            run_mc(plan, experiment, checkpoint_path=checkpoint, max_workers=1)
    assert os.path.exists(checkpoint)

    def counting(experiment, plan, indices):
        calls.append(indices.start)
        return real_batch(experiment, plan, indices)

    with mock.patch("fracsde.mc._run_batch", side_effect=counting):
        resumed = run_mc(plan, experiment, checkpoint_path=checkpoint, max_workers=1)
    assert sorted(calls) == [100, 200]
    assert resumed.to_dict() == reference.to_dict()
    assert not os.path.exists(checkpoint)


def test_integrand_experiment_is_not_the_registry_isometry():
    ones = IntegrandSpec.deterministic(SampledPath.constant(GRID, 1.0))
    twos = IntegrandSpec.deterministic(SampledPath.constant(GRID, 2.0))
    registry = make_experiment("isometry", HURST, GRID)
    assert registry.name not in {variance_check(McPlan(200), f, HURST).experiment for f in (ones, twos)}


def test_checkpoint_key_includes_the_integrand(tmp_path):
    checkpoint = str(tmp_path / "run.cache.json")
    plan = McPlan(300, base_seed=4, batch_size=100)
    ones = IntegrandSpec.deterministic(SampledPath.constant(GRID, 1.0))
    twos = IntegrandSpec.deterministic(SampledPath.constant(GRID, 2.0))
    reference = variance_check(plan, twos, HURST)
    assert reference.target == pytest.approx(4.0, rel=1e-12)

    real_batch = mc._run_batch
    calls = []

    def failing(experiment, plan, indices):
        if indices.start == 200:
            raise RuntimeError("interrupted")
        return real_batch(experiment, plan, indices)

    with mock.patch("fracsde.mc._run_batch", side_effect=failing):
        with pytest.raises(RuntimeError):
            variance_check(plan, ones, HURST, checkpoint_path=checkpoint)
    assert os.path.exists(checkpoint)

    def counting(experiment, plan, indices):
        calls.append(indices.start)
        return real_batch(experiment, plan, indices)

    # same name, seed and grid, but another integrand: nothing is reused
    with mock.patch("fracsde.mc._run_batch", side_effect=counting):
        result = variance_check(plan, twos, HURST, checkpoint_path=checkpoint)
    assert sorted(calls) == [0, 100, 200]
    assert result.to_dict() == reference.to_dict()


def test_registry_digest_tracks_target_and_statistic():
    first = make_experiment("isometry", HURST, GRID)
    other = make_experiment("isometry", 0.6, GRID)
    assert first.digest != other.digest
    assert first.identity()["experiment"] == "isometry"
    assert make_experiment("terminal-mean", HURST, GRID).identity() != first.identity()
