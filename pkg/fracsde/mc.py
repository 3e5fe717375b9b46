"""Monte Carlo harness: seeded fBm batches, compensated reduction, three-sigma verdicts.

Sample i always uses the Philox stream with seed ``base_seed + i``, so a run
is reproducible whatever the batch size or thread count.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional

import numpy as np

from .cache import McCheckpoint
from .config import MC_BATCH_SIZE, thread_count
from .errors import DomainError, McFailure
from .fbm import FbmConfig, sample_fbm_batch
from .integrators import KERNEL_ZERO, IntegrandSpec, MalliavinKernel, ito_integral, young_riemann
from .linear_quasi import CoefficientSpec, solve_linear_explicit
from .time_grid import Kernel, SampledPath, TimeGrid, increment_covariance
from .utils import compute_plan_hash

logger = logging.getLogger(__name__)

MIN_SAMPLES = 100
NONFINITE_LIMIT = 0.01
SIGMA_LEVEL = 3.0
STATISTICS = ("mean", "variance")

BatchEstimator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class McPlan:
    """How many samples, from which seed, and the pass rule.

    ``tolerance`` None means three standard errors; a number is an absolute tolerance.
    """

    n_samples: int
    base_seed: int = 0
    tolerance: Optional[float] = None
    batch_size: int = MC_BATCH_SIZE

    def __post_init__(self):
        if self.n_samples < MIN_SAMPLES:
            raise DomainError(f"n_samples must be at least {MIN_SAMPLES}, got {self.n_samples}")
        if self.base_seed < 0 or self.base_seed + self.n_samples > 2**64:
            raise DomainError(f"seed range starting at {self.base_seed} leaves the 64-bit space")
        if self.tolerance is not None and not self.tolerance > 0:
            raise DomainError(f"tolerance must be positive, got {self.tolerance}")
        if self.batch_size < 1:
            raise DomainError(f"batch_size must be positive, got {self.batch_size}")


@dataclass(frozen=True, eq=False)
class McExperiment:
    """An estimator over batches of fBm paths (rows) and its expected value.

    ``digest`` identifies the data the estimator closes over (an integrand,
    say) and is part of the checkpoint key.
    """

    name: str
    fbm: FbmConfig
    estimator: BatchEstimator
    target: float
    statistic: str = "mean"
    digest: str = ""

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise DomainError(f"statistic must be one of {STATISTICS}, got {self.statistic!r}")

    def identity(self) -> Dict[str, Any]:
        return {
            "experiment": self.name,
            "statistic": self.statistic,
            "target": self.target,
            "digest": self.digest,
            "hurst": self.fbm.hurst,
            "grid": [self.fbm.grid.horizon, self.fbm.grid.n_steps],
            "method": self.fbm.method,
        }


@dataclass
class McResult:
    experiment: str
    statistic: str
    estimate: float
    stderr: float
    target: float
    passed: bool
    n_used: int
    n_nonfinite: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "experiment": self.experiment,
            "statistic": self.statistic,
            "mean": self.estimate,
            "stderr": self.stderr,
            "target": self.target,
            "pass": self.passed,
            "samples": self.n_used,
            "nonfinite": self.n_nonfinite,
        }


def _batches(plan: McPlan) -> List[range]:
    return [
        range(start, min(start + plan.batch_size, plan.n_samples))
        for start in range(0, plan.n_samples, plan.batch_size)
    ]


def _run_batch(experiment: McExperiment, plan: McPlan, indices: range) -> List[float]:
    paths = sample_fbm_batch(experiment.fbm, len(indices), plan.base_seed + indices.start)
    values = np.asarray(experiment.estimator(paths), dtype=float)
    if values.shape != (len(indices),):
        raise DomainError(f"estimator returned shape {values.shape} for a batch of {len(indices)}")
    return values.tolist()


def _summarize(statistic: str, samples: np.ndarray):
    n = samples.size
    mean = math.fsum(samples) / n
    centered = samples - mean
    var = math.fsum(centered**2) / (n - 1)
    if statistic == "mean":
        return mean, math.sqrt(var / n)
    # stderr of the sample variance from the fourth central moment
    m4 = math.fsum(centered**4) / n
    return var, math.sqrt(max(m4 - var**2, 0.0) / n)


def run_mc(
    plan: McPlan,
    experiment: McExperiment,
    checkpoint_path: Optional[str] = None,
    max_workers: Optional[int] = None,
) -> McResult:
    """Estimate ``experiment.statistic`` over ``plan.n_samples`` seeded paths.

    Batches run on a thread pool. With ``checkpoint_path`` finished batches are
    stored as they complete and reused by a rerun of the same plan; the file is
    removed after a clean finish. Non-finite samples are dropped with a
    warning; more than 1% of them is a McFailure.
    """
    batches = _batches(plan)
    checkpoint = None
    if checkpoint_path:
        checkpoint = McCheckpoint(checkpoint_path)
        checkpoint.initialize(
            {
                "plan_hash": compute_plan_hash({**experiment.identity(), "base_seed": plan.base_seed}),
                "n_samples": plan.n_samples,
                "batch_size": plan.batch_size,
            }
        )

    results: List[Optional[List[float]]] = [None] * len(batches)
    pending = []
    for b, indices in enumerate(batches):
        cached = checkpoint.completed(b) if checkpoint else None
        if cached is not None and len(cached) == len(indices):
            results[b] = cached
        else:
            pending.append(b)
    if checkpoint and len(pending) < len(batches):
        logger.info(f"继续 {experiment.name}: 已缓存 {len(batches) - len(pending)}/{len(batches)} 批")

    workers = min(max_workers or thread_count(), max(len(pending), 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for b, values in zip(pending, pool.map(lambda b: _run_batch(experiment, plan, batches[b]), pending)):
            results[b] = values
            if checkpoint:
                checkpoint.record_batch(b, values)
            logger.debug(f"{experiment.name}: 第 {b + 1}/{len(batches)} 批完成")

    samples = np.array([v for values in results for v in values], dtype=float)
    finite = np.isfinite(samples)
    n_nonfinite = int((~finite).sum())
    if n_nonfinite > NONFINITE_LIMIT * samples.size:
        raise McFailure(n_nonfinite, int(samples.size))
    if n_nonfinite:
        logger.warning(f"{experiment.name}: 丢弃 {n_nonfinite} 个非有限样本")
    used = samples[finite]

    estimate, stderr = _summarize(experiment.statistic, used)
    allowed = SIGMA_LEVEL * stderr if plan.tolerance is None else plan.tolerance
    passed = abs(estimate - experiment.target) <= allowed
    if checkpoint:
        checkpoint.clear()
    logger.info(
        f"{experiment.name}: {experiment.statistic}={estimate:.6g} ± {stderr:.3g} "
        f"(目标 {experiment.target:.6g}, {'通过' if passed else '失败'})"
    )
    return McResult(
        experiment=experiment.name,
        statistic=experiment.statistic,
        estimate=float(estimate),
        stderr=float(stderr),
        target=float(experiment.target),
        passed=bool(passed),
        n_used=int(used.size),
        n_nonfinite=n_nonfinite,
    )


def isometry_target(f: SampledPath, kernel: Kernel) -> float:
    """int int phi(u, v) f(u) f(v) du dv with cell-averaged f and exact cell-pair masses."""
    mids = 0.5 * (f.values[:-1] + f.values[1:])
    return float(mids @ increment_covariance(kernel, f.grid) @ mids)


def variance_check(
    plan: McPlan,
    f: IntegrandSpec,
    hurst: float,
    method: str = "cholesky",
    checkpoint_path: Optional[str] = None,
) -> McResult:
    """Sample variance of int f dB for deterministic f against the isometry value."""
    if f.malliavin is not None and f.malliavin.kind != KERNEL_ZERO:
        raise DomainError("variance_check needs a deterministic integrand")
    grid = f.grid
    mids = 0.5 * (f.values.values[:-1] + f.values.values[1:])
    experiment = McExperiment(
        name="isometry-deterministic",
        fbm=FbmConfig(hurst, grid, method=method),
        estimator=lambda paths: np.diff(paths, axis=1) @ mids,
        target=isometry_target(f.values, Kernel(hurst)),
        statistic="variance",
        digest=hashlib.sha256(np.ascontiguousarray(f.values.values, dtype=float).tobytes()).hexdigest(),
    )
    return run_mc(plan, experiment, checkpoint_path=checkpoint_path)


def _per_path(grid: TimeGrid, fn: Callable[[SampledPath], float]) -> BatchEstimator:
    return lambda paths: np.array([fn(SampledPath(grid, row)) for row in paths])


def make_experiment(name: str, hurst: float, grid: TimeGrid, method: str = "cholesky") -> McExperiment:
    """Build one of the named experiments in :data:`EXPERIMENTS`.

    The zero-mean-ito family integrates B, B^2 and sin B against themselves
    with mid-point sums; their expectations vanish up to a bias of order
    dt^(2H) for sin B.
    """
    kernel = Kernel(hurst)
    T = grid.horizon
    variance = T ** (2 * hurst)
    config = FbmConfig(hurst, grid, method=method)

    def ito(transform, derivative) -> Callable[[SampledPath], float]:
        def value(B: SampledPath) -> float:
            f = SampledPath(grid, transform(B.values))
            factor = MalliavinKernel.indicator(SampledPath(grid, derivative(B.values)))
            return ito_integral(IntegrandSpec(f, factor), B, 0.0, T, kernel, "mid")

        return value

    def geometric(B: SampledPath) -> float:
        zero, one = CoefficientSpec.constant(0.0), CoefficientSpec.constant(1.0)
        return float(solve_linear_explicit(zero, zero, one, zero, 1.0, B, kernel).values[-1])

    registry = {
        "terminal-mean": (lambda paths: paths[:, -1], 0.0, "mean"),
        "zero-mean-ito": (_per_path(grid, ito(lambda b: b, np.ones_like)), 0.0, "mean"),
        "zero-mean-ito-square": (_per_path(grid, ito(np.square, lambda b: 2 * b)), 0.0, "mean"),
        "zero-mean-ito-sine": (_per_path(grid, ito(np.sin, np.cos)), 0.0, "mean"),
        "pathwise-mean": (_per_path(grid, lambda B: young_riemann(IntegrandSpec(B), B, 0.0, T)), 0.5 * variance, "mean"),
        "isometry": (lambda paths: paths[:, -1], variance, "variance"),
        "lognormal-mean": (lambda paths: np.exp(paths[:, -1] - 0.5 * variance), 1.0, "mean"),
        "geometric-explicit": (_per_path(grid, geometric), 1.0, "mean"),
    }
    if name not in registry:
        raise DomainError(f"unknown experiment {name!r}; choose from {sorted(registry)}")
    estimator, target, statistic = registry[name]
    return McExperiment(
        name=name, fbm=config, estimator=estimator, target=target, statistic=statistic,
        digest=f"{name}:{statistic}:{target!r}",
    )


EXPERIMENTS = (
    "terminal-mean",
    "zero-mean-ito",
    "zero-mean-ito-square",
    "zero-mean-ito-sine",
    "pathwise-mean",
    "isometry",
    "lognormal-mean",
    "geometric-explicit",
)
