"""Fractional Brownian motion: covariance, exact sampling and truncation."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.linalg import lapack

from .config import CIRCULANT_THRESHOLD, validate_hurst
from .errors import DomainError, FactorizationError
from .time_grid import BetaLike, SampledPath, TimeGrid, _beta_value, running_holder_norm

logger = logging.getLogger(__name__)

METHODS = ("cholesky", "circulant")
EIGENVALUE_RTOL = 1e-10


def covariance(hurst: float, t, s):
    """E[B(t) B(s)] = (t^2H + s^2H - |t - s|^2H) / 2."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t < 0) or np.any(s < 0):
        raise DomainError("covariance is defined for nonnegative times only")
    two_h = 2 * hurst
    result = 0.5 * (t**two_h + s**two_h - np.abs(t - s) ** two_h)
    return float(result) if result.ndim == 0 else result


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based stream: seed ``k`` and seed ``k + 1`` never overlap."""
    if seed < 0 or seed >= 2**64:
        raise DomainError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class FbmConfig:
    hurst: float
    grid: TimeGrid
    seed: int = 0
    method: str = "cholesky"

    def __post_init__(self):
        validate_hurst(self.hurst)
        if self.method not in METHODS:
            raise DomainError(f"unknown sampling method {self.method!r}; choose from {METHODS}")
        if self.method == "cholesky" and self.grid.n_steps > CIRCULANT_THRESHOLD:
            logger.info(
                f"{self.grid.n_steps} 步的 cholesky 为 O(N^3)，method='circulant' 更快"
            )


class _FactorCache:
    """Cholesky factors keyed by (hurst, n_steps, horizon), shared across threads."""

    def __init__(self):
        self._factors: Dict[Tuple[float, int, float], np.ndarray] = {}
        self._lock = threading.Lock()

    def get(self, hurst: float, grid: TimeGrid) -> np.ndarray:
        key = (float(hurst), grid.n_steps, grid.horizon)
        factor = self._factors.get(key)
        if factor is not None:
            return factor
        with self._lock:
            factor = self._factors.get(key)
            if factor is None:
                factor = _cholesky_factor(hurst, grid)
                self._factors[key] = factor
        return factor

    def clear(self):
        with self._lock:
            self._factors.clear()


_FACTORS = _FactorCache()


def _cholesky_factor(hurst: float, grid: TimeGrid) -> np.ndarray:
    t = grid.nodes[1:]
    cov = covariance(hurst, t[:, None], t[None, :])
    factor, info = lapack.dpotrf(cov, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(int(info), "covariance matrix is not numerically positive definite")
    if info < 0:
        raise FactorizationError(int(-info), "invalid argument passed to dpotrf")
    logger.info(f"已分解 {grid.n_steps}x{grid.n_steps} 的 fBm 协方差矩阵 (H={hurst})")
    factor = np.tril(factor)
    factor.setflags(write=False)
    return factor


def _circulant_eigenvalues(hurst: float, grid: TimeGrid) -> np.ndarray:
    n = grid.n_steps
    two_h = 2 * hurst
    k = np.arange(n + 1, dtype=float)
    gamma = 0.5 * grid.dt**two_h * (np.abs(k + 1) ** two_h - 2 * k**two_h + np.abs(k - 1) ** two_h)
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    eigenvalues = np.fft.fft(row).real
    lowest = int(np.argmin(eigenvalues))
    if eigenvalues[lowest] < -EIGENVALUE_RTOL * eigenvalues.max():
        raise FactorizationError(lowest, f"circulant embedding has eigenvalue {eigenvalues[lowest]:.3g}")
    return np.clip(eigenvalues, 0.0, None)


def _increments_circulant(hurst: float, grid: TimeGrid, rng: np.random.Generator) -> np.ndarray:
    eigenvalues = _circulant_eigenvalues(hurst, grid)
    m = eigenvalues.size
    noise = rng.standard_normal((2, m))
    spectrum = np.sqrt(eigenvalues / m) * (noise[0] + 1j * noise[1])
    return np.fft.fft(spectrum).real[: grid.n_steps]


def sample_fbm(config: FbmConfig) -> SampledPath:
    """One fBm path with B(0) = 0, reproducible from ``config.seed``."""
    rng = make_rng(config.seed)
    if config.method == "cholesky":
        factor = _FACTORS.get(config.hurst, config.grid)
        values = factor @ rng.standard_normal(config.grid.n_steps)
    else:
        values = np.cumsum(_increments_circulant(config.hurst, config.grid, rng))
    return SampledPath(config.grid, np.concatenate([[0.0], values]))


def sample_fbm_batch(config: FbmConfig, n_paths: int, base_seed: int) -> np.ndarray:
    """Rows are the paths for seeds ``base_seed + i``.

    Row i matches ``sample_fbm`` at seed ``base_seed + i`` up to rounding in the matrix product.
    """
    if n_paths < 1:
        raise DomainError(f"n_paths must be positive, got {n_paths}")
    n = config.grid.n_steps
    out = np.zeros((n_paths, n + 1))
    if config.method == "cholesky":
        factor = _FACTORS.get(config.hurst, config.grid)
        noise = np.stack([make_rng(base_seed + i).standard_normal(n) for i in range(n_paths)])
        out[:, 1:] = noise @ factor.T
    else:
        for i in range(n_paths):
            out[i, 1:] = np.cumsum(_increments_circulant(config.hurst, config.grid, make_rng(base_seed + i)))
    return out


@dataclass(frozen=True)
class TruncationLevel:
    """Level R for the stopping time tau_R; R = 0 stops at the first nonzero node."""

    R: float
    beta: BetaLike

    def __post_init__(self):
        if not np.isfinite(self.R) or self.R < 0:
            raise DomainError(f"truncation level must be a nonnegative number, got {self.R}")
        _beta_value(self.beta)


def truncate(path: SampledPath, level: TruncationLevel) -> Tuple[SampledPath, float]:
    """Stop the path where |B| or ||B||_{0,t,beta} first exceeds R.

    tau_R is the first node with either level crossed and the path is frozen at
    B(tau_R) afterwards, so it overshoots R by at most one increment.
    tau_R = T when neither level is crossed.
    """
    x = path.values
    running = running_holder_norm(x, path.grid.dt, _beta_value(level.beta))
    crossed = (np.abs(x) > level.R) | (running > level.R)
    hits = np.flatnonzero(crossed)
    if hits.size == 0:
        return path, path.grid.horizon
    stop = int(hits[0])
    values = x.copy()
    values[stop:] = x[stop]
    return SampledPath(path.grid, values), path.grid.node(stop)

