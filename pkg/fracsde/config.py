from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .errors import DomainError, PathFileError
from .utils import is_power_of_two

logger = logging.getLogger(__name__)

# Environment
THREADS_ENV = "FRACSDE_THREADS"
DEFAULT_LOG_LEVEL = os.getenv("FRACSDE_LOG_LEVEL", "INFO")

# Run defaults
DEFAULT_HURST = 0.75
DEFAULT_HORIZON = 1.0
DEFAULT_STEPS = 512
DEFAULT_SEED = 42
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200
DEFAULT_INVERSE_TOL = 1e-8
DEFAULT_INVERSE_MAX_ITER = 50
DEFAULT_ODE_TOL = 1e-9
CIRCULANT_THRESHOLD = 4096  # cholesky above this size is slow; circulant is offered instead
MC_BATCH_SIZE = 256


def thread_count() -> int:
    """并行线程数上限，每次调用时从 ``FRACSDE_THREADS`` 读取"""
    raw = os.getenv(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            logger.warning(f"忽略非整数的 {THREADS_ENV}={raw!r}")
        else:
            if value >= 1:
                return value
            logger.warning(f"忽略 {THREADS_ENV}={value}：至少为 1")
    return os.cpu_count() or 1


def default_beta(hurst: float) -> float:
    """Midpoint of the admissible Hölder window (1/2, H)."""
    return 0.5 * (0.5 + hurst)


def validate_hurst(hurst: float) -> float:
    hurst = float(hurst)
    if not 0.5 < hurst < 1.0:
        raise DomainError(f"hurst must lie strictly inside (0.5, 1), got {hurst}")
    return hurst


def validate_beta(beta: float, hurst: float) -> float:
    beta = float(beta)
    if not 0.5 < beta < hurst:
        raise DomainError(f"beta must lie strictly inside (0.5, hurst={hurst}), got {beta}")
    return beta


@dataclass
class RunConfig:
    """所有子命令共用的配置项，以及各子命令自己的参数"""

    hurst: float = DEFAULT_HURST
    horizon: float = DEFAULT_HORIZON
    steps: int = DEFAULT_STEPS
    seed: int = DEFAULT_SEED
    beta: Optional[float] = None
    out: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.hurst = validate_hurst(self.hurst)
        if self.horizon <= 0:
            raise DomainError(f"horizon must be positive, got {self.horizon}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise DomainError(f"steps must be a positive integer, got {self.steps}")
        self.steps = int(self.steps)
        if self.seed < 0 or self.seed >= 2**64:
            raise DomainError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.beta is None:
            self.beta = default_beta(self.hurst)
        self.beta = validate_beta(self.beta, self.hurst)
        if not is_power_of_two(self.steps):
            logger.warning(f"steps={self.steps} 不是 2 的幂，网格加密实验按倍增进行")


COMMON_KEYS = ("hurst", "horizon", "steps", "seed", "beta", "out")


def read_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise PathFileError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise PathFileError(f"config file {path} must hold a JSON object")
    return data


def load_run_config(flags: Dict[str, Any], config_path: Optional[str] = None) -> RunConfig:
    """合并 JSON 配置文件与命令行参数，命令行优先。

    值为 ``None`` 的参数依次回退到配置文件和模块默认值；
    公共配置以外的键放入 ``RunConfig.params``。
    """
    file_values: Dict[str, Any] = read_config_file(config_path) if config_path else {}
    merged: Dict[str, Any] = dict(file_values)
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    common = {key: merged.pop(key) for key in COMMON_KEYS if merged.get(key) is not None}
    return RunConfig(**common, params=merged)
