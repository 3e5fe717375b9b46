from __future__ import annotations

import hashlib
import json
import logging
from typing import Any, Sequence, Tuple

import numpy as np

from .errors import DomainError

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)


def configure_logging(level: str = "INFO") -> None:
    """配置命令行使用的根日志处理器"""
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise DomainError(f"unknown log level {level!r}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)


def compute_plan_hash(payload: Any) -> str:
    """sha256 of a JSON-serialisable payload, used to key checkpoints."""
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def fit_order(dts: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log(error) against log(dt).

    Zero errors are clipped to the smallest positive double so the fit stays finite.
    """
    dts = np.asarray(dts, dtype=float)
    errors = np.maximum(np.abs(np.asarray(errors, dtype=float)), np.finfo(float).tiny)
    if dts.size < 2:
        raise DomainError("need at least two refinement levels to fit an order")
    slope, _ = np.polyfit(np.log(dts), np.log(errors), 1)
    return float(slope)


def parse_float_list(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError as e:
        raise DomainError(f"expected a comma-separated list of numbers, got {text!r}") from e
