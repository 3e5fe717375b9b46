"""路径 CSV（``t,value``）与 JSON 报告的读写，浮点数无损往返"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from typing import Any, Dict, Sequence, Tuple, Union

import numpy as np

from .errors import PathFileError
from .time_grid import NODE_RTOL, FlaggedPath, SampledPath, TimeGrid

logger = logging.getLogger(__name__)

CSV_HEADER = ("t", "value")
FLOAT_FORMAT = "%.17g"


def _format(x: float) -> str:
    if math.isnan(x):
        return "nan"
    return FLOAT_FORMAT % x


def _atomic_write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp_path, path)


def table_csv_text(times: Sequence[float], values: Sequence[float]) -> str:
    """Two-column ``t,value`` table; NaN is written as ``nan``."""
    lines = [",".join(CSV_HEADER)]
    lines.extend(f"{_format(float(t))},{_format(float(v))}" for t, v in zip(times, values))
    return "\n".join(lines) + "\n"


def write_table_csv(path: str, times: Sequence[float], values: Sequence[float]) -> None:
    _atomic_write(path, table_csv_text(times, values))


def write_path_csv(path: str, sampled: Union[SampledPath, FlaggedPath]) -> None:
    if isinstance(sampled, FlaggedPath) and not sampled.all_valid:
        logger.warning(f"{int((~sampled.valid).sum())} 个未定义节点以 nan 写入 {path}")
    write_table_csv(path, sampled.grid.nodes, sampled.values)
    logger.info(f"已写入 {sampled.grid.n_steps + 1} 行: {path}")


def read_table_csv(path: str) -> Tuple[np.ndarray, np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(cell.strip() for cell in rows[0]) != CSV_HEADER:
        raise PathFileError(f"{path}: expected header 't,value'")
    try:
        data = np.array([[float(cell) for cell in row] for row in rows[1:] if row], dtype=float)
    except ValueError as e:
        raise PathFileError(f"{path}: non-numeric entry ({e})") from e
    if data.ndim != 2 or data.shape[1] != 2:
        raise PathFileError(f"{path}: every row needs exactly two columns")
    return data[:, 0], data[:, 1]


def _read_grid_values(path: str) -> Tuple[TimeGrid, np.ndarray]:
    times, values = read_table_csv(path)
    if times.size < 2:
        raise PathFileError(f"{path}: a path needs at least two rows")
    grid = TimeGrid(float(times[-1]), times.size - 1)
    if times[0] != 0.0 or np.max(np.abs(times - grid.nodes)) > NODE_RTOL * max(1.0, grid.horizon):
        raise PathFileError(f"{path}: times are not a uniform grid starting at 0")
    if np.any(np.isinf(values)):
        raise PathFileError(f"{path}: path values must not be infinite")
    return grid, values


def read_path_csv(path: str) -> SampledPath:
    """Read a path written by :func:`write_path_csv`; the grid is rebuilt from the rows."""
    grid, values = _read_grid_values(path)
    if np.any(np.isnan(values)):
        bad = int(np.flatnonzero(np.isnan(values))[0])
        raise PathFileError(
            f"{path}: undefined value at t={grid.node(bad)}; read it with read_flagged_csv"
        )
    return SampledPath(grid, values)


def read_flagged_csv(path: str) -> FlaggedPath:
    """Like :func:`read_path_csv`, but ``nan`` rows come back as undefined nodes."""
    grid, values = _read_grid_values(path)
    valid = ~np.isnan(values)
    if not valid.all():
        logger.debug(f"{path}: {int((~valid).sum())} 个未定义节点")
    return FlaggedPath(grid, values, valid)


def _clean(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps_report(report: Dict[str, Any]) -> str:
    # repr-based float output is the shortest string that round-trips the double
    return json.dumps(_clean(report), sort_keys=True, indent=2) + "\n"


def write_json_report(path: str, report: Dict[str, Any]) -> None:
    _atomic_write(path, dumps_report(report))
    logger.info(f"报告已写入: {path}")


def read_json(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise PathFileError(f"{path} is not valid JSON: {e}") from e
