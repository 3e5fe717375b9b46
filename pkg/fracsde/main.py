import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .char_system import compose_solution, named_coefficients
from .config import (
    DEFAULT_HORIZON,
    DEFAULT_HURST,
    DEFAULT_INVERSE_MAX_ITER,
    DEFAULT_INVERSE_TOL,
    DEFAULT_LOG_LEVEL,
    DEFAULT_SEED,
    DEFAULT_STEPS,
    RunConfig,
    load_run_config,
)
from .convergence import STUDIES, convergence_study
from .errors import DomainError, NumericalFailure, PathFileError
from .fbm import METHODS, FbmConfig, TruncationLevel, sample_fbm, truncate
from .frac_calc import frac_integral_left, weyl_derivative_left, weyl_derivative_right
from .integrators import (
    EVAL_POINTS,
    KERNEL_INDICATOR,
    KERNEL_ZERO,
    IntegrandSpec,
    MalliavinKernel,
    ito_integral,
    young_fractional,
    young_riemann,
)
from .io import (
    dumps_report,
    read_flagged_csv,
    read_path_csv,
    table_csv_text,
    write_json_report,
    write_path_csv,
    write_table_csv,
)
from .linear_quasi import CoefficientSpec, load_coefficient_file, solve_linear_explicit, solve_quasilinear
from .mc import EXPERIMENTS, McPlan, make_experiment, run_mc
from .time_grid import Kernel, SampledPath, TimeGrid
from .utils import configure_logging, parse_float_list

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

FRAC_OPS = ("ileft", "dleft", "dright")
INTEGRATION_METHODS = ("riemann", "fractional", "ito")
FAMILIES = ("linear", "affine", "sine", "logistic")
MALLIAVIN_KINDS = (KERNEL_ZERO, KERNEL_INDICATOR)
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


class CliParser(argparse.ArgumentParser):
    """用法错误以参数错误的退出码 1 退出，而不是 argparse 默认的 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_DOMAIN, f"{self.prog}: error: {message}\n")


def _param(cfg: RunConfig, key: str, default: Any = None) -> Any:
    value = cfg.params.get(key)
    return default if value is None else value


def _float_list(value: Any) -> List[float]:
    if isinstance(value, str):
        return list(parse_float_list(value))
    if isinstance(value, (int, float)):
        return [float(value)]
    return [float(v) for v in value]


def _grid(cfg: RunConfig) -> TimeGrid:
    return TimeGrid(cfg.horizon, cfg.steps)


def _driver(cfg: RunConfig) -> SampledPath:
    """The fBm path from ``--path`` when given, otherwise a fresh sample."""
    path_file = _param(cfg, "path")
    if path_file:
        path = read_path_csv(path_file)
        logger.info(f"从 {path_file} 读取驱动路径，共 {path.grid.n_steps} 步")
        return path
    method = _param(cfg, "method", "cholesky")
    return sample_fbm(FbmConfig(cfg.hurst, _grid(cfg), seed=cfg.seed, method=method))


def _emit_path(cfg: RunConfig, path) -> None:
    if cfg.out:
        write_path_csv(cfg.out, path)
        logger.info(f"✓ 已写入: {cfg.out}")
    else:
        sys.stdout.write(table_csv_text(path.grid.nodes, path.values))


def _emit_table(cfg: RunConfig, times, values) -> None:
    if cfg.out:
        write_table_csv(cfg.out, times, values)
        logger.info(f"✓ 已写入 {len(times)} 行: {cfg.out}")
    else:
        sys.stdout.write(table_csv_text(times, values))


def _emit_report(cfg: RunConfig, report: Dict[str, Any]) -> None:
    if cfg.out:
        write_json_report(cfg.out, report)
        logger.info(f"✓ 已写入: {cfg.out}")
    else:
        sys.stdout.write(dumps_report(report))


def run_fbm(cfg: RunConfig) -> int:
    method = _param(cfg, "method", "cholesky")
    B = sample_fbm(FbmConfig(cfg.hurst, _grid(cfg), seed=cfg.seed, method=method))
    level = _param(cfg, "truncate")
    if level is not None:
        B, tau = truncate(B, TruncationLevel(float(level), cfg.beta))
        logger.info(f"在水平 R={level} 处截断: tau_R={tau:.6g}")
    _emit_path(cfg, B)
    return EXIT_OK


def _frac_input(cfg: RunConfig, op: str) -> SampledPath:
    """The ``--in`` path, or the driver. Undefined rows are allowed outside the operator's span."""
    input_file = _param(cfg, "input")
    if not input_file:
        return _driver(cfg)
    flagged = read_flagged_csv(input_file)
    if flagged.all_valid:
        return flagged.to_path()
    grid = flagged.grid
    span = np.zeros(grid.n_steps + 1, dtype=bool)
    if op == "dright":
        span[: grid.index_of(float(_param(cfg, "base", grid.horizon))) + 1] = True
    else:
        span[grid.index_of(float(_param(cfg, "base", 0.0))) :] = True
    missing = span & ~flagged.valid
    if missing.any():
        first = grid.node(int(np.flatnonzero(missing)[0]))
        raise DomainError(f"{input_file}: {int(missing.sum())} undefined node(s) inside the operator's span, first at t={first}")
    logger.info(f"{input_file}: 忽略作用区间外的 {int((~flagged.valid).sum())} 个未定义节点")
    return SampledPath(grid, np.where(flagged.valid, flagged.values, 0.0))


def run_frac(cfg: RunConfig) -> int:
    op = _param(cfg, "op", "ileft")
    alpha = float(_param(cfg, "alpha", 0.5))
    if op not in FRAC_OPS:
        raise DomainError(f"unknown operator {op!r}; choose from {FRAC_OPS}")
    f = _frac_input(cfg, op)
    if op == "ileft":
        result = frac_integral_left(f, alpha, float(_param(cfg, "base", 0.0)))
    elif op == "dleft":
        result = weyl_derivative_left(f, alpha, float(_param(cfg, "base", 0.0)))
    else:
        result = weyl_derivative_right(f, alpha, float(_param(cfg, "base", f.grid.horizon)))
    _emit_path(cfg, result)
    return EXIT_OK


def _integrand(cfg: RunConfig, B: SampledPath) -> IntegrandSpec:
    """``--f`` with the ``--malliavin`` kernel, or the driver itself with kernel 1_[0,t](s)."""
    f_file = _param(cfg, "f_path")
    f = read_path_csv(f_file) if f_file else B
    kind = _param(cfg, "malliavin", KERNEL_ZERO if f_file else KERNEL_INDICATOR)
    if kind == KERNEL_ZERO:
        malliavin = MalliavinKernel.zero()
    elif kind == KERNEL_INDICATOR:
        malliavin = MalliavinKernel.indicator(SampledPath.constant(f.grid, 1.0))
    else:
        raise DomainError(f"unknown Malliavin kernel {kind!r}; choose from {MALLIAVIN_KINDS}")
    return IntegrandSpec(f, malliavin, holder_beta=cfg.beta)


def run_integrate(cfg: RunConfig) -> int:
    method = _param(cfg, "integration", "riemann")
    g_file = _param(cfg, "g_path")
    B = read_path_csv(g_file) if g_file else _driver(cfg)
    f = _integrand(cfg, B)
    a = float(_param(cfg, "a", 0.0))
    b = float(_param(cfg, "b", B.grid.horizon))
    eval_point = _param(cfg, "eval_point")
    point = {} if eval_point is None else {"eval_point": eval_point}
    if method == "riemann":
        value = young_riemann(f, B, a, b, **point)
    elif method == "fractional":
        alpha = _param(cfg, "alpha")
        value = young_fractional(f, B, a, b, alpha=None if alpha is None else float(alpha), g_beta=cfg.beta)
    elif method == "ito":
        value = ito_integral(f, B, a, b, Kernel(cfg.hurst), **point)
    else:
        raise DomainError(f"unknown integration method {method!r}; choose from {INTEGRATION_METHODS}")
    logger.info(f"{method} 积分 [{a}, {b}] = {value:.10g}")
    _emit_report(cfg, {"method": method, "a": a, "b": b, "value": value})
    return EXIT_OK


def run_solve_linear(cfg: RunConfig) -> int:
    B = _driver(cfg)
    specs = [CoefficientSpec.constant(float(_param(cfg, key, default))) for key, default in
             (("beta1", 0.0), ("beta0", 0.0), ("a1", 1.0), ("a0", 0.0))]
    x = solve_linear_explicit(*specs, float(_param(cfg, "x0", 1.0)), B, Kernel(cfg.hurst))
    logger.info(f"线性方程显式解: x(T)={x.values[-1]:.10g}")
    _emit_path(cfg, x)
    return EXIT_OK


def run_solve_quasilinear(cfg: RunConfig) -> int:
    coeff_file = _param(cfg, "coeff_file")
    if not coeff_file:
        raise DomainError("solve-quasilinear needs --coeff-file")
    coeffs = load_coefficient_file(coeff_file)
    B = _driver(cfg)
    x = solve_quasilinear(coeffs, float(_param(cfg, "eta", 1.0)), B, Kernel(cfg.hurst))
    _emit_path(cfg, x)
    return EXIT_OK


def run_solve_nonlinear(cfg: RunConfig) -> int:
    coeffs = named_coefficients(_param(cfg, "coeff", "sine"), _float_list(_param(cfg, "params", [])))
    B = _driver(cfg)
    T = B.grid.horizon
    times = _float_list(_param(cfg, "times", [0.25 * T, 0.5 * T, 0.75 * T, T]))
    result = compose_solution(
        coeffs,
        float(_param(cfg, "eta", 1.0)),
        B,
        times,
        Kernel(cfg.hurst),
        cfg.beta,
        tol=float(_param(cfg, "tol", DEFAULT_INVERSE_TOL)),
        max_iter=int(_param(cfg, "max_iter", DEFAULT_INVERSE_MAX_ITER)),
    )
    _emit_table(cfg, result.times, result.values)
    if result.flagged:
        logger.error(f"✗ 在 t={result.horizon:.6g} 处超出可逆时间范围: {result.error}")
        return EXIT_NUMERICAL
    return EXIT_OK


def run_mc_command(cfg: RunConfig) -> int:
    name = _param(cfg, "experiment", "zero-mean-ito")
    tolerance = _param(cfg, "tolerance")
    plan_kwargs = {}
    if _param(cfg, "batch_size") is not None:
        plan_kwargs["batch_size"] = int(_param(cfg, "batch_size"))
    plan = McPlan(
        int(_param(cfg, "samples", 10000)),
        base_seed=cfg.seed,
        tolerance=None if tolerance is None else float(tolerance),
        **plan_kwargs,
    )
    experiment = make_experiment(name, cfg.hurst, _grid(cfg), _param(cfg, "method", "cholesky"))
    result = run_mc(plan, experiment, checkpoint_path=_param(cfg, "checkpoint"))
    _emit_report(cfg, result.to_dict())
    return EXIT_OK


def run_convergence(cfg: RunConfig) -> int:
    levels = [int(n) for n in _float_list(_param(cfg, "levels", [256, 512, 1024]))]
    table = convergence_study(
        _param(cfg, "experiment", "young-methods"),
        levels,
        cfg.hurst,
        horizon=cfg.horizon,
        seed=cfg.seed,
        beta=cfg.beta,
    )
    _emit_report(cfg, table.to_dict())
    return EXIT_OK


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--hurst", type=float, default=None, help=f"Hurst parameter in (0.5, 1) (default: {DEFAULT_HURST})")
    common.add_argument("--horizon", type=float, default=None, help=f"time horizon T (default: {DEFAULT_HORIZON})")
    common.add_argument("--steps", type=int, default=None, help=f"grid steps N (default: {DEFAULT_STEPS})")
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default: {DEFAULT_SEED})")
    common.add_argument("--beta", type=float, default=None, help="Hölder exponent in (1/2, H) (default: (1/2 + H)/2)")
    common.add_argument("--out", type=str, default=None, help="output file (default: stdout)")
    common.add_argument("--config", type=str, default=None, help="JSON config file; flags override it")
    common.add_argument(
        "--log-level", type=str.upper, choices=LOG_LEVELS, default=DEFAULT_LOG_LEVEL.upper(),
        help=f"logging level (default: {DEFAULT_LOG_LEVEL})",
    )
    return common


def _driver_options() -> argparse.ArgumentParser:
    driver = argparse.ArgumentParser(add_help=False)
    driver.add_argument("--path", type=str, default=None, help="read the fBm driver from a t,value CSV")
    driver.add_argument("--method", choices=METHODS, default=None, help="fBm sampler (default: cholesky)")
    return driver


def build_parser() -> CliParser:
    parser = CliParser(prog="fracsde", description="fBm sampling, fractional integrals and SDE solvers for H > 1/2")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)
    common, driver = _common_options(), _driver_options()

    def add(name: str, handler: Callable[[RunConfig], int], help_text: str, with_driver: bool = True):
        parents = [common, driver] if with_driver else [common]
        sub = commands.add_parser(name, parents=parents, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    fbm = add("fbm", run_fbm, "sample one fBm path", with_driver=False)
    fbm.add_argument("--method", choices=METHODS, default=None, help="sampler (default: cholesky)")
    fbm.add_argument("--truncate", type=float, default=None, help="stop the path at level R")

    frac = add("frac", run_frac, "fractional integral or Weyl derivative of a path")
    frac.add_argument("op", choices=FRAC_OPS, help="ileft: I^alpha_{a+}, dleft: D^alpha_{a+}, dright: D^alpha_{b-}")
    frac.add_argument("--alpha", type=float, default=None, help="order in (0, 1) (default: 0.5)")
    frac.add_argument("--base", type=float, default=None, help="base point a (left) or b (right)")
    frac.add_argument("--in", dest="input", type=str, default=None, help="path CSV to transform (default: sampled fBm)")

    integrate = add("integrate", run_integrate, "integrate a path against another", with_driver=False)
    integrate.add_argument("--method", dest="integration", choices=INTEGRATION_METHODS, default=None,
                           help="default: riemann")
    integrate.add_argument("--f", dest="f_path", type=str, default=None, help="integrand CSV (default: the integrator)")
    integrate.add_argument("--g", dest="g_path", type=str, default=None, help="integrator CSV (default: sampled fBm)")
    integrate.add_argument("--alpha", type=float, default=None, help="order for the fractional method")
    integrate.add_argument("--malliavin", choices=MALLIAVIN_KINDS, default=None,
                           help="kernel D_s f(t) for the ito method (default: zero with --f, indicator without)")
    integrate.add_argument("--from", dest="a", type=float, default=None, help="lower limit (default: 0)")
    integrate.add_argument("--to", dest="b", type=float, default=None, help="upper limit (default: T)")
    integrate.add_argument("--eval-point", choices=EVAL_POINTS, default=None,
                           help="Riemann point (default: mid for riemann, left for ito)")

    linear = add("solve-linear", run_solve_linear, "explicit solution of the linear equation")
    for flag, default in (("--beta1", 0.0), ("--beta0", 0.0), ("--a1", 1.0), ("--a0", 0.0), ("--x0", 1.0)):
        linear.add_argument(flag, type=float, default=None, help=f"constant coefficient (default: {default})")

    quasi = add("solve-quasilinear", run_solve_quasilinear, "quasilinear equation from a coefficient file")
    quasi.add_argument("--coeff-file", type=str, default=None, help="JSON coefficient spec")
    quasi.add_argument("--eta", type=float, default=None, help="initial value (default: 1)")

    nonlinear = add("solve-nonlinear", run_solve_nonlinear, "nonlinear equation through the characteristic system")
    nonlinear.add_argument("--coeff", choices=FAMILIES, default=None, help="named coefficient family (default: sine)")
    nonlinear.add_argument("--params", type=str, default=None, help="comma-separated family parameters")
    nonlinear.add_argument("--eta", type=float, default=None, help="initial value (default: 1)")
    nonlinear.add_argument("--times", type=str, default=None, help="comma-separated output times on the grid")
    nonlinear.add_argument("--tol", type=float, default=None, help=f"inverse tolerance (default: {DEFAULT_INVERSE_TOL})")
    nonlinear.add_argument("--max-iter", type=int, default=None, help=f"inverse iterations (default: {DEFAULT_INVERSE_MAX_ITER})")

    mc = add("mc", run_mc_command, "Monte Carlo acceptance experiment", with_driver=False)
    mc.add_argument("--experiment", choices=EXPERIMENTS, default=None, help="default: zero-mean-ito")
    mc.add_argument("--samples", type=int, default=None, help="number of paths (default: 10000)")
    mc.add_argument("--batch-size", type=int, default=None, help="paths per batch")
    mc.add_argument("--tolerance", type=float, default=None, help="absolute tolerance instead of three sigma")
    mc.add_argument("--checkpoint", type=str, default=None, help="progress file for resumable runs")
    mc.add_argument("--method", choices=METHODS, default=None, help="sampler (default: cholesky)")

    conv = add("convergence", run_convergence, "refinement study with fitted order", with_driver=False)
    conv.add_argument("--experiment", choices=STUDIES, default=None, help="default: young-methods")
    conv.add_argument("--levels", type=str, default=None, help="doubling step counts, e.g. 256,512,1024")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """主函数：解析参数，运行一个子命令并返回退出码"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code is None else int(e.code)
    configure_logging(args.log_level)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level", "handler")}
    try:
        cfg = load_run_config(flags, args.config)
        return args.handler(cfg)
    except DomainError as e:
        logger.error(f"✗ {e}")
        return EXIT_DOMAIN
    except NumericalFailure as e:
        logger.error(f"✗ {e}")
        return EXIT_NUMERICAL
    except (PathFileError, OSError) as e:
        logger.error(f"✗ {e}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
