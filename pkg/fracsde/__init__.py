from .char_system import compose_solution, solve_characteristic
from .fbm import FbmConfig, sample_fbm
from .linear_quasi import solve_linear_explicit, solve_quasilinear
from .main import main
from .mc import run_mc
from .time_grid import Kernel, SampledPath, TimeGrid

__all__ = [
    "FbmConfig",
    "Kernel",
    "SampledPath",
    "TimeGrid",
    "compose_solution",
    "main",
    "run_mc",
    "sample_fbm",
    "solve_characteristic",
    "solve_linear_explicit",
    "solve_quasilinear",
]
