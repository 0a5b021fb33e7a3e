"""Monte Carlo free-boundary solver for portfolio choice with proportional transaction costs."""

__version__ = "0.1.0"

from .grid import GridSpec, ValueField, build_grid, extension_value, interpolate
from .market import MarketParams, dai_yi_bounds, merton_proportion, terminal_value
from .mc import NonFiniteValueError, SchemeParams, StepDiagnostics, pde_step
from .obstacle import BUY, NOTRADE, SELL, RegionInconsistencyError, RegionLabels, classify, sweep_adjust
from .reference_fd import compare_fields, solve_fd_1d
from .solver import SolveResult, extract_boundaries, solve

__all__ = [
    "BUY", "NOTRADE", "SELL",
    "GridSpec", "MarketParams", "NonFiniteValueError", "RegionInconsistencyError", "RegionLabels",
    "SchemeParams", "SolveResult", "StepDiagnostics", "ValueField",
    "build_grid", "classify", "compare_fields", "dai_yi_bounds", "extension_value", "extract_boundaries",
    "interpolate", "merton_proportion", "pde_step", "solve", "solve_fd_1d", "sweep_adjust", "terminal_value",
]
