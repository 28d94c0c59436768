"""Particle solver for one-dimensional mean field games with common noise."""
from .conditional import RegressionBasis
from .costs import (
    MeanSquareDistance,
    Quadratic,
    ScalarMap,
    StateOnlyQuadratic,
    TrackMean,
    check_all,
    check_assumption,
)
from .measures import EmpiricalMeasure, wasserstein2
from .mfg import MfgSolution, solve_mfg, uniqueness_probe
from .model import Discretization, MfgModel, SolverConfig
from .paths import ControlField, InitialLaw, TimeGrid

__version__ = "0.1.0"

__all__ = [
    "ControlField", "Discretization", "EmpiricalMeasure", "InitialLaw", "MeanSquareDistance",
    "MfgModel", "MfgSolution", "Quadratic", "RegressionBasis", "ScalarMap", "SolverConfig",
    "StateOnlyQuadratic", "TimeGrid", "TrackMean", "check_all", "check_assumption",
    "solve_mfg", "uniqueness_probe", "wasserstein2",
]
