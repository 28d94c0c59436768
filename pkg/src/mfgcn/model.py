"""Plain configuration records consumed by the solver."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .conditional import RegressionBasis
from .costs import TerminalCost
from .paths import InitialLaw, TimeGrid


@dataclass(frozen=True)
class MfgModel:
    """``dX = alpha dt + sigma dW + sigma~ dW~`` on ``[0, horizon]`` with terminal cost."""

    cost: TerminalCost
    sigma: float
    sigma_tilde: float
    horizon: float
    initial: InitialLaw

    def __post_init__(self):
        if self.sigma < 0 or self.sigma_tilde < 0:
            raise ValueError("volatilities must be non-negative")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")

    def with_(self, **kw) -> "MfgModel":
        return replace(self, **kw)


@dataclass(frozen=True)
class Discretization:
    n_common: int = 64
    n_particles: int = 2000
    steps_per_unit: int = 100
    basis: RegressionBasis = field(default_factory=RegressionBasis)

    def grid(self, horizon: float) -> TimeGrid:
        return TimeGrid.uniform(horizon, self.steps_per_unit)


@dataclass(frozen=True)
class SolverConfig:
    damping: float = 0.5
    tol: float = 1e-4
    max_iter: int = 200
    inner_damping: float = 0.5
    inner_tol: float = 1e-6
    inner_max_iter: int = 200
    split_ratio: float = 0.9
    split_patience: int = 5
    workers: int = 1

    def __post_init__(self):
        for name in ("damping", "inner_damping"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.tol <= 0 or self.inner_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1 or self.inner_max_iter < 1 or self.split_patience < 1:
            raise ValueError("iteration limits must be >= 1")

    def with_(self, **kw) -> "SolverConfig":
        return replace(self, **kw)
