"""Best response to a frozen population: the forward-backward system

    dX = -Y dt + sigma dW + sigma~ dW~,   Y martingale,   Y_tau = v(X_tau)

solved by Picard iteration on the feedback control.  Because the backward
driver is zero, ``Y_k = E[Y_tau | F_k]`` and every node is fitted directly
against the terminal value.  The regression target is corrected by the
martingale increments of the already fitted later nodes, which leaves the
conditional expectation unchanged but removes most of the Monte-Carlo noise.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import features as feat
from .conditional import RegressionBasis, fit_features, r_squared
from .costs import TerminalCost
from .paths import (
    ControlField,
    FeatureFlow,
    NoiseEnsemble,
    PathEnsemble,
    h2_distance,
    h2_distance_and_norm,
    propagate,
)

log = logging.getLogger(__name__)

Terminal = Callable[[np.ndarray], np.ndarray]


class CostTerminal:
    """``v(x) = g_x(x, m_i)`` with ``m_i`` a frozen cloud per scenario."""

    def __init__(self, cost: TerminalCost, clouds: np.ndarray):
        self.cost = cost
        self.clouds = np.asarray(clouds)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.cost.gx_clouds(x, self.clouds)


class NonConvergenceError(RuntimeError):
    pass


@dataclass
class FbsdeSolution:
    control: ControlField
    paths: PathEnsemble
    residual: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    start_r2: float = float("nan")

    @property
    def adjoint_coeffs(self) -> np.ndarray:
        """Fitted ``Y`` coefficients per node (the negated control)."""
        return -self.control.coeffs


def backward_fit(
    paths: PathEnsemble,
    y_terminal: np.ndarray,
    basis: RegressionBasis,
    flow: FeatureFlow | None = None,
) -> tuple[np.ndarray, float]:
    """Fit ``E[Y_T | features_k]`` at every node; returns (coeffs, R^2 at node 0)."""
    flow = paths.feature_flow() if flow is None else flow
    K = paths.grid.steps
    X = paths.X
    coeffs = np.empty((K + 1, len(basis.features)))
    coeffs[K] = fit_features(y_terminal, X[K], flow.mbar[K], flow.m2[K], basis)
    correction = np.zeros_like(y_terminal)
    target = y_terminal
    for k in range(K - 1, -1, -1):
        correction += feat.martingale_increment(
            basis.features, coeffs[k + 1], X[k], flow.mbar[k],
            paths.state_increment_noise(k), flow.dmbar_mart[k], flow.dm2_mart[k])
        target = y_terminal - correction
        coeffs[k] = fit_features(target, X[k], flow.mbar[k], flow.m2[k], basis)
    fitted0 = feat.evaluate(basis.features, coeffs[0], X[0], flow.mbar[0], flow.m2[0])
    return coeffs, r_squared(target, fitted0)


def solve_inner(
    terminal: Terminal,
    init: np.ndarray,
    noise: NoiseEnsemble,
    sigma: float,
    sigma_tilde: float,
    basis: RegressionBasis = RegressionBasis(),
    feature_flow: FeatureFlow | None = None,
    damping: float = 0.5,
    tol: float = 1e-6,
    max_iter: int = 200,
    init_control: ControlField | None = None,
    workers: int = 1,
) -> FbsdeSolution:
    """Picard iteration for the frozen-population control problem.

    Each sweep propagates the state under the current control, sets the
    terminal adjoint, regresses it back to every node and blends
    ``control <- (1 - damping) control + damping (-Y)``.  Stops once the
    undamped update moves the control by at most ``tol * max(|control|, 1)``
    in H^2.  ``feature_flow`` feeds exogenous population moments to the
    control; ``None`` uses the own cloud.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = noise.grid
    control = (ControlField.zero(grid, basis.features) if init_control is None
               else init_control.in_basis(basis.features))
    history: list[float] = []
    best: FbsdeSolution | None = None
    for it in range(1, max_iter + 1):
        paths = propagate(control, init, noise, sigma, sigma_tilde, feature_flow, workers)
        y_T = terminal(paths.X[-1])
        if not np.all(np.isfinite(y_T)):
            raise FloatingPointError("non-finite terminal adjoint")
        ycoef, r2 = backward_fit(paths, y_T, basis)
        update = ControlField(grid, basis.features, -ycoef)
        dist, norm = h2_distance_and_norm(update, control, paths)
        scale = max(norm, 1.0)
        history.append(dist)
        sol = FbsdeSolution(update, paths, dist, it, dist <= tol * scale, history, r2)
        if sol.converged:
            return sol
        if best is None or dist < best.residual:
            best = sol
        control = control.blend(update, damping)
    log.warning("inner solve stopped after %d iterations (residual %.3g)", max_iter, best.residual)
    best.converged = False
    best.history = history
    return best


def fbsde_residual(
    solution: FbsdeSolution,
    terminal: Terminal,
    init: np.ndarray,
    basis: RegressionBasis = RegressionBasis(),
    feature_flow: FeatureFlow | None = None,
) -> float:
    """H^2 size of one more undamped sweep started from ``solution.control``."""
    p = solution.paths
    paths = propagate(solution.control, init, p.noise, p.sigma, p.sigma_tilde, feature_flow)
    ycoef, _ = backward_fit(paths, terminal(paths.X[-1]), basis)
    return h2_distance(ControlField(p.grid, basis.features, -ycoef), solution.control, paths)
