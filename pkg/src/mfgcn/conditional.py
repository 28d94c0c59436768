"""Least-squares conditional expectations across the particle ensemble."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import features as feat
from .costs import TerminalCost
from .paths import FeatureFlow, PathEnsemble


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """Feature tags plus a ridge penalty.

    ``ridge=None`` means ``1e-8 * n_samples`` at fit time.
    """

    features: tuple[str, ...] = feat.DEFAULT_BASIS
    ridge: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "features", feat.validate(self.features))
        if self.ridge is not None and (not np.isfinite(self.ridge) or self.ridge < 0):
            raise ValueError("ridge must be finite and >= 0")

    @classmethod
    def extended(cls, ridge: float | None = None) -> "RegressionBasis":
        return cls(feat.EXTENDED_BASIS, ridge)

    def penalty(self, n_samples: int) -> float:
        return 1e-8 * n_samples if self.ridge is None else self.ridge


def solve_normal_equations(D: np.ndarray, b: np.ndarray, ridge: float) -> np.ndarray:
    """Ridge least squares for a (features, samples) design ``D``."""
    # einsum keeps the reductions out of BLAS, whose threaded summation order
    # may depend on the environment
    G = np.einsum("ij,kj->ik", D, D)
    r = np.einsum("ij,j->i", D, b)
    if ridge > 0:
        G = G + ridge * np.eye(G.shape[0])
    else:
        d = np.sqrt(np.clip(np.diag(G), 1e-300, None))
        ev = np.linalg.eigvalsh(G / np.outer(d, d))
        if ev[0] <= 1e-12 * ev[-1]:
            raise RankDeficientError(
                "normal equations are rank deficient; use a basis ridge > 0")
    return np.linalg.solve(G, r)


def fit_features(
    targets: np.ndarray,
    x: np.ndarray,
    mbar: np.ndarray,
    m2: np.ndarray,
    basis: RegressionBasis,
) -> np.ndarray:
    """Coefficients minimizing ``|targets - Phi c|^2 + ridge |c|^2``."""
    targets = np.asarray(targets, dtype=np.float64)
    D = feat.design_matrix(basis.features, x, mbar, m2)
    if D.shape[1] < D.shape[0]:
        raise ValueError("fewer samples than features")
    c = solve_normal_equations(D, targets.reshape(-1), basis.penalty(D.shape[1]))
    if not np.all(np.isfinite(c)):
        raise FloatingPointError("non-finite regression coefficients")
    return c


def fit_conditional(
    targets: np.ndarray,
    paths: PathEnsemble,
    k: int,
    basis: RegressionBasis,
    flow: FeatureFlow | None = None,
) -> np.ndarray:
    """Regress ``targets`` (scenario, particle) on the node-k features of ``paths``.

    One pooled regression over all scenarios; the moment features carry the
    scenario identity.
    """
    flow = paths.feature_flow() if flow is None else flow
    return fit_features(targets, paths.X[k], flow.mbar[k], flow.m2[k], basis)


def r_squared(targets: np.ndarray, fitted: np.ndarray) -> float:
    ss_tot = float(np.sum((targets - targets.mean()) ** 2))
    ss_res = float(np.sum((targets - fitted) ** 2))
    return 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot


def terminal_adjoint(
    cost: TerminalCost,
    paths: PathEnsemble,
    terminal_clouds: np.ndarray | None = None,
) -> np.ndarray:
    """``Y_T = g_x(X_T, m_T)`` with ``m_T`` each scenario's terminal cloud.

    ``terminal_clouds`` (scenario, atom) overrides the measure, e.g. with a
    frozen reference population.
    """
    XT = paths.X[-1]
    clouds = XT if terminal_clouds is None else np.asarray(terminal_clouds)
    return cost.gx_clouds(XT, clouds)


__all__: Sequence[str] = (
    "RankDeficientError", "RegressionBasis", "fit_conditional", "fit_features",
    "r_squared", "solve_normal_equations", "terminal_adjoint",
)
