"""The equilibrium fixed point.

``phi_map`` sends a control to the best response against the population it
generates.  ``solve_interval`` runs damped Picard on ``phi_map`` over one time
interval; ``solve_mfg`` chains intervals backward from the horizon, replacing
the terminal cost by the fitted decoupling field at each interface and
halving an interval whenever its Picard iteration stalls, then re-solves the
intervals left to right from the realized clouds.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from . import features as feat
from .conditional import RegressionBasis
from .costs import TerminalCost
from .fbsde import CostTerminal, FbsdeSolution, solve_inner
from .model import Discretization, MfgModel, SolverConfig
from .paths import (
    ControlField,
    NoiseEnsemble,
    PathEnsemble,
    TimeGrid,
    concatenate,
    conditional_flow,
    h2_distance,
    h2_distance_and_norm,
    h2_norm,
    propagate,
    sample_initial,
    sample_noise,
)

log = logging.getLogger(__name__)

__all__ = [
    "ContractionRecord", "DecouplingField", "IntervalResult", "MfgSolution",
    "SplitRequired", "IntervalUnderflow", "UniquenessReport", "h2_distance",
    "phi_map", "solve_interval", "solve_mfg", "uniqueness_probe",
]


class SplitRequired(RuntimeError):
    """Picard on this interval did not settle; the caller should shorten it."""

    def __init__(self, interval: tuple[float, float], record: "ContractionRecord"):
        super().__init__(f"no convergence on [{interval[0]:.4g}, {interval[1]:.4g}]")
        self.interval = interval
        self.record = record


class IntervalUnderflow(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DecouplingField:
    """Fitted ``u(x, mbar, m2)``: the adjoint at an interface as a function of
    the state and the scenario's cloud moments."""

    interface_time: float
    features: tuple[str, ...]
    coeffs: np.ndarray
    r2: float
    L_x: float
    L_m: float

    def evaluate(self, x: np.ndarray, mbar: np.ndarray, m2: np.ndarray) -> np.ndarray:
        return feat.evaluate(self.features, self.coeffs, x, mbar, m2)

    def to_dict(self) -> dict:
        return {"interface_time": self.interface_time, "features": list(self.features),
                "coefficients": self.coeffs.tolist(), "r2": self.r2,
                "L_x": self.L_x, "L_m": self.L_m}


TerminalSpec = Union[TerminalCost, DecouplingField]


@dataclass
class ContractionRecord:
    interval: tuple[float, float]
    distances: list[float] = field(default_factory=list)
    ratios: list[float] = field(default_factory=list)
    inner_iterations: list[int] = field(default_factory=list)
    converged: bool = False
    phase: str = "backward"

    @property
    def iterations(self) -> int:
        return len(self.distances)

    @property
    def mean_ratio(self) -> float:
        return float(np.mean(self.ratios)) if self.ratios else 0.0

    def to_dict(self) -> dict:
        return {"interval": list(self.interval), "phase": self.phase,
                "iterations": self.iterations, "converged": self.converged,
                "distances": self.distances, "ratios": self.ratios,
                "inner_iterations": self.inner_iterations}


@dataclass
class IntervalResult:
    control: ControlField
    field: DecouplingField
    record: ContractionRecord
    inner: FbsdeSolution


def _terminal_for(spec: TerminalSpec, reference: PathEnsemble):
    if isinstance(spec, DecouplingField):
        flow = reference.own_flow()
        mb, m2 = flow.mbar[-1], flow.m2[-1]
        return lambda x: spec.evaluate(x, mb, m2)
    return CostTerminal(spec, reference.X[-1])


def phi_map(
    control: ControlField,
    init: np.ndarray,
    terminal: TerminalSpec,
    noise: NoiseEnsemble,
    sigma: float,
    sigma_tilde: float,
    basis: RegressionBasis = RegressionBasis(),
    config: SolverConfig = SolverConfig(),
    warm_start: ControlField | None = None,
    reference: PathEnsemble | None = None,
) -> tuple[ControlField, FbsdeSolution, PathEnsemble]:
    """Best response to the population generated by ``control``.

    Returns (new control, inner solution, reference ensemble).  The new
    control reads the reference population's moments, which coincide with
    its own at a fixed point.
    """
    if reference is None:
        reference = propagate(control, init, noise, sigma, sigma_tilde, workers=config.workers)
    inner = solve_inner(
        _terminal_for(terminal, reference), init, noise, sigma, sigma_tilde, basis,
        feature_flow=reference.own_flow(), damping=config.inner_damping,
        tol=config.inner_tol, max_iter=config.inner_max_iter,
        init_control=control if warm_start is None else warm_start,
        workers=config.workers,
    )
    if not inner.converged:
        log.warning("inner solve on [%.4g, %.4g] did not converge (residual %.3g)",
                    noise.grid.t0, noise.grid.t1, inner.residual)
    return inner.control, inner, reference


def _fit_field(inner: FbsdeSolution, basis: RegressionBasis) -> DecouplingField:
    p = inner.paths
    flow = p.feature_flow()
    ycoef = inner.adjoint_coeffs[0]
    dx, dm = feat.partials(basis.features, ycoef, p.X[0], flow.mbar[0], flow.m2[0])
    return DecouplingField(p.grid.t0, basis.features, ycoef.copy(), inner.start_r2,
                           float(np.max(np.abs(dx))), float(np.max(np.abs(dm))))


def solve_interval(
    init: np.ndarray,
    terminal: TerminalSpec,
    noise: NoiseEnsemble,
    sigma: float,
    sigma_tilde: float,
    basis: RegressionBasis = RegressionBasis(),
    config: SolverConfig = SolverConfig(),
    initial_guess: ControlField | None = None,
    phase: str = "backward",
) -> IntervalResult:
    """Damped Picard on ``phi_map`` over ``noise.grid``.

    Raises ``SplitRequired`` after ``max_iter`` sweeps, or once the step ratio
    stays at or above ``split_ratio`` for ``split_patience`` sweeps in a row.
    """
    grid = noise.grid
    alpha = (ControlField.zero(grid, basis.features) if initial_guess is None
             else initial_guess.in_basis(basis.features))
    record = ContractionRecord((grid.t0, grid.t1), phase=phase)
    warm = None
    for _ in range(config.max_iter):
        phi, inner, ref = phi_map(alpha, init, terminal, noise, sigma, sigma_tilde,
                                  basis, config, warm_start=warm)
        warm = phi
        record.inner_iterations.append(inner.iterations)
        new = alpha.blend(phi, config.damping)
        dist, norm = h2_distance_and_norm(new, alpha, ref)
        scale = max(norm, 1.0)
        if record.distances and record.distances[-1] > 0:
            record.ratios.append(dist / record.distances[-1])
        record.distances.append(dist)
        alpha = new
        if dist <= config.tol * scale:
            record.converged = True
            return IntervalResult(alpha, _fit_field(inner, basis), record, inner)
        tail = record.ratios[-config.split_patience:]
        if len(tail) == config.split_patience and min(tail) >= config.split_ratio:
            break
    raise SplitRequired((grid.t0, grid.t1), record)


@dataclass
class MfgSolution:
    model: MfgModel
    control: ControlField
    paths: PathEnsemble
    init: np.ndarray
    interfaces: list[DecouplingField]
    records: list[ContractionRecord]
    pieces: list[tuple[int, int]]
    interface_gaps: list[float]
    converged: bool = True

    @property
    def noise(self) -> NoiseEnsemble:
        return self.paths.noise

    @property
    def grid(self) -> TimeGrid:
        return self.paths.grid

    @property
    def measure_flow(self):
        return conditional_flow(self.paths)

    def flow_moments(self) -> tuple[np.ndarray, np.ndarray]:
        flow = self.paths.own_flow()
        return flow.mbar, flow.m2


def solve_mfg(
    model: MfgModel,
    disc: Discretization = Discretization(),
    config: SolverConfig = SolverConfig(),
    seed: int = 0,
    initial_guess: ControlField | None = None,
    noise: NoiseEnsemble | None = None,
    init: np.ndarray | None = None,
) -> MfgSolution:
    """Equilibrium control on ``[0, horizon]`` by backward continuation."""
    grid = disc.grid(model.horizon)
    basis = disc.basis
    if noise is None:
        noise = sample_noise(disc.n_common, disc.n_particles, grid, seed, config.workers)
    if init is None:
        init = sample_initial(model.initial, noise.n_common, noise.n_particles, seed, config.workers)
    sig, sigt = model.sigma, model.sigma_tilde
    K = grid.steps
    guess = None if initial_guess is None else initial_guess.in_basis(basis.features)

    # clouds for the backward pass: zero control from the true initial law
    provisional = propagate(ControlField.zero(grid, basis.features), init, noise, sig, sigt,
                            workers=config.workers)

    records: list[ContractionRecord] = []
    backward: list[tuple[int, int, IntervalResult, TerminalSpec]] = []
    terminal: TerminalSpec = model.cost
    tau, length = K, K
    while tau > 0:
        s = max(0, tau - length)
        eta = init if s == 0 else provisional.X[s]
        try:
            res = solve_interval(eta, terminal, noise.slice(s, tau), sig, sigt, basis, config,
                                 None if guess is None else guess.restrict(s, tau))
        except SplitRequired as exc:
            records.append(exc.record)
            length = (tau - s) // 2
            log.info("splitting [%.4g, %.4g]", grid.times[s], grid.times[tau])
            if length < 1:
                raise IntervalUnderflow(
                    f"interval at t={grid.times[tau]:.4g} shrank below one step; "
                    f"last ratios {exc.record.ratios[-5:]}") from exc
            continue
        records.append(res.record)
        backward.insert(0, (s, tau, res, terminal))
        terminal = res.field
        tau = s

    # forward sweep from the realized clouds
    pieces, controls, fields, gaps = [], [], [], []
    cloud = init
    for idx, (s, tau, res, term) in enumerate(backward):
        if s != 0:
            res = solve_interval(cloud, term, noise.slice(s, tau), sig, sigt, basis, config,
                                 res.control, phase="forward")
            records.append(res.record)
        controls.append(res.control)
        pieces.append((s, tau))
        if isinstance(term, DecouplingField):
            fields.append(term)
        seg = propagate(res.control, cloud, noise.slice(s, tau), sig, sigt, workers=config.workers)
        cloud = seg.X[-1]

    control = concatenate(controls, grid)
    paths = propagate(control, init, noise, sig, sigt, workers=config.workers)

    flow = paths.own_flow()
    for (s, tau), right in zip(pieces[1:], controls[1:]):
        u = next(f for f in fields if np.isclose(f.interface_time, grid.times[s]))
        y_right = -right.value(0, paths.X[s], flow.mbar[s], flow.m2[s])
        gaps.append(float(np.max(np.abs(u.evaluate(paths.X[s], flow.mbar[s], flow.m2[s]) - y_right))))
    return MfgSolution(model, control, paths, init, fields, records, pieces, gaps)


@dataclass
class UniquenessReport:
    max_distance: float
    relative: float
    converged: list[bool]
    distances: dict[str, float]

    def to_dict(self) -> dict:
        return {"max_distance": self.max_distance, "relative": self.relative,
                "converged": self.converged, "pairwise": self.distances}


def uniqueness_probe(
    model: MfgModel,
    disc: Discretization = Discretization(),
    config: SolverConfig = SolverConfig(),
    seed: int = 0,
    starts: Sequence[float | ControlField] = (0.0, 1.0, -1.0),
) -> UniquenessReport:
    """Solve from several initial guesses on one noise ensemble and compare."""
    if len(starts) < 2:
        raise ValueError("need at least two starts")
    grid = disc.grid(model.horizon)
    noise = sample_noise(disc.n_common, disc.n_particles, grid, seed, config.workers)
    init = sample_initial(model.initial, disc.n_common, disc.n_particles, seed, config.workers)
    sols = []
    for st in starts:
        guess = (ControlField.constant(grid, float(st), disc.basis.features)
                 if not isinstance(st, ControlField) else st)
        try:
            sols.append(solve_mfg(model, disc, config, seed, guess, noise, init))
        except (SplitRequired, IntervalUnderflow) as exc:
            log.warning("start %r did not converge: %s", st, exc)
            sols.append(None)
    ok = [s for s in sols if s is not None]
    dists: dict[str, float] = {}
    worst = 0.0
    for (i, a), (j, b) in itertools.combinations(enumerate(sols), 2):
        if a is None or b is None:
            continue
        d = h2_distance(a.control, b.control, a.paths)
        dists[f"{i}-{j}"] = d
        worst = max(worst, d)
    # same scale as the Picard stopping rule, so a vanishing control does not blow up the ratio
    norm = max(h2_norm(ok[0].control, ok[0].paths), 1.0) if ok else float("nan")
    return UniquenessReport(worst, worst / norm, [s is not None for s in sols], dists)
