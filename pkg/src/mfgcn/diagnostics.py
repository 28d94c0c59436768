"""Costs, optimality certificates and the linear-quadratic oracle.

Monte-Carlo errors are computed with the common-noise scenario as the
sampling unit: particles of one scenario share the common path and the
measure, so they are not independent draws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conditional import RegressionBasis
from .costs import MeanSquareDistance, StateOnlyQuadratic, TerminalCost, TrackMean
from .fbsde import CostTerminal, solve_inner
from .measures import EmpiricalMeasure, wasserstein2_samples
from .mfg import ContractionRecord, MfgSolution, SplitRequired, solve_interval, solve_mfg
from .model import Discretization, MfgModel, SolverConfig
from .paths import (
    ControlField,
    PathEnsemble,
    TimeGrid,
    h2_distance,
    h2_norm,
    propagate,
    sample_initial,
    sample_noise,
)

__all__ = [
    "CostReport", "ExploitabilityReport", "apriori_ratio", "contraction_profile", "LqOracle", "OracleDeviation", "ReductionReport",
    "SmpGap", "evaluate_cost", "exploitability", "flow_spread", "lq_oracle", "oracle_deviation",
    "random_perturbations",
    "oracle_for", "pathwise_cost", "reduction_check_sigma_tilde_zero", "smp_gap",
]


def _clustered(samples: np.ndarray) -> tuple[float, float]:
    """(mean, stderr) of a (scenario, particle) array, scenarios as the unit."""
    per = samples.mean(axis=1)
    mean = float(per.mean())
    if per.size < 2:
        return mean, 0.0
    return mean, float(per.std(ddof=1) / math.sqrt(per.size))


@dataclass(frozen=True)
class CostReport:
    J: float
    stderr: float
    n_samples: int

    def __post_init__(self):
        if not math.isfinite(self.J):
            raise FloatingPointError("non-finite cost")
        if self.stderr < 0:
            raise ValueError("stderr must be >= 0")

    def to_dict(self) -> dict:
        return {"J": self.J, "stderr": self.stderr, "n_samples": self.n_samples}


def pathwise_cost(
    control: ControlField,
    cost: TerminalCost,
    reference: PathEnsemble,
    init: np.ndarray,
) -> tuple[np.ndarray, PathEnsemble]:
    """Per-particle ``sum_k alpha_k^2 dt / 2 + g(X_T, m_T)`` against the frozen
    population of ``reference``; also returns the paths driven by ``control``."""
    flow = reference.own_flow()
    paths = propagate(control, init, reference.noise, reference.sigma, reference.sigma_tilde,
                      feature_flow=flow)
    running = np.zeros_like(init, dtype=np.float64)
    for k in range(paths.grid.steps):
        a = control.value(k, paths.X[k], flow.mbar[k], flow.m2[k])
        running += a * a
    running *= 0.5 * paths.grid.dt
    return running + cost.g_clouds(paths.X[-1], reference.X[-1]), paths


def evaluate_cost(
    control: ControlField,
    model: MfgModel,
    reference: PathEnsemble,
    init: np.ndarray,
) -> CostReport:
    """``J(alpha | m)`` with ``m`` the conditional flow of ``reference``, held fixed."""
    per, _ = pathwise_cost(control, model.cost, reference, init)
    J, se = _clustered(per)
    return CostReport(J, se, per.size)


@dataclass(frozen=True)
class SmpGap:
    """``J(beta) - J(alpha) - |alpha - beta|^2 / 2`` with its standard error."""

    gap: float
    stderr: float
    J_alpha: float
    J_beta: float
    distance: float

    @property
    def certified(self) -> bool:
        return self.gap >= -3.0 * self.stderr

    def to_dict(self) -> dict:
        return {"gap": self.gap, "stderr": self.stderr, "J_alpha": self.J_alpha,
                "J_beta": self.J_beta, "distance": self.distance, "certified": self.certified}


def smp_gap(
    alpha: ControlField,
    beta: ControlField,
    model: MfgModel,
    reference: PathEnsemble,
    init: np.ndarray,
) -> SmpGap:
    """Optimality gap of ``alpha`` against ``beta`` under a frozen flow.

    Both controls are run on the same noise; the distance term compares the
    two control processes along their own paths.  Differences are paired per
    particle before the standard error is taken.
    """
    if alpha.grid.steps != beta.grid.steps:
        raise ValueError("controls must share a grid")
    flow = reference.own_flow()
    ca, pa = pathwise_cost(alpha, model.cost, reference, init)
    cb, pb = pathwise_cost(beta, model.cost, reference, init)
    d2 = np.zeros_like(ca)
    for k in range(pa.grid.steps):
        va = alpha.value(k, pa.X[k], flow.mbar[k], flow.m2[k])
        vb = beta.value(k, pb.X[k], flow.mbar[k], flow.m2[k])
        d2 += (va - vb) ** 2
    d2 *= pa.grid.dt
    gap, se = _clustered(cb - ca - 0.5 * d2)
    return SmpGap(gap, se, float(ca.mean()), float(cb.mean()), math.sqrt(float(d2.mean())))


def random_perturbations(
    control: ControlField,
    n: int,
    seed: int,
    scale: float = 0.25,
) -> list[ControlField]:
    """``n`` controls ``alpha + delta`` with ``delta`` a random element of the
    basis whose coefficients oscillate in time around a random level."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4,)))
    t = control.grid.times
    phase_t = 2.0 * np.pi * (t - t[0]) / control.grid.length
    out = []
    for _ in range(n):
        level = rng.uniform(-scale, scale, size=len(control.features))
        wobble = rng.uniform(0.0, 0.5)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        shape = 1.0 + wobble * np.sin(phase_t + phase)
        out.append(ControlField(control.grid, control.features,
                                control.coeffs + shape[:, None] * level[None, :]))
    return out


@dataclass(frozen=True)
class ExploitabilityReport:
    value: float
    stderr: float
    J: float
    J_best_response: float
    inner_converged: bool

    def within(self, rel: float = 1e-2) -> bool:
        return self.value <= max(rel * abs(self.J), 3.0 * self.stderr)

    def to_dict(self) -> dict:
        return {"exploitability": self.value, "stderr": self.stderr, "J": self.J,
                "J_best_response": self.J_best_response,
                "inner_converged": self.inner_converged, "within_tolerance": self.within()}


def exploitability(
    solution: MfgSolution,
    basis: RegressionBasis | None = None,
    config: SolverConfig = SolverConfig(),
    control: ControlField | None = None,
) -> ExploitabilityReport:
    """Cost improvement available by best-responding to the solution's flow.

    ``control`` defaults to the equilibrium control; passing another control
    measures its deviation incentive against the same frozen flow.  The best
    response is solved from the zero control.
    """
    ref = solution.paths
    model = solution.model
    alpha = solution.control if control is None else control
    basis = RegressionBasis(alpha.features) if basis is None else basis
    br = solve_inner(
        CostTerminal(model.cost, ref.X[-1]), solution.init, ref.noise, model.sigma,
        model.sigma_tilde, basis, feature_flow=ref.own_flow(), damping=config.inner_damping,
        tol=config.inner_tol, max_iter=config.inner_max_iter, workers=config.workers)
    ca, _ = pathwise_cost(alpha, model.cost, ref, solution.init)
    cb, _ = pathwise_cost(br.control, model.cost, ref, solution.init)
    value, se = _clustered(ca - cb)
    return ExploitabilityReport(value, se, float(ca.mean()), float(cb.mean()), br.converged)


@dataclass(frozen=True)
class LqOracle:
    """Equilibrium adjoint ``Y_t = a_t x + b_t mbar_t`` on a time grid."""

    times: np.ndarray
    a: np.ndarray
    b: np.ndarray
    params: tuple[float, float, float, float]

    @property
    def c(self) -> np.ndarray:
        return self.a + self.b

    def control(self, grid: TimeGrid, features=("1", "x", "mbar")) -> ControlField:
        if grid.steps + 1 != self.times.size or not np.allclose(grid.times, self.times):
            raise ValueError("oracle grid does not match")
        coeffs = np.column_stack([np.zeros_like(self.a), -self.a, -self.b])
        return ControlField(grid, ("1", "x", "mbar"), coeffs).in_basis(features)

    def to_rows(self) -> list[tuple[float, float, float, float]]:
        return [(float(t), float(a), float(b), float(a + b))
                for t, a, b in zip(self.times, self.a, self.b)]


def _riccati(end: float, tau: np.ndarray) -> np.ndarray:
    return end / (1.0 + end * tau)


def lq_oracle(q: float, qbar: float, s: float, T: float, grid: TimeGrid | None = None) -> LqOracle:
    """Closed-form feedback for ``g = q x^2 + qbar (x - s mbar)^2``.

    ``a`` solves ``a' = a^2`` from ``2(q + qbar)``; ``c = a + b`` the same
    equation from ``2(q + qbar(1 - s))``.
    """
    if min(q, qbar, s) < 0:
        raise ValueError("q, qbar and s must be non-negative")
    if T <= 0:
        raise ValueError("horizon must be positive")
    aT = 2.0 * (q + qbar)
    cT = 2.0 * (q + qbar * (1.0 - s))
    if cT < 0:
        raise ValueError("need q + qbar >= s * qbar")
    grid = TimeGrid(0.0, T, 1000) if grid is None else grid
    if not np.isclose(grid.t1, T):
        raise ValueError("grid must end at the horizon")
    tau = T - grid.times
    a = _riccati(aT, tau)
    c = _riccati(cT, tau)
    return LqOracle(grid.times, a, c - a, (float(q), float(qbar), float(s), float(T)))


def oracle_for(cost: TerminalCost, T: float, grid: TimeGrid | None = None) -> LqOracle | None:
    """The oracle matching ``cost`` if it has one, else ``None``."""
    if isinstance(cost, TrackMean):
        return lq_oracle(cost.q, cost.qbar, cost.s, T, grid)
    if isinstance(cost, MeanSquareDistance):
        return lq_oracle(0.0, 1.0, 1.0, T, grid)
    if isinstance(cost, StateOnlyQuadratic) and cost.a >= 0:
        return lq_oracle(cost.a, 0.0, 0.0, T, grid)
    return None


@dataclass(frozen=True)
class OracleDeviation:
    a0: float
    b0: float
    a0_oracle: float
    b0_oracle: float
    rel_a0: float
    rel_b0: float
    h2_relative: float

    def within(self, rel: float = 0.05) -> bool:
        return max(self.rel_a0, self.rel_b0, self.h2_relative) <= rel

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["within_5pct"] = self.within()
        return d


def _rel(x: float, ref: float) -> float:
    if ref == 0.0:
        return float(abs(x))
    return float(abs(x - ref) / abs(ref))


def oracle_deviation(solution: MfgSolution, oracle: LqOracle) -> OracleDeviation:
    """Fitted vs oracle ``(a_0, b_0)`` and the relative H^2 gap of the controls.

    ``a_0``/``b_0`` are the negated ``x``/``mbar`` coefficients of the control
    at the first node.  A zero oracle coefficient is compared in absolute terms.
    """
    ctl = solution.control.in_basis(("1", "x", "mbar"))
    a0, b0 = -float(ctl.coeffs[0, 1]), -float(ctl.coeffs[0, 2])
    ref = oracle.control(solution.grid, solution.control.features)
    dist = h2_distance(solution.control, ref, solution.paths)
    norm = h2_norm(ref, solution.paths)
    h2_rel = dist / norm if norm > 0 else dist
    return OracleDeviation(a0, b0, float(oracle.a[0]), float(oracle.b[0]),
                           _rel(a0, oracle.a[0]), _rel(b0, oracle.b[0]), h2_rel)


@dataclass(frozen=True)
class ReductionReport:
    """Cross-scenario spread of the conditional flows without common noise."""

    w2_spread: float
    mc_scale: float
    ratio: float
    worst_node: int
    oracle: OracleDeviation | None

    def to_dict(self) -> dict:
        return {"w2_spread": self.w2_spread, "mc_scale": self.mc_scale, "ratio": self.ratio,
                "worst_node": self.worst_node,
                "oracle": None if self.oracle is None else self.oracle.to_dict()}


def flow_spread(paths: PathEnsemble) -> tuple[float, float, int]:
    """Largest ratio over nodes of the RMS (over scenarios) W2 distance between
    each scenario's cloud and the pooled cloud, to ``std / sqrt(n_particles)``.

    Returns (spread, MC scale, node) at the worst node.
    """
    n = paths.n_particles
    best = (0.0, 1.0, 0)
    worst_ratio = -1.0
    for k in range(paths.grid.steps + 1):
        clouds = paths.X[k]
        pooled = np.sort(clouds.reshape(-1))
        # the pooled quantiles at the particle ranks
        idx = ((np.arange(n) + 0.5) * pooled.size / n).astype(np.int64)
        ref = pooled[idx]
        w = [wasserstein2_samples(c, ref) for c in clouds]
        spread = float(np.sqrt(np.mean(np.square(w))))
        scale = float(pooled.std()) / math.sqrt(n)
        ratio = spread / scale if scale > 0 else (0.0 if spread == 0 else math.inf)
        if ratio > worst_ratio:
            worst_ratio = ratio
            best = (spread, scale, k)
    return best


def reduction_check_sigma_tilde_zero(
    model: MfgModel,
    disc: Discretization = Discretization(),
    config: SolverConfig = SolverConfig(),
    seed: int = 0,
    solution: MfgSolution | None = None,
) -> ReductionReport:
    """Solve without common noise and measure how far the scenario flows differ."""
    if model.sigma_tilde != 0:
        raise ValueError("reduction check needs sigma_tilde = 0")
    sol = solve_mfg(model, disc, config, seed) if solution is None else solution
    spread, scale, k = flow_spread(sol.paths)
    oracle = oracle_for(model.cost, model.horizon, sol.grid)
    dev = None if oracle is None else oracle_deviation(sol, oracle)
    ratio = spread / scale if scale > 0 else 0.0
    return ReductionReport(spread, scale, ratio, k, dev)


def contraction_profile(
    model: MfgModel,
    lengths,
    disc: Discretization = Discretization(),
    config: SolverConfig = SolverConfig(damping=1.0),
    seed: int = 0,
) -> dict[float, ContractionRecord]:
    """Picard records on the terminal intervals ``[T - L, T]`` for each length.

    Each interval starts from a fresh draw of the initial law and runs
    without splitting, so the observed step ratios measure the map itself.
    """
    out: dict[float, ContractionRecord] = {}
    grid = disc.grid(model.horizon)
    noise = sample_noise(disc.n_common, disc.n_particles, grid, seed, config.workers)
    init = sample_initial(model.initial, disc.n_common, disc.n_particles, seed, config.workers)
    no_split = config.with_(split_ratio=math.inf)
    for L in lengths:
        n = int(round(L / grid.dt))
        if n < 1 or n > grid.steps:
            raise ValueError(f"interval length {L} does not fit the grid")
        try:
            res = solve_interval(init, model.cost, noise.slice(grid.steps - n, grid.steps),
                                 model.sigma, model.sigma_tilde, disc.basis, no_split)
            out[float(L)] = res.record
        except SplitRequired as exc:
            out[float(L)] = exc.record
    return out


def apriori_ratio(solution: MfgSolution) -> float:
    """``sup_t max(E X_t^2, E Y_t^2)`` over ``E xi^2 + g_x(0, delta_0)^2 + sigma^2 + sigma~^2``.

    ``Y`` is the negated control along the solution paths.
    """
    p = solution.paths
    flow = p.own_flow()
    model = solution.model
    sup = 0.0
    for k in range(p.grid.steps + 1):
        y = solution.control.value(k, p.X[k], flow.mbar[k], flow.m2[k])
        sup = max(sup, float(np.mean(p.X[k] ** 2)), float(np.mean(y * y)))
    gx0 = float(model.cost.gx(np.zeros(1), EmpiricalMeasure.dirac(0.0))[0])
    base = model.initial.second_moment + gx0**2 + model.sigma**2 + model.sigma_tilde**2
    return sup / base if base > 0 else (0.0 if sup == 0 else math.inf)
