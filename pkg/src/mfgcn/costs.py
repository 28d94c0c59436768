"""Terminal cost families and randomized checks of their structural conditions.

Each family exposes ``g(x, m)`` and its x-derivative ``gx(x, m)`` (both
vectorized in ``x`` for a single measure ``m``) together with a declared
Lipschitz constant ``C_g`` bounding ``gx`` in ``x`` and, under W2, in ``m``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterator

import numpy as np

from .measures import EmpiricalMeasure, from_samples, wasserstein2

ASSUMPTIONS = ("A1", "A2", "A3", "A4", "LasryLions")
VIOLATION_TOL = 1e-9


@dataclass(frozen=True)
class ScalarMap:
    """A real function with a declared Lipschitz bound."""

    fn: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    name: str = "custom"

    def __call__(self, y):
        return self.fn(y)

    @classmethod
    def linear(cls, slope: float, intercept: float = 0.0) -> "ScalarMap":
        return cls(lambda y: slope * np.asarray(y) + intercept, abs(slope),
                   f"linear({slope},{intercept})")

    @classmethod
    def tanh(cls, scale: float) -> "ScalarMap":
        return cls(lambda y: scale * np.tanh(np.asarray(y)), abs(scale), f"tanh({scale})")


def _zero_functional(m: EmpiricalMeasure) -> float:
    return 0.0


class TerminalCost:
    """Base class; subclasses implement ``g``, ``gx`` and ``lipschitz``."""

    name = "terminal"

    @property
    def lipschitz(self) -> float:
        raise NotImplementedError

    def g(self, x, m: EmpiricalMeasure) -> np.ndarray:
        raise NotImplementedError

    def gx(self, x, m: EmpiricalMeasure) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> dict[str, Any]:
        return {}

    def describe(self) -> dict[str, Any]:
        return {"family": self.name, "params": self.params(), "C_g": self.lipschitz}

    # Solver hot path: evaluate per scenario on the cloud's own measure.
    def gx_clouds(self, x: np.ndarray, clouds: np.ndarray) -> np.ndarray:
        """``gx(x[i, j], m_i)`` where ``m_i`` is the uniform measure on ``clouds[i]``."""
        out = np.empty_like(x, dtype=np.float64)
        for i in range(x.shape[0]):
            out[i] = self.gx(x[i], from_samples(clouds[i]))
        return out

    def g_clouds(self, x: np.ndarray, clouds: np.ndarray) -> np.ndarray:
        out = np.empty_like(x, dtype=np.float64)
        for i in range(x.shape[0]):
            out[i] = self.g(x[i], from_samples(clouds[i]))
        return out


@dataclass(frozen=True)
class Quadratic(TerminalCost):
    """``A x^2 + x * int psi dm + F(m)``."""

    A: float
    psi: ScalarMap = field(default_factory=lambda: ScalarMap.linear(0.0))
    F: Callable[[EmpiricalMeasure], float] = _zero_functional

    name = "quadratic"

    @property
    def lipschitz(self) -> float:
        return max(2.0 * abs(self.A), self.psi.lipschitz)

    def _psi_bar(self, m: EmpiricalMeasure) -> float:
        return float(np.dot(m.weights, self.psi(m.locations)))

    def g(self, x, m):
        x = np.asarray(x, dtype=np.float64)
        return self.A * x**2 + x * self._psi_bar(m) + self.F(m)

    def gx(self, x, m):
        x = np.asarray(x, dtype=np.float64)
        return 2.0 * self.A * x + self._psi_bar(m)

    def params(self):
        return {"A": self.A, "psi": self.psi.name}


@dataclass(frozen=True)
class TrackMean(TerminalCost):
    """``q x^2 + qbar (x - s * mean(m))^2``."""

    q: float
    qbar: float
    s: float

    name = "track_mean"

    def __post_init__(self):
        if min(self.q, self.qbar, self.s) < 0:
            raise ValueError("q, qbar and s must be non-negative")

    @property
    def lipschitz(self) -> float:
        return 2.0 * (self.q + self.qbar) * (1.0 + self.s)

    def g(self, x, m):
        x = np.asarray(x, dtype=np.float64)
        return self.q * x**2 + self.qbar * (x - self.s * m.mean) ** 2

    def gx(self, x, m):
        x = np.asarray(x, dtype=np.float64)
        return 2.0 * (self.q + self.qbar) * x - 2.0 * self.qbar * self.s * m.mean

    def gx_clouds(self, x, clouds):
        mbar = clouds.mean(axis=1, keepdims=True)
        return 2.0 * (self.q + self.qbar) * x - 2.0 * self.qbar * self.s * mbar

    def g_clouds(self, x, clouds):
        mbar = clouds.mean(axis=1, keepdims=True)
        return self.q * x**2 + self.qbar * (x - self.s * mbar) ** 2

    def params(self):
        return {"q": self.q, "qbar": self.qbar, "s": self.s}


@dataclass(frozen=True)
class MeanSquareDistance(TerminalCost):
    """``int (x - y)^2 dm(y)``."""

    name = "mean_square_distance"

    @property
    def lipschitz(self) -> float:
        return 2.0

    def g(self, x, m):
        x = np.asarray(x, dtype=np.float64)
        return x**2 - 2.0 * x * m.mean + m.second_moment

    def gx(self, x, m):
        return 2.0 * np.asarray(x, dtype=np.float64) - 2.0 * m.mean


@dataclass(frozen=True)
class StateOnlyQuadratic(TerminalCost):
    """``a x^2``; no dependence on the measure."""

    a: float

    name = "state_only_quadratic"

    @property
    def lipschitz(self) -> float:
        return 2.0 * abs(self.a)

    def g(self, x, m=None):
        return self.a * np.asarray(x, dtype=np.float64) ** 2

    def gx(self, x, m=None):
        return 2.0 * self.a * np.asarray(x, dtype=np.float64)

    def gx_clouds(self, x, clouds):
        return 2.0 * self.a * x

    def g_clouds(self, x, clouds):
        return self.a * x**2

    def params(self):
        return {"a": self.a}


@dataclass(frozen=True)
class Custom(TerminalCost):
    """User-supplied ``g``/``gx``; ``C_g`` is taken on trust."""

    g_fn: Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]
    gx_fn: Callable[[np.ndarray, EmpiricalMeasure], np.ndarray]
    C_g: float
    label: str = "custom"

    name = "custom"

    @property
    def lipschitz(self) -> float:
        return self.C_g

    def g(self, x, m):
        return np.asarray(self.g_fn(np.asarray(x, dtype=np.float64), m), dtype=np.float64)

    def gx(self, x, m):
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(np.asarray(self.gx_fn(x, m), dtype=np.float64), x.shape)

    def params(self):
        return {"label": self.label}


def zero_cost() -> Custom:
    """``g == 0``; handy degenerate model."""
    return Custom(lambda x, m: np.zeros_like(x), lambda x, m: np.zeros_like(x), 0.0, "zero")


def eval_g(cost: TerminalCost, x: float, m: EmpiricalMeasure) -> float:
    return float(cost.g(np.float64(x), m))


def eval_gx(cost: TerminalCost, x: float, m: EmpiricalMeasure) -> float:
    return float(cost.gx(np.float64(x), m))


# ---------------------------------------------------------------------------
# randomized probes

@dataclass
class AssumptionReport:
    assumption: str
    worst_violation: float
    witness: dict[str, Any] | None
    trials: int

    @property
    def passed(self) -> bool:
        return self.worst_violation == 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "assumption": self.assumption,
            "worst_violation": self.worst_violation,
            "passed": self.passed,
            "witness": self.witness,
            "trials": self.trials,
        }


class _Prober:
    """Draws probe inputs over ``[-radius, radius]``."""

    def __init__(self, rng: np.random.Generator, radius: float):
        self.rng = rng
        self.R = radius

    def point(self) -> float:
        return float(self.rng.uniform(-self.R, self.R))

    def cloud(self, n: int | None = None) -> np.ndarray:
        if n is None:
            n = int(self.rng.integers(2, 33))
        return self.rng.uniform(-self.R, self.R, size=n)

    def pair(self, t: int, same_size: bool) -> tuple[str, np.ndarray, np.ndarray]:
        """Cycle through independent clouds, translates, and Dirac pairs."""
        kind = ("random", "translate", "dirac")[t % 3]
        if kind == "random":
            a = self.cloud()
            b = self.cloud(a.size if same_size else None)
        elif kind == "translate":
            a = self.cloud()
            b = a + self.rng.uniform(-self.R, self.R)
        else:
            a = np.array([self.point()])
            b = np.array([self.point()])
        return kind, a, b


def _couplings(rng, a: np.ndarray, b: np.ndarray, n_random: int = 8) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
    # equal-size uniform clouds: couplings are permutations
    yield "quantile", np.sort(a), np.sort(b)
    if a.size > 1:
        for _ in range(n_random):
            yield "permutation", a, b[rng.permutation(b.size)]


def check_assumption(
    cost: TerminalCost,
    which: str,
    trials: int,
    rng_seed: int,
    radius: float = 10.0,
) -> AssumptionReport:
    """Search for violations of one structural condition by random probing.

    ``worst_violation`` is the largest violation found above ``1e-9``
    (0.0 when none was found).
    """
    if which not in ASSUMPTIONS:
        raise ValueError(f"unknown assumption tag {which!r}; expected one of {ASSUMPTIONS}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    probe = _Prober(rng, radius)
    C = cost.lipschitz
    worst, witness = 0.0, None

    def consider(v: float, info: dict[str, Any]) -> None:
        nonlocal worst, witness
        if v > VIOLATION_TOL and v > worst:
            worst, witness = float(v), info

    for t in range(trials):
        if which in ("A1", "A2"):
            m = from_samples(probe.cloud())
            x, xp = probe.point(), probe.point()
            d = float(cost.gx(x, m) - cost.gx(xp, m))
            if which == "A1":
                v = abs(d) - C * abs(x - xp)
            else:
                v = -d * (x - xp)
            consider(v, {"x": x, "x_prime": xp, "m": m.locations.tolist()})
        elif which == "A3":
            kind, a, b = probe.pair(t, same_size=False)
            m, mp = from_samples(a), from_samples(b)
            x = probe.point()
            v = abs(float(cost.gx(x, m) - cost.gx(x, mp))) - C * wasserstein2(m, mp)
            consider(v, {"kind": kind, "x": x, "m": a.tolist(), "m_prime": b.tolist()})
        elif which == "A4":
            kind, a, b = probe.pair(t, same_size=True)
            m, mp = from_samples(a), from_samples(b)
            for ckind, xi, xip in _couplings(rng, a, b):
                val = float(np.mean((cost.gx(xi, m) - cost.gx(xip, mp)) * (xi - xip)))
                consider(-val, {"kind": kind, "coupling": ckind,
                                "xi": xi.tolist(), "xi_prime": xip.tolist()})
        else:  # LasryLions
            kind, a, b = probe.pair(t, same_size=False)
            m, mp = from_samples(a), from_samples(b)
            val = (np.dot(m.weights, cost.g(a, m)) + np.dot(mp.weights, cost.g(b, mp))
                   - np.dot(m.weights, cost.g(a, mp)) - np.dot(mp.weights, cost.g(b, m)))
            consider(-float(val), {"kind": kind, "m": a.tolist(), "m_prime": b.tolist()})
    return AssumptionReport(which, worst, witness, trials)


def check_all(cost: TerminalCost, trials: int, rng_seed: int, radius: float = 10.0) -> dict[str, AssumptionReport]:
    return {tag: check_assumption(cost, tag, trials, rng_seed + i, radius)
            for i, tag in enumerate(ASSUMPTIONS)}


def lipschitz_estimates(cost: TerminalCost, trials: int, rng_seed: int, radius: float = 10.0) -> tuple[float, float]:
    """Empirical (x-quotient, W2-quotient) maxima of ``gx``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng_seed)
    probe = _Prober(rng, radius)
    lx = lm = 0.0
    for t in range(trials):
        m = from_samples(probe.cloud())
        x, xp = probe.point(), probe.point()
        if x != xp:
            lx = max(lx, abs(float(cost.gx(x, m) - cost.gx(xp, m))) / abs(x - xp))
        _, a, b = probe.pair(t, same_size=False)
        ma, mb = from_samples(a), from_samples(b)
        w = wasserstein2(ma, mb)
        if w > 1e-12:
            lm = max(lm, abs(float(cost.gx(x, ma) - cost.gx(x, mb))) / w)
    return lx, lm


def lipschitz_estimate(cost: TerminalCost, trials: int, rng_seed: int, radius: float = 10.0) -> float:
    return max(lipschitz_estimates(cost, trials, rng_seed, radius))


# ---------------------------------------------------------------------------
# config declarations

def _psi_from_spec(spec: dict[str, Any] | None) -> ScalarMap:
    if spec is None:
        return ScalarMap.linear(0.0)
    kind = spec.get("kind", "linear")
    if kind == "linear":
        return ScalarMap.linear(float(spec.get("slope", 0.0)), float(spec.get("intercept", 0.0)))
    if kind == "tanh":
        return ScalarMap.tanh(float(spec["scale"]))
    raise ValueError(f"unknown psi kind {kind!r}")


def _functional_from_spec(spec: dict[str, Any] | None) -> Callable[[EmpiricalMeasure], float]:
    if spec is None or spec.get("kind", "zero") == "zero":
        return _zero_functional
    if spec["kind"] == "mean":
        w = float(spec.get("weight", 1.0))
        return lambda m: w * m.mean
    raise ValueError(f"unknown F kind {spec['kind']!r}")


def cost_from_spec(family: str, params: dict[str, Any]) -> TerminalCost:
    """Build a cost family from a config name and parameter map."""
    if family == "track_mean":
        return TrackMean(float(params["q"]), float(params["qbar"]), float(params["s"]))
    if family == "quadratic":
        return Quadratic(float(params["A"]), _psi_from_spec(params.get("psi")),
                         _functional_from_spec(params.get("F")))
    if family == "mean_square_distance":
        return MeanSquareDistance()
    if family == "state_only_quadratic":
        return StateOnlyQuadratic(float(params["a"]))
    if family == "zero":
        return zero_cost()
    raise ValueError(f"unknown cost family {family!r}")


__all__ = [
    "ASSUMPTIONS", "AssumptionReport", "Custom", "MeanSquareDistance", "Quadratic",
    "ScalarMap", "StateOnlyQuadratic", "TerminalCost", "TrackMean", "check_all",
    "check_assumption", "cost_from_spec", "eval_g", "eval_gx", "lipschitz_estimate",
    "lipschitz_estimates", "zero_cost",
]
