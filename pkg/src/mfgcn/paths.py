"""Time grids, seeded Brownian ensembles and Euler propagation of the state.

All path arrays are stored time-major: ``X[k, i, j]`` is particle ``j`` of
common-noise scenario ``i`` at node ``k``.  Each scenario owns independent
Philox streams keyed on ``(seed, stream, scenario)``, so results do not depend
on how many workers generate them, and enlarging ``n_particles`` only appends
particles (common increments are untouched).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import features as feat
from .measures import EmpiricalMeasure, from_samples

_IDIO, _COMMON, _INIT = 1, 2, 3


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    steps: int

    def __post_init__(self):
        if not self.t0 < self.t1:
            raise ValueError("TimeGrid needs t0 < t1")
        if self.steps < 1:
            raise ValueError("TimeGrid needs at least one step")

    @property
    def dt(self) -> float:
        return (self.t1 - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def length(self) -> float:
        return self.t1 - self.t0

    def sub(self, k0: int, k1: int) -> "TimeGrid":
        """Sub-grid spanning nodes ``k0..k1`` (same spacing)."""
        if not 0 <= k0 < k1 <= self.steps:
            raise ValueError(f"bad node range {k0}..{k1} for {self.steps} steps")
        t1 = self.t1 if k1 == self.steps else self.t0 + k1 * self.dt
        return TimeGrid(self.t0 + k0 * self.dt, t1, k1 - k0)

    @classmethod
    def uniform(cls, horizon: float, steps_per_unit: int = 100) -> "TimeGrid":
        return cls(0.0, horizon, max(1, int(round(horizon * steps_per_unit))))


def _stream(seed: int, kind: int, scenario: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(kind, scenario))
    return np.random.Generator(np.random.Philox(ss))


def _map_scenarios(fn, n: int, workers: int) -> list:
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


@dataclass(frozen=True, eq=False)
class NoiseEnsemble:
    n_common: int
    n_particles: int
    grid: TimeGrid
    dW: np.ndarray          # (steps, n_common, n_particles)
    dW_common: np.ndarray   # (steps, n_common)
    seed: int

    def slice(self, k0: int, k1: int) -> "NoiseEnsemble":
        """Increments for nodes ``k0..k1`` (views, no copy)."""
        return NoiseEnsemble(self.n_common, self.n_particles, self.grid.sub(k0, k1),
                             self.dW[k0:k1], self.dW_common[k0:k1], self.seed)


def sample_noise(n_common: int, n_particles: int, grid: TimeGrid, seed: int, workers: int = 1) -> NoiseEnsemble:
    if n_common < 1 or n_particles < 1:
        raise ValueError("n_common and n_particles must be positive")
    sd = math.sqrt(grid.dt)
    dW = np.empty((grid.steps, n_common, n_particles))
    dWc = np.empty((grid.steps, n_common))

    def fill(i: int) -> None:
        dWc[:, i] = sd * _stream(seed, _COMMON, i).standard_normal(grid.steps)
        dW[:, i, :] = sd * _stream(seed, _IDIO, i).standard_normal((n_particles, grid.steps)).T

    _map_scenarios(fill, n_common, workers)
    return NoiseEnsemble(n_common, n_particles, grid, dW, dWc, seed)


@dataclass(frozen=True)
class InitialLaw:
    """Law of the initial state: ``dirac``, ``gaussian`` or ``uniform``."""

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.kind == "dirac":
            if len(self.params) != 1:
                raise ValueError("dirac takes (x0,)")
        elif self.kind == "gaussian":
            if len(self.params) != 2 or self.params[1] < 0:
                raise ValueError("gaussian takes (mean, std) with std >= 0")
        elif self.kind == "uniform":
            if len(self.params) != 2 or self.params[1] < self.params[0]:
                raise ValueError("uniform takes (a, b) with a <= b")
        else:
            raise ValueError(f"unknown initial law {self.kind!r}")

    @classmethod
    def dirac(cls, x0: float) -> "InitialLaw":
        return cls("dirac", (float(x0),))

    @classmethod
    def gaussian(cls, mean: float, std: float) -> "InitialLaw":
        return cls("gaussian", (float(mean), float(std)))

    @classmethod
    def uniform(cls, a: float, b: float) -> "InitialLaw":
        return cls("uniform", (float(a), float(b)))

    @property
    def second_moment(self) -> float:
        if self.kind == "dirac":
            return self.params[0] ** 2
        if self.kind == "gaussian":
            return self.params[0] ** 2 + self.params[1] ** 2
        a, b = self.params
        return (a * a + a * b + b * b) / 3.0


def sample_initial(law: InitialLaw, n_common: int, n_particles: int, seed: int, workers: int = 1) -> np.ndarray:
    """i.i.d. initial states, shape (n_common, n_particles)."""
    if n_common < 1 or n_particles < 1:
        raise ValueError("n_common and n_particles must be positive")
    out = np.empty((n_common, n_particles))

    def fill(i: int) -> None:
        if law.kind == "dirac":
            out[i] = law.params[0]
            return
        rng = _stream(seed, _INIT, i)
        if law.kind == "gaussian":
            out[i] = law.params[0] + law.params[1] * rng.standard_normal(n_particles)
        else:
            out[i] = rng.uniform(law.params[0], law.params[1], n_particles)

    _map_scenarios(fill, n_common, workers)
    return out


@dataclass(frozen=True, eq=False)
class ControlField:
    """Feedback control ``alpha(t_k, x, mbar, m2) = coeffs[k] . phi(x, mbar, m2)``."""

    grid: TimeGrid
    features: tuple[str, ...]
    coeffs: np.ndarray  # (steps + 1, n_features)

    def __post_init__(self):
        object.__setattr__(self, "features", feat.validate(self.features))
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.shape != (self.grid.steps + 1, len(self.features)):
            raise ValueError(f"coeffs shape {c.shape} does not match grid/features")
        if not np.all(np.isfinite(c)):
            raise ValueError("control coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zero(cls, grid: TimeGrid, features: Sequence[str] = feat.DEFAULT_BASIS) -> "ControlField":
        return cls(grid, tuple(features), np.zeros((grid.steps + 1, len(features))))

    @classmethod
    def constant(cls, grid: TimeGrid, value: float, features: Sequence[str] = feat.DEFAULT_BASIS) -> "ControlField":
        features = feat.validate(features)
        if "1" not in features:
            raise ValueError("constant control needs the '1' feature")
        c = np.zeros((grid.steps + 1, len(features)))
        c[:, features.index("1")] = value
        return cls(grid, features, c)

    def value(self, k: int, x: np.ndarray, mbar: np.ndarray, m2: np.ndarray) -> np.ndarray:
        return feat.evaluate(self.features, self.coeffs[k], x, mbar, m2)

    def blend(self, other: "ControlField", weight: float) -> "ControlField":
        """``(1 - weight) * self + weight * other`` coefficient-wise."""
        other = other.in_basis(self.features)
        return ControlField(self.grid, self.features, (1.0 - weight) * self.coeffs + weight * other.coeffs)

    def in_basis(self, features: Sequence[str]) -> "ControlField":
        """Re-express in a (super)set of features; missing ones get zero weight."""
        features = tuple(features)
        if features == self.features:
            return self
        missing = set(self.features) - set(features)
        if any(np.any(self.coeffs[:, self.features.index(f)] != 0) for f in missing):
            raise ValueError(f"cannot drop non-zero features {sorted(missing)}")
        c = np.zeros((self.grid.steps + 1, len(features)))
        for j, f in enumerate(features):
            if f in self.features:
                c[:, j] = self.coeffs[:, self.features.index(f)]
        return ControlField(self.grid, features, c)

    def restrict(self, k0: int, k1: int) -> "ControlField":
        return ControlField(self.grid.sub(k0, k1), self.features, self.coeffs[k0:k1 + 1])

    def to_dict(self) -> dict:
        return {
            "t0": self.grid.t0, "t1": self.grid.t1, "steps": self.grid.steps,
            "features": list(self.features),
            "coefficients": self.coeffs.tolist(),
        }


def concatenate(pieces: Sequence[ControlField], grid: TimeGrid) -> ControlField:
    """Glue interval controls end to end.

    An interface node's control acts on the step that follows it, so the right
    piece owns it.
    """
    features = pieces[0].features
    rows = [p.in_basis(features).coeffs[:-1] for p in pieces[:-1]]
    rows.append(pieces[-1].in_basis(features).coeffs)
    return ControlField(grid, features, np.concatenate(rows, axis=0))


@dataclass(frozen=True, eq=False)
class FeatureFlow:
    """Per (node, scenario) cloud moments plus their one-step noise increments."""

    mbar: np.ndarray        # (steps + 1, n_common)
    m2: np.ndarray          # (steps + 1, n_common)
    dmbar_mart: np.ndarray  # (steps, n_common)
    dm2_mart: np.ndarray    # (steps, n_common)

    def slice(self, k0: int, k1: int) -> "FeatureFlow":
        return FeatureFlow(self.mbar[k0:k1 + 1], self.m2[k0:k1 + 1],
                           self.dmbar_mart[k0:k1], self.dm2_mart[k0:k1])


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    X: np.ndarray  # (steps + 1, n_common, n_particles)
    grid: TimeGrid
    noise: NoiseEnsemble
    sigma: float
    sigma_tilde: float
    features_from: FeatureFlow | None = field(default=None)

    @property
    def n_common(self) -> int:
        return self.X.shape[1]

    @property
    def n_particles(self) -> int:
        return self.X.shape[2]

    def state_increment_noise(self, k: int) -> np.ndarray:
        return self.sigma * self.noise.dW[k] + self.sigma_tilde * self.noise.dW_common[k][:, None]

    def own_flow(self) -> FeatureFlow:
        """Moments of this ensemble's own clouds (computed once)."""
        cached = self.__dict__.get("_own_flow")
        if cached is not None:
            return cached
        mbar = self.X.mean(axis=2)
        m2 = (self.X * self.X).mean(axis=2)
        dW, dWc = self.noise.dW, self.noise.dW_common
        dmbar = self.sigma_tilde * dWc + self.sigma * dW.mean(axis=2)
        dm2 = (2.0 * mbar[:-1] * self.sigma_tilde * dWc
               + 2.0 * self.sigma * (self.X[:-1] * dW).mean(axis=2))
        flow = FeatureFlow(mbar, m2, dmbar, dm2)
        object.__setattr__(self, "_own_flow", flow)
        return flow

    def feature_flow(self) -> FeatureFlow:
        """The moments the control was fed while propagating."""
        return self.features_from if self.features_from is not None else self.own_flow()

    def to_csv_rows(self):
        for i in range(self.n_common):
            for j in range(self.n_particles):
                for k in range(self.grid.steps + 1):
                    yield i, j, k, float(self.X[k, i, j])


class NonFiniteStateError(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite state encountered at step {step}")
        self.step = step


def propagate(
    control: ControlField,
    init: np.ndarray,
    noise: NoiseEnsemble,
    sigma: float,
    sigma_tilde: float,
    feature_flow: FeatureFlow | None = None,
    workers: int = 1,
) -> PathEnsemble:
    """Euler scheme ``X_{k+1} = X_k + alpha_k dt + sigma dW_k + sigma~ dW~_k``.

    The control reads the cloud moments of its own scenario unless an exogenous
    ``feature_flow`` is supplied.
    """
    if sigma < 0 or sigma_tilde < 0:
        raise ValueError("volatilities must be non-negative")
    grid = noise.grid
    if control.grid.steps != grid.steps:
        raise ValueError("control and noise grids differ")
    init = np.asarray(init, dtype=np.float64)
    if init.shape != (noise.n_common, noise.n_particles):
        raise ValueError(f"init shape {init.shape} != {(noise.n_common, noise.n_particles)}")
    K, dt = grid.steps, grid.dt
    X = np.empty((K + 1,) + init.shape)
    X[0] = init

    def run(sl: slice) -> None:
        for k in range(K):
            xk = X[k, sl]
            if feature_flow is None:
                mb = xk.mean(axis=1)
                m2 = (xk * xk).mean(axis=1)
            else:
                mb = feature_flow.mbar[k, sl]
                m2 = feature_flow.m2[k, sl]
            drift = control.value(k, xk, mb, m2)
            nxt = xk + drift * dt
            if sigma:
                nxt += sigma * noise.dW[k, sl]
            if sigma_tilde:
                nxt += (sigma_tilde * noise.dW_common[k, sl])[:, None]
            if not np.all(np.isfinite(nxt)):
                raise NonFiniteStateError(k + 1)
            X[k + 1, sl] = nxt

    n = init.shape[0]
    if workers <= 1:
        run(slice(0, n))
    else:
        bounds = np.linspace(0, n, min(workers, n) + 1).astype(int)
        chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, chunks))
    return PathEnsemble(X, grid, noise, float(sigma), float(sigma_tilde), feature_flow)


def conditional_flow(paths: PathEnsemble) -> list[list[EmpiricalMeasure]]:
    """``flow[i][k]``: uniform measure over scenario i's particles at node k."""
    return [[from_samples(paths.X[k, i]) for k in range(paths.grid.steps + 1)]
            for i in range(paths.n_common)]


def _h2_sums(a1: ControlField, a2: ControlField, paths: PathEnsemble, flow: FeatureFlow | None):
    if a1.grid.steps != a2.grid.steps or a1.grid.steps != paths.grid.steps:
        raise ValueError("controls and paths must share a grid")
    if not np.isclose(a1.grid.dt, a2.grid.dt) or not np.isclose(a1.grid.dt, paths.grid.dt):
        raise ValueError("controls and paths must share a grid")
    flow = paths.feature_flow() if flow is None else flow
    features = tuple(dict.fromkeys(a1.features + a2.features))
    c1 = a1.in_basis(features).coeffs
    diff = c1 - a2.in_basis(features).coeffs
    d2 = n2 = 0.0
    for k in range(paths.grid.steps):
        args = (paths.X[k], flow.mbar[k], flow.m2[k])
        if np.any(diff[k]):
            v = feat.evaluate(features, diff[k], *args)
            d2 += float(np.mean(v * v))
        if np.any(c1[k]):
            v = feat.evaluate(features, c1[k], *args)
            n2 += float(np.mean(v * v))
    dt = paths.grid.dt
    return math.sqrt(d2 * dt), math.sqrt(n2 * dt)


def h2_distance(
    a1: ControlField,
    a2: ControlField,
    paths: PathEnsemble,
    flow: FeatureFlow | None = None,
) -> float:
    """``sqrt(E sum_k (a1 - a2)^2(t_k, X_k, moments_k) dt)`` along ``paths``.

    Left-point rule over nodes ``0..K-1``, matching the Euler scheme.
    """
    return h2_distance_and_norm(a1, a2, paths, flow)[0]


def h2_distance_and_norm(
    a1: ControlField,
    a2: ControlField,
    paths: PathEnsemble,
    flow: FeatureFlow | None = None,
) -> tuple[float, float]:
    """(distance between a1 and a2, H^2 norm of a1) in one sweep."""
    return _h2_sums(a1, a2, paths, flow)


def h2_norm(a: ControlField, paths: PathEnsemble, flow: FeatureFlow | None = None) -> float:
    return _h2_sums(a, a, paths, flow)[1]
