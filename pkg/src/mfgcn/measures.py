"""Atomic probability measures on the real line.

The particle cloud of one common-noise scenario is represented as an
``EmpiricalMeasure``; distances between clouds use the exact one-dimensional
W2 formula (monotone rearrangement of quantile functions).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted atoms ``sum_i w_i delta_{x_i}``.

    Atoms are stored in construction order; nothing is sorted or merged.
    """

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        loc = np.asarray(self.locations, dtype=np.float64).reshape(-1)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if loc.size == 0:
            raise ValueError("measure needs at least one atom")
        if loc.shape != w.shape:
            raise ValueError("locations and weights differ in length")
        if not np.all(np.isfinite(loc)):
            raise ValueError("atom locations must be finite")
        if not np.all(w > 0) or not np.all(np.isfinite(w)):
            raise ValueError("atom weights must be finite and strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        loc.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.locations.size

    @property
    def mean(self) -> float:
        return moment(self, 1)

    @property
    def second_moment(self) -> float:
        return moment(self, 2)

    def to_records(self) -> list[dict[str, float]]:
        return [
            {"location": float(x), "weight": float(w)}
            for x, w in zip(self.locations, self.weights)
        ]

    @classmethod
    def dirac(cls, x: float) -> "EmpiricalMeasure":
        return cls(np.array([x]), np.array([1.0]))


def from_samples(values: Sequence[float] | np.ndarray) -> EmpiricalMeasure:
    """Uniform-weight measure over ``values`` (multiplicity preserved)."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("cannot build a measure from an empty sample")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite")
    return EmpiricalMeasure(arr, np.full(arr.size, 1.0 / arr.size))


def moment(m: EmpiricalMeasure, k: int) -> float:
    if k < 1:
        raise ValueError("moment order must be a positive integer")
    return float(np.dot(m.weights, m.locations**k))


def _quantile_pieces(m1: EmpiricalMeasure, m2: EmpiricalMeasure):
    """Common refinement of the two quantile functions.

    Returns (x, y, mass): on each piece of [0, 1] of length ``mass`` the
    quantile functions of m1 and m2 are constant at x and y.
    """
    o1 = np.argsort(m1.locations, kind="stable")
    o2 = np.argsort(m2.locations, kind="stable")
    x, wx = m1.locations[o1], m1.weights[o1]
    y, wy = m2.locations[o2], m2.weights[o2]
    c1 = np.cumsum(wx)
    c2 = np.cumsum(wy)
    c1[-1] = 1.0
    c2[-1] = 1.0
    cuts = np.union1d(c1, c2)
    left = np.concatenate(([0.0], cuts[:-1]))
    mass = cuts - left
    keep = mass > 0
    mid = 0.5 * (left + cuts)[keep]
    i = np.minimum(np.searchsorted(c1, mid), x.size - 1)
    j = np.minimum(np.searchsorted(c2, mid), y.size - 1)
    return x[i], y[j], mass[keep]


def wasserstein2(m1: EmpiricalMeasure, m2: EmpiricalMeasure) -> float:
    """Exact W2 between atomic measures on the line."""
    x, y, mass = _quantile_pieces(m1, m2)
    return float(np.sqrt(max(np.dot(mass, (x - y) ** 2), 0.0)))


def monotone_coupling(
    m1: EmpiricalMeasure, m2: EmpiricalMeasure
) -> list[tuple[float, float, float]]:
    """Quantile coupling of m1 and m2 as (x, y, weight) triples.

    This coupling attains W2 in one dimension.
    """
    x, y, mass = _quantile_pieces(m1, m2)
    return [(float(a), float(b), float(w)) for a, b, w in zip(x, y, mass)]


def wasserstein2_samples(a: np.ndarray, b: np.ndarray) -> float:
    """W2 between two uniform clouds given as raw sample arrays.

    Fast path for equal sizes (sorted pairing); otherwise defers to the
    general quantile merge.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size == b.size:
        return float(np.sqrt(np.mean((np.sort(a) - np.sort(b)) ** 2)))
    return wasserstein2(from_samples(a), from_samples(b))
