import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from mfgcn.measures import (
    EmpiricalMeasure,
    from_samples,
    moment,
    monotone_coupling,
    wasserstein2,
    wasserstein2_samples,
)


def m(locs, weights=None):
    locs = np.asarray(locs, dtype=float)
    if weights is None:
        weights = np.full(locs.size, 1.0 / locs.size)
    return EmpiricalMeasure(locs, np.asarray(weights, dtype=float))


def lp_w2sq(a: EmpiricalMeasure, b: EmpiricalMeasure) -> tuple[float, float]:
    """Optimal squared transport cost by linear programming over all couplings,
    with the largest pairwise cost as the scale of the solver tolerance."""
    na, nb = len(a), len(b)
    cost = (a.locations[:, None] - b.locations[None, :]) ** 2
    rows = np.zeros((na + nb, na * nb))
    for i in range(na):
        rows[i, i * nb:(i + 1) * nb] = 1.0
    for j in range(nb):
        rows[na + j, j::nb] = 1.0
    rhs = np.concatenate([a.weights, b.weights])
    res = linprog(cost.ravel(), A_eq=rows, b_eq=rhs, bounds=(0, None), method="highs")
    assert res.success
    return float(res.fun), float(cost.max())


finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
clouds = st.lists(finite, min_size=1, max_size=8)


# --- construction -----------------------------------------------------------

def test_from_samples_singleton():
    mu = from_samples([0.0])
    assert len(mu) == 1 and mu.locations[0] == 0.0 and mu.weights[0] == 1.0


def test_from_samples_duplicates_keep_multiplicity():
    mu = from_samples([1.0, 1.0])
    assert list(mu.weights) == [0.5, 0.5]
    assert mu.mean == 1.0
    assert wasserstein2(mu, EmpiricalMeasure.dirac(1.0)) == 0.0


def test_from_samples_mean():
    assert from_samples([0.0, 2.0]).mean == 1.0


@pytest.mark.parametrize("bad", [[], [np.nan], [1.0, np.inf]])
def test_from_samples_rejects(bad):
    with pytest.raises(ValueError):
        from_samples(bad)


@pytest.mark.parametrize("locs,weights", [
    ([0.0, 1.0], [0.5, 0.6]),
    ([0.0, 1.0], [1.0, 0.0]),
    ([0.0, np.nan], [0.5, 0.5]),
    ([0.0], [0.5, 0.5]),
])
def test_measure_invariants(locs, weights):
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.array(locs), np.array(weights))


def test_measure_is_immutable():
    mu = from_samples([1.0, 2.0])
    with pytest.raises(ValueError):
        mu.locations[0] = 5.0


def test_records_roundtrip():
    mu = m([1.0, -2.0], [0.25, 0.75])
    rec = mu.to_records()
    assert rec == [{"location": 1.0, "weight": 0.25}, {"location": -2.0, "weight": 0.75}]


# --- moments ----------------------------------------------------------------

def test_moments():
    assert moment(EmpiricalMeasure.dirac(2.0), 1) == 2.0
    sym = m([-1.0, 1.0])
    assert moment(sym, 1) == 0.0
    assert moment(sym, 2) == 1.0
    with pytest.raises(ValueError):
        moment(sym, 0)


# --- W2 ---------------------------------------------------------------------

def test_w2_diracs():
    assert wasserstein2(EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(3.0)) == 3.0


def test_w2_two_atoms():
    assert wasserstein2(m([0.0, 1.0]), m([2.0, 3.0])) == pytest.approx(2.0, abs=1e-15)


def test_w2_unsorted_storage():
    assert wasserstein2(m([1.0, 0.0]), m([3.0, 2.0])) == pytest.approx(2.0, abs=1e-15)


def test_monotone_coupling_examples():
    assert monotone_coupling(EmpiricalMeasure.dirac(0.0), EmpiricalMeasure.dirac(1.0)) == [(0.0, 1.0, 1.0)]
    assert monotone_coupling(m([0.0, 1.0]), m([2.0, 3.0])) == [(0.0, 2.0, 0.5), (1.0, 3.0, 0.5)]
    mu = m([0.3, -1.0, 2.0], [0.2, 0.5, 0.3])
    pairs = monotone_coupling(mu, mu)
    assert all(x == y for x, y, _ in pairs)
    got = sorted((x, w) for x, _, w in pairs)
    want = sorted(zip(mu.locations, mu.weights))
    assert [x for x, _ in got] == [x for x, _ in want]
    assert [w for _, w in got] == pytest.approx([w for _, w in want], abs=1e-15)


def test_samples_fast_path_matches_general():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=50), rng.normal(1.0, 2.0, size=50)
    assert wasserstein2_samples(a, b) == pytest.approx(wasserstein2(from_samples(a), from_samples(b)), abs=1e-12)
    c = rng.normal(size=31)
    assert wasserstein2_samples(a, c) == pytest.approx(wasserstein2(from_samples(a), from_samples(c)), abs=1e-12)


@given(clouds)
def test_w2_identity(xs):
    mu = from_samples(xs)
    assert wasserstein2(mu, mu) == 0.0


@given(clouds, clouds)
def test_w2_symmetry(xs, ys):
    a, b = from_samples(xs), from_samples(ys)
    assert wasserstein2(a, b) == wasserstein2(b, a)


@given(clouds, clouds, clouds)
def test_w2_triangle(xs, ys, zs):
    a, b, c = from_samples(xs), from_samples(ys), from_samples(zs)
    assert wasserstein2(a, c) <= wasserstein2(a, b) + wasserstein2(b, c) + 1e-9


@given(clouds, finite)
def test_w2_translation(xs, shift):
    a = from_samples(xs)
    b = from_samples(np.asarray(xs) + shift)
    assert wasserstein2(a, b) == pytest.approx(abs(shift), abs=1e-9)


@given(clouds)
def test_w2_zero_iff_same_quantiles(xs):
    a = from_samples(xs)
    b = from_samples(list(reversed(xs)))
    assert wasserstein2(a, b) == 0.0
    c = from_samples(np.asarray(xs) + 1e-3)
    assert wasserstein2(a, c) > 0.0


@st.composite
def weighted(draw):
    n = draw(st.integers(1, 6))
    locs = draw(st.lists(finite, min_size=n, max_size=n))
    raw = np.array(draw(st.lists(st.floats(0.05, 1.0), min_size=n, max_size=n)))
    w = raw / raw.sum()
    w[-1] = 1.0 - w[:-1].sum()
    return EmpiricalMeasure(np.array(locs), w)


@settings(max_examples=60, deadline=None)
@given(weighted(), weighted())
def test_w2_matches_linear_programming(a, b):
    ref, scale = lp_w2sq(a, b)
    assert wasserstein2(a, b) ** 2 == pytest.approx(ref, abs=1e-8 * max(scale, 1.0))


@given(weighted(), weighted())
def test_monotone_coupling_marginals_and_cost(a, b):
    pairs = monotone_coupling(a, b)
    xs = np.array([p[0] for p in pairs])
    ys = np.array([p[1] for p in pairs])
    ws = np.array([p[2] for p in pairs])
    for mu, pts in ((a, xs), (b, ys)):
        for loc in np.unique(mu.locations):
            assert ws[pts == loc].sum() == pytest.approx(mu.weights[mu.locations == loc].sum(), abs=1e-12)
    cost = float(np.dot(ws, (xs - ys) ** 2))
    assert cost == pytest.approx(wasserstein2(a, b) ** 2, abs=1e-9)


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.lists(finite, min_size=n, max_size=n), st.lists(finite, min_size=n, max_size=n))))
def test_w2_matches_assignment_enumeration(pair):
    xs, ys = np.array(pair[0]), np.array(pair[1])
    brute = min(np.mean((xs[list(p)] - ys) ** 2) for p in itertools.permutations(range(xs.size)))
    assert wasserstein2(from_samples(xs), from_samples(ys)) == pytest.approx(np.sqrt(brute), abs=1e-9)
