import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgcn.costs import (
    ASSUMPTIONS,
    Custom,
    MeanSquareDistance,
    Quadratic,
    ScalarMap,
    StateOnlyQuadratic,
    TrackMean,
    check_all,
    check_assumption,
    cost_from_spec,
    eval_g,
    eval_gx,
    lipschitz_estimate,
    lipschitz_estimates,
    zero_cost,
)
from mfgcn.measures import EmpiricalMeasure, from_samples


def two(a, b):
    return from_samples([a, b])


# --- values -----------------------------------------------------------------

def test_eval_g_examples():
    assert eval_g(TrackMean(0, 1, 1), 1.0, EmpiricalMeasure.dirac(0.0)) == 1.0
    assert eval_g(MeanSquareDistance(), 0.0, two(-1.0, 1.0)) == 1.0
    assert eval_g(Quadratic(1.0, ScalarMap.linear(1.0)), 2.0, EmpiricalMeasure.dirac(3.0)) == 10.0


def test_eval_gx_examples():
    assert eval_gx(TrackMean(0, 1, 1), 1.0, EmpiricalMeasure.dirac(0.0)) == 2.0
    assert eval_gx(TrackMean(1, 1, 1), 0.0, EmpiricalMeasure.dirac(1.0)) == -2.0
    assert eval_gx(Quadratic(0.5, ScalarMap.linear(-2.0)), 1.0, EmpiricalMeasure.dirac(1.0)) == -1.0


def test_declared_constants():
    assert TrackMean(1, 1, 1).lipschitz == 8.0
    assert TrackMean(0, 1, 1).lipschitz == 4.0
    assert Quadratic(0.5, ScalarMap.linear(-2.0)).lipschitz == 2.0
    assert Quadratic(2.0, ScalarMap.tanh(1.0)).lipschitz == 4.0
    assert MeanSquareDistance().lipschitz == 2.0
    assert StateOnlyQuadratic(-3.0).lipschitz == 6.0


def test_track_mean_rejects_negative():
    with pytest.raises(ValueError):
        TrackMean(-1.0, 1.0, 1.0)


def test_cloud_evaluation_matches_pointwise():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 5))
    clouds = rng.normal(size=(3, 7))
    for cost in (TrackMean(1, 2, 0.5), MeanSquareDistance(), StateOnlyQuadratic(1.5),
                 Quadratic(1.0, ScalarMap.tanh(0.7))):
        gx = cost.gx_clouds(x, clouds)
        g = cost.g_clouds(x, clouds)
        for i in range(3):
            m = from_samples(clouds[i])
            np.testing.assert_allclose(gx[i], cost.gx(x[i], m), rtol=1e-13, atol=1e-13)
            np.testing.assert_allclose(g[i], cost.g(x[i], m), rtol=1e-13, atol=1e-13)


FAMILIES = [
    TrackMean(1, 1, 1),
    TrackMean(0, 1, 1),
    TrackMean(0.3, 2.0, 0.4),
    MeanSquareDistance(),
    StateOnlyQuadratic(1.0),
    Quadratic(0.5, ScalarMap.linear(-2.0)),
    Quadratic(1.0, ScalarMap.tanh(1.5)),
]


@pytest.mark.parametrize("cost", FAMILIES, ids=lambda c: c.name)
@settings(max_examples=50, deadline=None)
@given(x=st.floats(-10, 10), locs=st.lists(st.floats(-10, 10), min_size=1, max_size=10))
def test_finite_difference_matches_gx(cost, x, locs):
    m = from_samples(locs)
    h = 1e-5
    fd = (eval_g(cost, x + h, m) - eval_g(cost, x - h, m)) / (2 * h)
    assert fd == pytest.approx(eval_gx(cost, x, m), abs=1e-6)


# --- assumption probes ------------------------------------------------------

def test_unknown_tag():
    with pytest.raises(ValueError):
        check_assumption(TrackMean(1, 1, 1), "A5", 10, 0)


def test_probes_are_deterministic():
    a = check_assumption(Quadratic(0.5, ScalarMap.linear(-2.0)), "A4", 300, 11)
    b = check_assumption(Quadratic(0.5, ScalarMap.linear(-2.0)), "A4", 300, 11)
    assert a.to_dict() == b.to_dict()


def test_track_mean_passes_a1_to_a4():
    reps = check_all(TrackMean(1, 1, 1), 2000, 3)
    for tag in ("A1", "A2", "A3", "A4"):
        assert reps[tag].passed, reps[tag].to_dict()


def test_weak_monotone_but_not_lasry_lions():
    cost = TrackMean(0, 1, 1)
    assert check_assumption(cost, "A4", 2000, 5).passed
    ll = check_assumption(cost, "LasryLions", 2000, 5)
    assert not ll.passed and ll.worst_violation > 0


def test_a4_witness_reproduces_violation():
    cost = Quadratic(0.5, ScalarMap.linear(-2.0))
    rep = check_assumption(cost, "A4", 2000, 9)
    assert not rep.passed
    xi = np.array(rep.witness["xi"])
    xip = np.array(rep.witness["xi_prime"])
    m, mp = from_samples(xi), from_samples(xip)
    val = float(np.mean((cost.gx(xi, m) - cost.gx(xip, mp)) * (xi - xip)))
    assert val == pytest.approx(-rep.worst_violation, rel=1e-12)


def test_a4_dirac_pair_analytic():
    # xi = delta_x, xi' = delta_0 gives (x - 2x) x = -x^2
    cost = Quadratic(0.5, ScalarMap.linear(-2.0))
    for x in (0.5, -3.0, 7.0):
        val = (eval_gx(cost, x, EmpiricalMeasure.dirac(x)) - eval_gx(cost, 0.0, EmpiricalMeasure.dirac(0.0))) * x
        assert val == pytest.approx(-x * x)


@settings(max_examples=15, deadline=None)
@given(A=st.floats(0.1, 3.0), ratio=st.floats(-1.0, 1.0))
def test_quadratic_with_small_psi_slope_is_monotone(A, ratio):
    cost = Quadratic(A, ScalarMap.linear(2 * A * ratio))
    assert check_assumption(cost, "A2", 300, 1).passed
    assert check_assumption(cost, "A4", 300, 1).passed


@settings(max_examples=15, deadline=None)
@given(A=st.floats(0.0, 2.0), slope=st.floats(-6.0, 6.0), q=st.floats(0, 2), qbar=st.floats(0, 2),
       s=st.floats(0, 2))
def test_lasry_lions_and_convexity_imply_weak_monotonicity(A, slope, q, qbar, s):
    for cost in (Quadratic(A, ScalarMap.linear(slope)), TrackMean(q, qbar, s)):
        reps = {t: check_assumption(cost, t, 150, 2) for t in ("A2", "A4", "LasryLions")}
        if reps["LasryLions"].passed and reps["A2"].passed:
            assert reps["A4"].passed


def test_reports_serialize():
    rep = check_assumption(TrackMean(0, 1, 1), "LasryLions", 50, 0)
    d = rep.to_dict()
    assert set(d) == {"assumption", "worst_violation", "passed", "witness", "trials"}
    assert d["trials"] == 50 and d["assumption"] == "LasryLions"
    assert set(ASSUMPTIONS) == {"A1", "A2", "A3", "A4", "LasryLions"}


# --- Lipschitz estimates ----------------------------------------------------

def test_lipschitz_estimates():
    assert lipschitz_estimate(StateOnlyQuadratic(1.0), 500, 0) == pytest.approx(2.0, rel=1e-9)
    lx, lm = lipschitz_estimates(TrackMean(0, 1, 1), 2000, 0)
    assert lx == pytest.approx(2.0, rel=1e-9)
    assert 1.9 <= lm <= 2.0 + 1e-9
    zero = Custom(lambda x, m: np.zeros_like(x), lambda x, m: np.zeros_like(x), 1.0)
    assert lipschitz_estimate(zero, 200, 0) == 0.0


@pytest.mark.parametrize("cost", FAMILIES, ids=lambda c: c.name)
def test_estimate_below_declared(cost):
    assert lipschitz_estimate(cost, 500, 4) <= cost.lipschitz + 1e-9


# --- config plumbing --------------------------------------------------------

def test_cost_from_spec():
    assert cost_from_spec("track_mean", {"q": 1, "qbar": 2, "s": 0.5}).params() == {"q": 1.0, "qbar": 2.0, "s": 0.5}
    quad = cost_from_spec("quadratic", {"A": 0.5, "psi": {"kind": "linear", "slope": -2.0},
                                        "F": {"kind": "mean", "weight": 3.0}})
    m = EmpiricalMeasure.dirac(1.0)
    assert eval_g(quad, 2.0, m) == pytest.approx(0.5 * 4 - 2.0 * 2.0 + 3.0)
    assert isinstance(cost_from_spec("mean_square_distance", {}), MeanSquareDistance)
    assert cost_from_spec("state_only_quadratic", {"a": 2}).a == 2.0
    assert eval_gx(cost_from_spec("zero", {}), 3.0, m) == 0.0
    with pytest.raises(ValueError):
        cost_from_spec("cubic", {})
    assert zero_cost().lipschitz == 0.0
