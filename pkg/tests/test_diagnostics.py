import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from mfgcn.costs import MeanSquareDistance, Quadratic, ScalarMap, StateOnlyQuadratic, TrackMean, zero_cost
from mfgcn.diagnostics import (
    contraction_profile,
    evaluate_cost,
    exploitability,
    flow_spread,
    lq_oracle,
    oracle_deviation,
    oracle_for,
    random_perturbations,
    reduction_check_sigma_tilde_zero,
    smp_gap,
)
from mfgcn.mfg import MfgSolution, solve_mfg
from mfgcn.model import Discretization, MfgModel, SolverConfig
from mfgcn.paths import ControlField, InitialLaw, TimeGrid, propagate, sample_initial, sample_noise

LQ = MfgModel(TrackMean(1, 1, 1), 0.5, 0.5, 1.0, InitialLaw.gaussian(0.0, 1.0))


def frozen(model, control, nc, npart, steps=100, seed=0):
    grid = TimeGrid.uniform(model.horizon, steps)
    noise = sample_noise(nc, npart, grid, seed)
    init = sample_initial(model.initial, nc, npart, seed)
    ref = propagate(control(grid) if callable(control) else control, init, noise,
                    model.sigma, model.sigma_tilde)
    return grid, init, ref


# --- evaluate_cost ----------------------------------------------------------

def test_cost_of_resting_at_zero():
    model = MfgModel(StateOnlyQuadratic(1.0), 0.0, 0.0, 1.0, InitialLaw.dirac(0.0))
    grid, init, ref = frozen(model, ControlField.zero, 2, 10)
    rep = evaluate_cost(ControlField.zero(grid), model, ref, init)
    assert rep.J == 0.0 and rep.stderr == 0.0 and rep.n_samples == 20


def test_cost_of_idiosyncratic_spread():
    # from a common start X_T - mbar_T = sigma W_T minus its cloud average: E = sigma^2 T (1 - 1/N)
    model = MfgModel(TrackMean(0, 1, 1), 1.0, 0.7, 1.0, InitialLaw.dirac(0.3))
    grid, init, ref = frozen(model, ControlField.zero, 32, 500, seed=3)
    rep = evaluate_cost(ControlField.zero(grid), model, ref, init)
    assert abs(rep.J - 1.0) <= 3 * rep.stderr
    assert rep.stderr > 0


def test_cost_of_constant_push_without_terminal():
    model = MfgModel(zero_cost(), 0.0, 0.0, 1.0, InitialLaw.dirac(0.0))
    grid, init, ref = frozen(model, ControlField.zero, 1, 3)
    rep = evaluate_cost(ControlField.constant(grid, 1.0), model, ref, init)
    assert rep.J == pytest.approx(0.5, abs=1e-12)


# --- smp_gap ----------------------------------------------------------------

@pytest.fixture(scope="module")
def oracle_world():
    grid = TimeGrid.uniform(1.0, 100)
    orc = lq_oracle(1, 1, 1, 1.0, grid)
    ctl = orc.control(grid)
    _, init, ref = frozen(LQ, ctl, 16, 500, seed=6)
    return orc, ctl, init, ref


def test_gap_against_itself_vanishes(oracle_world):
    _, ctl, init, ref = oracle_world
    gap = smp_gap(ctl, ctl, LQ, ref, init)
    assert gap.gap == 0.0 and gap.distance == 0.0 and gap.certified


def test_gap_for_constant_shift_is_nonnegative(oracle_world):
    _, ctl, init, ref = oracle_world
    beta = ControlField(ctl.grid, ctl.features, ctl.coeffs + np.array([0.1, 0.0, 0.0]))
    gap = smp_gap(ctl, beta, LQ, ref, init)
    assert gap.gap >= -3 * gap.stderr
    # the feedback pulls the shifted paths back, so the processes differ by less than the shift
    assert 0.0 < gap.distance < 0.1


def test_gap_certifies_suboptimal_control(oracle_world):
    _, ctl, init, ref = oracle_world
    gap = smp_gap(ControlField.zero(ctl.grid, ctl.features), ctl, LQ, ref, init)
    assert gap.gap < -3 * gap.stderr
    assert not gap.certified


def test_gap_for_random_perturbations(oracle_world):
    _, ctl, init, ref = oracle_world
    for beta in random_perturbations(ctl, 8, seed=1):
        gap = smp_gap(ctl, beta, LQ, ref, init)
        assert gap.certified, gap


def test_perturbations_are_reproducible_and_distinct(oracle_world):
    _, ctl, _, _ = oracle_world
    a = random_perturbations(ctl, 3, seed=2)
    b = random_perturbations(ctl, 3, seed=2)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.coeffs, y.coeffs)
    assert not np.array_equal(a[0].coeffs, a[1].coeffs)
    assert all(np.max(np.abs(x.coeffs - ctl.coeffs)) <= 0.25 * 1.5 for x in a)


# --- exploitability ---------------------------------------------------------

@pytest.fixture(scope="module")
def lq_solution():
    return solve_mfg(LQ, Discretization(16, 500, 50), SolverConfig(), seed=1)


def test_exploitability_of_equilibrium(lq_solution):
    rep = exploitability(lq_solution)
    assert rep.inner_converged
    assert rep.value <= max(1e-2 * abs(rep.J), 3 * rep.stderr)
    assert rep.within()


def test_exploitability_of_zero_control(lq_solution):
    ctl = ControlField.zero(lq_solution.grid, lq_solution.control.features)
    rep = exploitability(lq_solution, control=ctl)
    assert rep.value > 3 * rep.stderr


def test_exploitability_without_terminal_cost():
    sol = solve_mfg(LQ.with_(cost=zero_cost()), Discretization(4, 50, 20))
    rep = exploitability(sol)
    assert abs(rep.value) <= 3 * rep.stderr


# --- oracle -----------------------------------------------------------------

def test_benchmark_coefficients():
    orc = lq_oracle(1, 1, 1, 1.0)
    assert orc.a[0] == pytest.approx(0.8, abs=1e-14)
    assert orc.c[0] == pytest.approx(2 / 3, abs=1e-14)
    assert orc.b[0] == pytest.approx(-2 / 15, abs=1e-14)
    assert (orc.a[-1], orc.c[-1]) == (4.0, 2.0)


def test_closed_form_matches_ode_integration():
    # a' = a^2, b' = 2ab + b^2 backward from the terminal data
    q, qbar, s, T = 1.0, 1.0, 1.0, 1.0
    grid = TimeGrid(0.0, T, 200)
    orc = lq_oracle(q, qbar, s, T, grid)
    aT, cT = 2 * (q + qbar), 2 * (q + qbar * (1 - s))
    sol = solve_ivp(lambda t, y: [y[0] ** 2, 2 * y[0] * y[1] + y[1] ** 2], (T, 0.0),
                    [aT, cT - aT], t_eval=grid.times[::-1], method="DOP853", rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(orc.a, sol.y[0][::-1], atol=1e-9)
    np.testing.assert_allclose(orc.b, sol.y[1][::-1], atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(q=st.floats(0, 2), qbar=st.floats(0, 2), s=st.floats(0, 1), m=st.integers(10, 200))
def test_oracle_satisfies_riccati_ode(q, qbar, s, m):
    # difference the oracle's own arrays on a grid with dt = 1e-4, five-point central stencil
    T = m / 100
    g = TimeGrid(0.0, T, m * 100)
    orc = lq_oracle(q, qbar, s, T, g)
    h = g.dt
    def d(y):
        return (y[:-4] / 12 - 2 * y[1:-3] / 3 + 2 * y[3:-1] / 3 - y[4:] / 12) / h
    a, c = orc.a, orc.c
    assert np.max(np.abs(d(a) - a[2:-2] ** 2)) <= 1e-6
    assert np.max(np.abs(d(c) - c[2:-2] ** 2)) <= 1e-6
    b = orc.b
    assert np.max(np.abs(d(b) - (2 * a * b + b * b)[2:-2])) <= 1e-6


def test_mean_only_has_zero_c():
    orc = lq_oracle(0, 1, 1, 1.0)
    assert not orc.c.any()
    np.testing.assert_allclose(orc.a, 2 / (1 + 2 * (1 - orc.times)), rtol=1e-14)


def test_no_mean_coupling_has_zero_b():
    orc = lq_oracle(1.5, 0, 0.7, 2.0)
    assert not orc.b.any()
    np.testing.assert_allclose(orc.a, 3 / (1 + 3 * (2 - orc.times)), rtol=1e-14)


@pytest.mark.parametrize("args", [(-1, 1, 1, 1), (1, -1, 1, 1), (1, 1, -1, 1), (0, 1, 2, 1), (1, 1, 1, 0)])
def test_oracle_rejects(args):
    with pytest.raises(ValueError):
        lq_oracle(*args)


def test_oracle_grid_must_end_at_horizon():
    with pytest.raises(ValueError):
        lq_oracle(1, 1, 1, 1.0, TimeGrid(0.0, 0.5, 10))


def test_oracle_control_and_rows():
    grid = TimeGrid(0.0, 1.0, 4)
    orc = lq_oracle(1, 1, 1, 1.0, grid)
    ctl = orc.control(grid)
    assert ctl.features == ("1", "x", "mbar")
    np.testing.assert_array_equal(ctl.coeffs[:, 1], -orc.a)
    np.testing.assert_array_equal(ctl.coeffs[:, 2], -orc.b)
    rows = orc.to_rows()
    assert len(rows) == 5 and rows[0][0] == 0.0


def test_oracle_for():
    assert oracle_for(TrackMean(1, 1, 1), 1.0).a[0] == pytest.approx(0.8)
    msd = oracle_for(MeanSquareDistance(), 1.0)
    assert not msd.c.any()
    soq = oracle_for(StateOnlyQuadratic(1.0), 1.0)
    assert soq.a[0] == pytest.approx(2 / 3) and not soq.b.any()
    assert oracle_for(StateOnlyQuadratic(-1.0), 1.0) is None
    assert oracle_for(Quadratic(0.5, ScalarMap.linear(-2.0)), 1.0) is None


def test_deviation_of_the_oracle_itself(oracle_world):
    orc, ctl, init, ref = oracle_world
    sol = MfgSolution(LQ, ctl, ref, init, [], [], [(0, 100)], [])
    dev = oracle_deviation(sol, orc)
    assert dev.rel_a0 == 0.0 and dev.rel_b0 == 0.0 and dev.h2_relative == 0.0
    assert dev.within() and dev.to_dict()["within_5pct"]


# --- flow spread and contraction --------------------------------------------

def test_flow_spread_identical_scenarios():
    grid = TimeGrid(0.0, 1.0, 5)
    noise = sample_noise(4, 100, grid, 0)
    noise.dW[:] = noise.dW[:, :1, :]
    init = np.broadcast_to(np.linspace(-1, 1, 100), (4, 100)).copy()
    p = propagate(ControlField.zero(grid), init, noise, 1.0, 0.0)
    spread, scale, _ = flow_spread(p)
    assert spread == 0.0 and scale > 0


def test_flow_spread_detects_shifted_scenario():
    grid = TimeGrid(0.0, 1.0, 5)
    noise = sample_noise(4, 400, grid, 0)
    init = sample_initial(InitialLaw.gaussian(0.0, 1.0), 4, 400, 0)
    init[0] += 1.0
    p = propagate(ControlField.zero(grid), init, noise, 0.2, 0.0)
    spread, scale, _ = flow_spread(p)
    assert spread / scale > 3


def test_reduction_needs_no_common_noise():
    with pytest.raises(ValueError):
        reduction_check_sigma_tilde_zero(LQ)


def test_contraction_profile_rejects_bad_length():
    with pytest.raises(ValueError):
        contraction_profile(LQ, [2.0], Discretization(2, 20, 10))
