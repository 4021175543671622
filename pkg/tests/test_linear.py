import numpy as np
import pytest

from bsdelab.errors import ConfigurationError, NumericError
from bsdelab.linear import (LinearCoefficients, as_generator,
                            crosscheck_nonlinear, doleans, linear_solve,
                            normalization_check)
from bsdelab.noise import JumpActivity, TimeGrid, simulate, simulate_two_point
from bsdelab.registry import make_terminal
from bsdelab.solver import backward_solve

XI_ONE = make_terminal("one")


def test_zero_coefficients_give_unit_exponential():
    ens = simulate(TimeGrid.uniform(8, 1.0), 1, JumpActivity.single(0.5), 50, seed=1)
    co = LinearCoefficients.build(XI_ONE, activity=JumpActivity.single(0.5))
    for method in ("euler", "exp", "display"):
        dp = doleans(co, ens, 0, method=method)
        assert np.allclose(dp.values, 1.0, atol=1e-14)


def test_pure_drift_exponential():
    # alpha = 0.5 constant over [0, 1]: Gamma_{0,1} = e^{0.5}, deterministic
    ens = simulate(TimeGrid.uniform(256, 1.0), 1, JumpActivity.empty(), 3, seed=1)
    co = LinearCoefficients.build(XI_ONE, alpha=0.5)
    exact = doleans(co, ens, 0, method="exp").terminal
    assert np.allclose(exact, np.exp(0.5), atol=1e-12)
    euler = doleans(co, ens, 0, method="euler").terminal
    # Euler recursion error for the pure drift is ~ alpha^2 dt / 2 * e^alpha
    assert np.allclose(euler, np.exp(0.5), atol=2e-3)


def test_gamma_minus_one_absorbs_at_zero():
    # on the two-point law the (1 + gamma)^{count} factor kills the path at
    # its first jump and multiplication keeps it at zero afterwards
    act = JumpActivity.single(0.8)
    ens = simulate_two_point(TimeGrid.uniform(8, 1.0), 1, act, 500, seed=3)
    co = LinearCoefficients.build(XI_ONE, gamma=-1.0, activity=act)
    vals = doleans(co, ens, 0, method="exp").values
    jumped = np.cumsum(ens.jump_counts[:, :, 0], axis=1) > 0
    assert np.all(vals[:, 1:][jumped] == 0.0)
    assert vals.min() >= 0.0


def test_euler_negative_fraction_abort():
    # gamma = -1 with multi-jump Poisson steps drives the Euler factor
    # negative often enough to trip the 0.1% guard
    act = JumpActivity.single(3.0)
    ens = simulate(TimeGrid.uniform(4, 1.0), 1, act, 2000, seed=11)
    co = LinearCoefficients.build(XI_ONE, gamma=-1.0, activity=act)
    with pytest.raises(NumericError, match="negative"):
        doleans(co, ens, 0, method="euler")


def test_martingale_normalization_and_formula_reconciliation():
    act = JumpActivity.single(1.0)
    ens = simulate(TimeGrid.uniform(64, 1.0), 1, act, 20_000, seed=13)
    co = LinearCoefficients.build(XI_ONE, beta=0.2, gamma=0.4, activity=act)
    euler = normalization_check(co, ens, "euler")
    exact = normalization_check(co, ens, "exp")
    display = normalization_check(co, ens, "display")
    assert abs(euler["mean"] - 1.0) <= 5 * euler["se"]
    assert abs(exact["mean"] - 1.0) <= 5 * exact["se"]
    # the displayed product form (e^{-gamma} per jump, no compensator drift)
    # is NOT the solution of the defining equation: its mean is
    # exp(lambda T ((1+g) e^{-g} - 1)) != 1
    biased_mean = np.exp(1.0 * (1.4 * np.exp(-0.4) - 1.0))
    assert abs(display["mean"] - biased_mean) <= 5 * display["se"]
    assert abs(display["mean"] - 1.0) > 10 * display["se"]
    # pathwise, euler tracks the exact exponential, not the displayed form
    d_e = doleans(co, ens, 0, "euler").terminal
    d_x = doleans(co, ens, 0, "exp").terminal
    d_d = doleans(co, ens, 0, "display").terminal
    assert np.abs(d_e - d_x).mean() < 0.1 * np.abs(d_e - d_d).mean()


class TestLinearSolve:
    def test_constant_terminal_exact(self):
        ens = simulate(TimeGrid.uniform(8, 1.0), 1, JumpActivity.empty(), 100, seed=2)
        co = LinearCoefficients.build(make_terminal("const:4"))
        sol = linear_solve(co, ens)
        assert sol.y0 == pytest.approx(4.0, abs=1e-12)
        assert np.allclose(sol.Y, 4.0, atol=1e-9)

    def test_alpha_one_exponential_profile(self):
        # f = 0, xi = 1, alpha = 1: Y_t = e^{T-t}
        ens = simulate(TimeGrid.uniform(128, 1.0), 1, JumpActivity.empty(), 200, seed=2)
        co = LinearCoefficients.build(XI_ONE, alpha=1.0)
        sol = linear_solve(co, ens, method="exp")
        assert sol.y0 == pytest.approx(np.e, abs=1e-10)
        times = ens.grid.times
        profile = np.exp(1.0 - times)
        assert np.max(np.abs(sol.Y.mean(axis=0) - profile)) <= 1e-9

    def test_lognormal_control(self):
        # beta = 0.3, xi = exp(W_T - T/2): Gaussian calculus gives e^{0.3 T}
        ens = simulate(TimeGrid.uniform(32, 1.0), 1, JumpActivity.empty(),
                       20_000, seed=17)
        co = LinearCoefficients.build(make_terminal("expw"), beta=0.3)
        sol = linear_solve(co, ens, method="euler")
        assert abs(sol.y0 - np.exp(0.3)) <= 3.0 * sol.y0_se


class TestCrosscheck:
    def test_zero_coefficients(self):
        act = JumpActivity.empty()
        ens = simulate(TimeGrid.uniform(8, 1.0), 1, act, 2000, seed=4)
        co = LinearCoefficients.build(XI_ONE)
        spec = as_generator(co)
        sol = backward_solve(spec, XI_ONE, ens)
        rep = crosscheck_nonlinear(co, sol, ens)
        assert rep.diff <= 1e-10 and not rep.flagged

    def test_ode_closed_form(self):
        # alpha = -1, f = 0, xi = 1: both routes give e^{-T} up to O(dt)
        act = JumpActivity.empty()
        ens = simulate(TimeGrid.uniform(64, 1.0), 1, act, 4000, seed=6)
        co = LinearCoefficients.build(XI_ONE, alpha=-1.0)
        spec = as_generator(co)
        sol = backward_solve(spec, XI_ONE, ens)
        rep = crosscheck_nonlinear(co, sol, ens, disc_budget=2e-2)
        assert not rep.flagged
        assert rep.y0_linear == pytest.approx(np.exp(-1), abs=1e-2)
        assert rep.y0_solver == pytest.approx(np.exp(-1), abs=1e-2)

    def test_single_atom_martingale_case(self):
        # gamma = 0.5, f = 0, xi = 1, alpha = 0: Y_0 = E[Gamma_{0,T}] = 1
        act = JumpActivity.single(1.0)
        ens = simulate(TimeGrid.uniform(32, 1.0), 1, act, 6000, seed=8)
        co = LinearCoefficients.build(XI_ONE, gamma=0.5, activity=act)
        spec = as_generator(co)
        sol = backward_solve(spec, XI_ONE, ens)
        rep = crosscheck_nonlinear(co, sol, ens)
        assert rep.y0_linear == pytest.approx(1.0, abs=5 * max(rep.se_combined, 1e-12))
        assert not rep.flagged

    def test_mismatched_ensemble_rejected(self):
        act = JumpActivity.empty()
        ens_a = simulate(TimeGrid.uniform(8, 1.0), 1, act, 500, seed=1)
        ens_b = simulate(TimeGrid.uniform(4, 1.0), 1, act, 500, seed=1)
        co = LinearCoefficients.build(XI_ONE)
        sol = backward_solve(as_generator(co), XI_ONE, ens_a)
        with pytest.raises(ConfigurationError):
            crosscheck_nonlinear(co, sol, ens_b)


def test_linear_representation_matches_solver():
    # Y_t = E[Gamma_{t,T} xi + int Gamma f | F_t] against the nonlinear solver
    act = JumpActivity.single(0.8)
    ens = simulate(TimeGrid.uniform(32, 1.0), 1, act, 8000, seed=12)
    co = LinearCoefficients.build(make_terminal("w1"), alpha=-0.5, beta=0.2,
                                  gamma=0.3, forcing=0.1, activity=act)
    spec = as_generator(co)
    sol = backward_solve(spec, make_terminal("w1"), ens)
    rep = crosscheck_nonlinear(co, sol, ens, disc_budget=5e-3)
    assert not rep.flagged, vars(rep)


def test_euler_positivity_on_two_point_law():
    # with gamma >= -1 the Euler factors 1 + gamma (ind - q) stay positive
    # exactly under the two-point law (jump: 1 + gamma(1-q) >= q; no jump:
    # 1 - gamma q >= 1 - q)
    act = JumpActivity.single(0.8)
    ens = simulate_two_point(TimeGrid.uniform(6, 1.0), 1, act, 2000, seed=14)
    for gamma in (-1.0, -0.5, 0.0, 1.5):
        co = LinearCoefficients.build(XI_ONE, gamma=gamma, activity=act)
        dp = doleans(co, ens, 0, method="euler")
        assert dp.values.min() >= 0.0
        assert dp.negative_count == 0
