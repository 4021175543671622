import numpy as np
import pytest

from bsdelab.errors import ConfigurationError
from bsdelab.model import shift_alpha_to_zero
from bsdelab.noise import JumpActivity, TimeGrid, compensated_increments, simulate
from bsdelab.registry import make_model, make_terminal
from bsdelab.solver import (StoppingRule, apply_xi,
                            backward_solve, beta_norm, default_beta,
                            measure_contraction, random_horizon_solve,
                            unshift_solution)


@pytest.fixture(scope="module")
def plain_ensemble():
    return simulate(TimeGrid.uniform(16, 1.0), 1, JumpActivity.empty(), 4000, seed=3)


@pytest.fixture(scope="module")
def jump_ensemble():
    act = JumpActivity.single(0.8)
    return act, simulate(TimeGrid.uniform(8, 1.0), 1, act, 3000, seed=5)


def test_constant_data_is_exact(plain_ensemble):
    sol = backward_solve(make_model("zero", JumpActivity.empty()),
                         make_terminal("one"), plain_ensemble)
    assert np.max(np.abs(sol.Y - 1.0)) <= 1e-10
    assert np.max(np.abs(sol.Z)) <= 1e-10
    assert np.max(np.abs(sol.M)) <= 1e-10


def test_terminal_is_xi_bitwise(jump_ensemble):
    act, ens = jump_ensemble
    xi = make_terminal("mixed")
    sol = backward_solve(make_model("mixed1", act), xi, ens)
    from bsdelab.model import TerminalState
    expected = xi(TerminalState.from_ensemble(ens))
    assert np.array_equal(sol.Y[:, -1, :], expected)
    assert np.all(sol.M[:, 0, :] == 0.0)


def test_exponential_decay_with_budget(plain_ensemble):
    spec = make_model("ohlm1", JumpActivity.empty())
    xi = make_terminal("one")
    sol16 = backward_solve(spec, xi, plain_ensemble)
    ens32 = simulate(TimeGrid.uniform(32, 1.0), 1, JumpActivity.empty(), 4000, seed=3)
    sol32 = backward_solve(spec, xi, ens32)
    budget = 2.0 * abs(sol16.y0[0] - sol32.y0[0])
    assert abs(sol32.y0[0] - np.exp(-1)) <= 3 * sol32.y0_se + budget


def test_residual_identity_holds_pathwise(jump_ensemble):
    act, ens = jump_ensemble
    spec = make_model("mixed1", act)
    sol = backward_solve(spec, make_terminal("w1"), ens)
    comp = compensated_increments(ens, act)
    dt = ens.grid.dt
    worst = 0.0
    for i in range(ens.grid.n_steps):
        fv = spec(float(ens.grid.times[i]), sol.Y[:, i], sol.Z[:, i], sol.psi[:, i])
        rec = (sol.Y[:, i] - fv * dt[i]
               + np.einsum("pdl,pl->pd", sol.Z[:, i], ens.dW[:, i])
               + np.einsum("pdj,pj->pd", sol.psi[:, i], comp[:, i])
               + sol.dM[:, i])
        worst = max(worst, float(np.max(np.abs(sol.Y[:, i + 1] - rec))))
    assert worst <= 1e-12 * 10


def test_m_orthogonality_shrinks_with_paths():
    act = JumpActivity.single(0.8)
    spec = make_model("mixed1", act)
    xi = make_terminal("mixed")

    def cov_stat(n_paths):
        ens = simulate(TimeGrid.uniform(8, 1.0), 1, act, n_paths, seed=17)
        sol = backward_solve(spec, xi, ens)
        comp = compensated_increments(ens, act)
        c_w = np.abs(np.mean(np.sum(sol.dM[:, :, 0] * ens.dW[:, :, 0], axis=1)))
        c_pi = np.abs(np.mean(np.sum(sol.dM[:, :, 0] * comp[:, :, 0], axis=1)))
        return c_w + c_pi

    small, big = cov_stat(2000), cov_stat(32000)
    assert big < small  # 1/sqrt(n) trend at a 16x size ratio


class TestContractionMap:
    def test_fixed_point_returns_itself(self, jump_ensemble):
        act, ens = jump_ensemble
        spec = make_model("contraction:0.3", act)
        xi = make_terminal("w1")
        sol = backward_solve(spec, xi, ens)
        again = apply_xi(spec, xi, ens, sol)
        assert beta_norm(sol, again, default_beta(0.3)) <= 1e-10

    def test_input_ignored_when_driver_has_no_z_psi(self, jump_ensemble):
        act, ens = jump_ensemble
        spec = make_model("ohlm1", act)
        xi = make_terminal("one")
        base = backward_solve(spec, xi, ens)
        noisy = base.scaled(1.0)
        rng = np.random.default_rng(0)
        noisy.Z = rng.normal(size=base.Z.shape)
        noisy.psi = rng.normal(size=base.psi.shape)
        out1 = apply_xi(spec, xi, ens, base)
        out2 = apply_xi(spec, xi, ens, noisy)
        assert np.array_equal(out1.Y, out2.Y)

    def test_measured_factor_below_one(self, jump_ensemble):
        act, ens = jump_ensemble
        spec = make_model("contraction:0.3", act)
        ratios = measure_contraction(spec, make_terminal("w1"), ens, n_pairs=5)
        assert default_beta(0.3) == pytest.approx(2.36)
        assert max(ratios) < 1.0


class TestBetaNorm:
    def test_zero_on_equal_inputs(self, jump_ensemble):
        act, ens = jump_ensemble
        sol = backward_solve(make_model("zdrift", act), make_terminal("w1"), ens)
        assert beta_norm(sol, sol, 2.0) == 0.0

    def test_constant_y_sup_term(self, plain_ensemble):
        sol = backward_solve(make_model("zero", JumpActivity.empty()),
                             make_terminal("one"), plain_ensemble)
        zero = sol.scaled(0.0)
        # beta = 0, T = 1, Y == 1 and no other components: squared norm is 1
        assert beta_norm(sol, zero, 0.0) == pytest.approx(1.0, abs=1e-9)

    def test_quadratic_homogeneity(self, jump_ensemble):
        act, ens = jump_ensemble
        sol = backward_solve(make_model("mixed1", act), make_terminal("w1"), ens)
        zero = sol.scaled(0.0)
        n1 = beta_norm(sol, zero, 1.5)
        n3 = beta_norm(sol.scaled(3.0), zero, 1.5)
        assert n3 == pytest.approx(9.0 * n1, rel=1e-12)

    def test_grid_mismatch_rejected(self, plain_ensemble, jump_ensemble):
        act, ens = jump_ensemble
        a = backward_solve(make_model("zero", JumpActivity.empty()),
                           make_terminal("one"), plain_ensemble)
        b = backward_solve(make_model("zero", act), make_terminal("one"), ens)
        with pytest.raises(ConfigurationError):
            beta_norm(a, b, 1.0)


def test_alpha_shift_consistency(plain_ensemble):
    # solve the shifted problem and map back: agreement within 2x tolerance
    spec = make_model("ohlm1", JumpActivity.empty())
    xi = make_terminal("one")
    direct = backward_solve(spec, xi, plain_ensemble)
    spec2, xi2 = shift_alpha_to_zero(spec, xi, plain_ensemble.grid.horizon)
    shifted = backward_solve(spec2, xi2, plain_ensemble)
    back = unshift_solution(shifted, spec.alpha)
    # the two discretizations differ at O(dt) in the driver treatment
    dev = abs(back.y0[0] - direct.y0[0])
    assert dev <= 2.0 * (abs(direct.y0[0] - np.exp(-1)) + 3 * direct.y0_se + 1e-6)


class TestRandomHorizon:
    def test_deterministic_tau_reduces_to_backward_solve(self):
        act = JumpActivity.single(0.5)
        grid = TimeGrid.uniform(16, 1.0)
        ens = simulate(grid, 1, act, 2000, seed=9)
        spec = make_model("ohlm1", act)
        xi = make_terminal("one")
        rule = StoppingRule.parse("det:1.0", t_max=1.0)
        res = random_horizon_solve(spec, xi, rule, rho=0.0, p=2.0, n_max=1,
                                   ensemble=ens)
        plain = backward_solve(spec, xi, ens)
        # same ensemble, exact terminal, full driver weights; the extra
        # stopped-time features are constant columns and center away
        assert np.max(np.abs(res.solutions[0].Y - plain.Y)) <= 1e-10

    def test_nmax_one_equals_first_truncation(self):
        act = JumpActivity.single(1.0)
        grid = TimeGrid.uniform(64, 2.0)
        ens = simulate(grid, 1, act, 1500, seed=4)
        spec = make_model("ohlm1", act)
        xi = make_terminal("one")
        rule = StoppingRule.parse("jump:0", t_max=2.0)
        one = random_horizon_solve(spec, xi, rule, rho=0.0, p=2.0, n_max=1,
                                   ensemble=ens)
        two = random_horizon_solve(spec, xi, rule, rho=0.0, p=2.0, n_max=2,
                                   ensemble=ens)
        assert np.array_equal(one.solutions[0].Y, two.solutions[0].Y)
        assert one.distances[0] == two.distances[0]

    def test_rho_below_nu_rejected_citing_h5prime(self):
        act = JumpActivity.single(1.0)
        ens = simulate(TimeGrid.uniform(8, 1.0), 1, act, 100, seed=1)
        spec = make_model("contraction:0.5", act)   # nu = 0 + 0.25
        with pytest.raises(ConfigurationError, match=r"\(H5'\)"):
            random_horizon_solve(spec, make_terminal("one"),
                                 StoppingRule.parse("det:1.0", 1.0),
                                 rho=0.25, p=2.0, n_max=1, ensemble=ens)

    def test_exit_rule_and_parse_errors(self):
        act = JumpActivity.empty()
        ens = simulate(TimeGrid.uniform(8, 1.0), 1, act, 500, seed=2)
        rule = StoppingRule.parse("exit:0,-0.5,0.5", t_max=1.0)
        tau, event = rule.evaluate(ens)
        w = ens.w_state()[:, :, 0]
        crossed = (np.abs(w[:, 1:]) >= 0.5).any(axis=1)
        assert np.all(tau[~crossed] == 1.0)
        assert np.all(tau[crossed] <= 1.0)
        with pytest.raises(ConfigurationError):
            StoppingRule.parse("sometime:1", t_max=1.0)


def test_first_jump_closed_form_quadrature_oracle():
    # independent oracle: Y_0 = E[e^{-tau}], tau = first jump ^ 4, via quadrature
    from scipy.integrate import quad
    integral, _ = quad(lambda t: np.exp(-t) * np.exp(-t), 0.0, 4.0)
    closed = integral + np.exp(-4.0) * np.exp(-4.0)
    assert closed == pytest.approx((1 - np.exp(-8)) / 2 + np.exp(-8), abs=1e-12)

    act = JumpActivity.single(1.0)
    grid = TimeGrid.uniform(192, 4.0)
    ens = simulate(grid, 1, act, 12_000, seed=31)
    res = random_horizon_solve(make_model("ohlm1", act), make_terminal("one"),
                               StoppingRule.parse("jump:0", 4.0),
                               rho=0.0, p=2.0, n_max=4, ensemble=ens)
    y0 = float(res.solutions[-1].Y[:, 0, 0].mean())
    assert abs(y0 - closed) <= 3.0 * res.solutions[-1].y0_se


def test_solution_persistence_round_trip(tmp_path):
    from bsdelab.solver import load_solution, save_solution
    act = JumpActivity.single(0.8)
    ens = simulate(TimeGrid.uniform(6, 1.0), 1, act, 300, seed=21)
    sol = backward_solve(make_model("mixed1", act), make_terminal("mixed"), ens)
    path = tmp_path / "sol.bjs"
    save_solution(path, sol)
    assert path.read_bytes()[:4] == b"BJS1"
    back = load_solution(path)
    assert np.array_equal(back.Y, sol.Y)
    assert np.array_equal(back.Z, sol.Z)
    assert np.array_equal(back.psi, sol.psi)
    assert np.array_equal(back.M, sol.M)
    assert np.array_equal(back.grid.times, sol.grid.times)
    assert back.provenance["model"] == "mixed1"


def test_m_covariations_within_5_se():
    # in-sample residuals carry an O(n_basis/n_paths) leverage bias against
    # dW^2, which decays faster (1/N) than the SE (1/sqrt(N)); at 8e4 paths
    # the statistic sits well inside the 5 SE band (z ~ -2.3)
    act = JumpActivity.single(0.8)
    ens = simulate(TimeGrid.uniform(8, 1.0), 1, act, 80_000, seed=23)
    sol = backward_solve(make_model("mixed1", act), make_terminal("mixed"), ens)
    comp = compensated_increments(ens, act)
    for other in (ens.dW[:, :, 0], comp[:, :, 0]):
        per_path = np.sum(sol.dM[:, :, 0] * other, axis=1)
        se = per_path.std() / np.sqrt(ens.n_paths)
        assert abs(per_path.mean()) <= 5.0 * se
