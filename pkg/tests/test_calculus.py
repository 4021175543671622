import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bsdelab.calculus import (SemimartingalePath, beta_of_K,
                              c_of_p, constants, convexity_margins,
                              ito_p_residual, jump_bound_check,
                              jump_bound_margins, kappa_of_p, nu_of,
                              pred_quad_ratio, zero_set_check)
from bsdelab.errors import DomainError
from bsdelab.noise import JumpActivity, TimeGrid, simulate
from bsdelab.oracle import TreeModel, solve_exact
from bsdelab.registry import make_model, make_terminal
from bsdelab.solver import backward_solve


def _path(n=16, n_paths=1, d=1, k=1, atoms=0, T=1.0, **arrays):
    times = np.linspace(0, T, n + 1)
    defaults = dict(
        times=times,
        x0=np.zeros((n_paths, d)),
        drift=np.zeros((n_paths, n, d)),
        Z=np.zeros((n_paths, n, d, k)),
        dW=np.zeros((n_paths, n, k)),
        psi=np.zeros((n_paths, n, d, atoms)),
        counts=np.zeros((n_paths, n, atoms), dtype=np.int64),
        intensities=np.ones(atoms),
        dM=np.zeros((n_paths, n, d)),
    )
    defaults.update(arrays)
    return SemimartingalePath(**defaults)


class TestConstants:
    # five pinned triples, hand-evaluated from the closed formulas
    @pytest.mark.parametrize("p,K,alpha,c,kappa,beta,nu", [
        (2.0, 1.0, 0.0, 1.0, 2.0 / 3.0, 6.0, 1.0),
        (1.5, 0.0, 0.0, 0.375, min(0.75, 1.5 * 0.5 * 3**-0.5), 2.0, 0.0),
        (3.0, 0.5, -1.0, 1.5, min(1.5, 6.0 * 3.0**-2.0), 3.0, -0.75),
        (2.5, 0.3, 0.2, 1.25, min(1.25, 2.5 * 1.5 * 3**-1.5), 2.36, 0.29),
        (4.0, 0.0, 1.0, 2.0, min(2.0, 12.0 * 27.0**-1.0), 2.0, 1.0),
    ])
    def test_pinned_values(self, p, K, alpha, c, kappa, beta, nu):
        got = constants(p, K, alpha)
        assert got.c == pytest.approx(c, rel=1e-12)
        assert got.kappa_p == pytest.approx(kappa, rel=1e-12)
        assert got.beta == pytest.approx(beta, rel=1e-12)
        assert got.nu == pytest.approx(nu, rel=1e-12)
        assert got.e_p is None

    def test_p_one_only_c(self):
        got = constants(1.0)
        assert got.c == 0.0 and got.kappa_p is None and got.nu is None
        with pytest.raises(DomainError):
            constants(0.5)
        with pytest.raises(DomainError):
            kappa_of_p(1.0)
        with pytest.raises(DomainError):
            nu_of(0.0, 1.0, 1.0)

    def test_c_continuity_at_two(self):
        assert c_of_p(2.0 - 1e-12) == pytest.approx(c_of_p(2.0), abs=1e-9)


class TestItoResidual:
    def test_pure_drift_left_vs_midpoint(self):
        # X = 1 + t with p = 2: left Riemann error is O(dt), midpoint O(dt^2)
        n = 16
        path = _path(n=n, x0=np.array([[1.0]]), drift=np.ones((1, n, 1)))
        left = np.abs(ito_p_residual(path, 2.0, "left")).max()
        mid = np.abs(ito_p_residual(path, 2.0, "midpoint")).max()
        assert left == pytest.approx(1.0 / n, rel=1e-9)   # sum of dt^2
        assert mid <= 1e-12

    def test_drift_midpoint_second_order(self):
        for p in (1.5, 3.0):
            errs = []
            for n in (16, 32):
                path = _path(n=n, x0=np.array([[1.0]]), drift=np.ones((1, n, 1)))
                errs.append(np.abs(ito_p_residual(path, p, "midpoint")).max())
            assert errs[0] / errs[1] >= 3.0   # ~ 4x for O(dt^2)

    @pytest.mark.parametrize("p", [1.2, 1.5, 2.0, 3.0])
    def test_pure_jump_exact(self, p):
        rng = np.random.default_rng(5)
        n = 12
        counts = rng.poisson(0.5, size=(60, n, 2)).astype(np.int64)
        psi = 0.4 + 0.3 * rng.standard_normal((60, n, 1, 2))
        path = _path(n=n, n_paths=60, atoms=2,
                     x0=np.full((60, 1), 1.5), psi=psi, counts=counts,
                     intensities=np.array([1.0, 0.5]))
        assert np.abs(ito_p_residual(path, p)).max() <= 1e-10

    def test_m_jumps_exact(self):
        rng = np.random.default_rng(8)
        n = 10
        dm = 0.3 * rng.standard_normal((40, n, 2))
        path = _path(n=n, n_paths=40, d=2, x0=np.ones((40, 2)), dM=dm)
        for p in (1.2, 2.0, 3.0):
            assert np.abs(ito_p_residual(path, p)).max() <= 1e-10

    def test_brownian_rate(self):
        def rms(steps, seed):
            rng = np.random.default_rng(seed)
            dw = rng.standard_normal((600, steps, 1)) / np.sqrt(steps)
            path = _path(n=steps, n_paths=600, x0=np.ones((600, 1)),
                         Z=np.ones((600, steps, 1, 1)), dW=dw)
            r = ito_p_residual(path, 2.0)[:, -1]
            return np.sqrt(np.mean(r**2))
        assert rms(32, 1) / rms(64, 2) >= 1.3

    def test_p_at_most_one_rejected(self):
        path = _path()
        with pytest.raises(DomainError):
            ito_p_residual(path, 1.0)

    def test_reconstruction_invariant(self):
        rng = np.random.default_rng(3)
        n = 8
        path = _path(n=n, n_paths=20, atoms=1,
                     x0=rng.normal(size=(20, 1)),
                     drift=rng.normal(size=(20, n, 1)),
                     Z=rng.normal(size=(20, n, 1, 1)),
                     dW=rng.normal(size=(20, n, 1)) * 0.25,
                     psi=rng.normal(size=(20, n, 1, 1)),
                     counts=rng.poisson(0.3, size=(20, n, 1)).astype(np.int64),
                     intensities=np.array([1.2]),
                     dM=0.1 * rng.normal(size=(20, n, 1)))
        assert path.reconstruction_error() <= 1e-12


class TestJumpBound:
    def test_hand_values(self):
        # d=1, y=1, e=1, p=1.5: lhs = 2^{1.5} - 1 - 1.5, rhs = 0.375 * 4^{-1/4}
        m = jump_bound_margins(np.array([[1.0]]), np.array([[1.0]]), 1.5)
        assert m[0] == pytest.approx((2**1.5 - 2.5) - 0.375 * 4**-0.25, abs=1e-12)
        m0 = jump_bound_margins(np.array([[0.0]]), np.array([[1.0]]), 1.5)
        assert m0[0] == pytest.approx(1.0 - 0.375, abs=1e-12)

    def test_no_jumps_trivial(self):
        rep = jump_bound_check(_path(), 1.5)
        assert rep.n_events == 0 and rep.ok

    def test_path_events_nonnegative(self):
        rng = np.random.default_rng(12)
        n = 10
        path = _path(n=n, n_paths=50, atoms=1,
                     x0=rng.normal(size=(50, 1)),
                     psi=rng.normal(size=(50, n, 1, 1)),
                     counts=rng.poisson(0.5, size=(50, n, 1)).astype(np.int64),
                     intensities=np.array([1.0]),
                     dM=0.5 * rng.normal(size=(50, n, 1)))
        for p in (1.0, 1.5, 2.0):
            rep = jump_bound_check(path, p)
            assert rep.ok and rep.n_events > 0

    def test_out_of_range_p_rejected(self):
        # the max-weighted bound genuinely fails above p = 2 (e.g. y=1,
        # e=-2.2, p=3), so the kernel refuses rather than reporting noise
        with pytest.raises(DomainError):
            jump_bound_margins(np.ones((1, 1)), np.ones((1, 1)), 3.0)

    @given(st.floats(1.0, 2.0), st.integers(1, 4), st.integers(0, 2**31 - 1))
    @settings(max_examples=200, deadline=None)
    def test_property_nonnegative(self, p, d, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=(64, d)) * 2
        e = rng.normal(size=(64, d)) * 3
        assert jump_bound_margins(y, e, p).min() >= -1e-12


class TestConvexity:
    @pytest.mark.parametrize("p", [2.0, 2.5, 3.0])
    def test_lower_bound_on_random_pairs(self, p):
        rng = np.random.default_rng(100)
        x = rng.normal(size=(100_000, 3))
        y = rng.normal(size=(100_000, 3))
        assert convexity_margins(x, y, p).min() >= -1e-12


class TestZeroSet:
    def test_zero_solution_zero_mass(self):
        act = JumpActivity.empty()
        ens = simulate(TimeGrid.uniform(8, 1.0), 1, act, 500, seed=1)
        sol = backward_solve(make_model("zero", act), make_terminal("const:0"), ens)
        rep = zero_set_check(sol, 1.5)
        assert rep.z_mass == 0.0 and rep.mc_mass == 0.0

    def test_positive_solution_never_fires(self):
        act = JumpActivity.empty()
        ens = simulate(TimeGrid.uniform(8, 1.0), 1, act, 500, seed=2)
        sol = backward_solve(make_model("zero", act), make_terminal("one"), ens)
        rep = zero_set_check(sol, 1.5)
        assert rep.nodes_flagged == 0 and rep.z_mass == 0.0

    def test_aux_tree_constrains_z_not_m_jumps(self):
        # Y_0 = 0 with xi = aux sign: Z vanishes at the zero node while the
        # orthogonal bracket does not; the identity only constrains Z and [M]^c
        tree = TreeModel(n_steps=3, dt=0.25, k=1, activity=JumpActivity.single(0.5))
        sol = solve_exact(tree, make_model("zero", tree.activity),
                          make_terminal("aux1"))
        rep = zero_set_check(sol, 1.5)
        assert rep.nodes_flagged >= 1
        assert rep.z_mass <= 1e-12
        assert rep.mc_mass == 0.0
        assert rep.m_jump_mass > 0.5   # informational: M jumps off the zero set

    def test_p_range(self):
        tree = TreeModel(n_steps=2, dt=0.25, k=1, activity=JumpActivity.empty())
        sol = solve_exact(tree, make_model("zero", tree.activity),
                          make_terminal("one"))
        with pytest.raises(DomainError):
            zero_set_check(sol, 2.0)


def test_pred_quad_ratio_reported_not_asserted():
    act = JumpActivity.single(1.0)
    ens = simulate(TimeGrid.uniform(16, 1.0), 1, act, 3000, seed=4)
    sol = backward_solve(make_model("jumplin", act), make_terminal("count1"), ens)
    sol.jump_counts = ens.jump_counts
    ratio = pred_quad_ratio(sol, 1.5)
    assert np.isfinite(ratio) and ratio > 0


def test_beta_of_k():
    assert beta_of_K(0.3) == pytest.approx(2.36)
