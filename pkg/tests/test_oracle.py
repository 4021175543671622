import numpy as np
import pytest

from bsdelab.errors import ConfigurationError, ResourceError
from bsdelab.model import TerminalSpec
from bsdelab.noise import JumpActivity
from bsdelab.oracle import (TreeModel, decompose_increment, rhs_functionals,
                            solve_exact)
from bsdelab.registry import make_model, make_terminal


def _tree(n_steps=3, dt=0.25, lam=None, k=1):
    act = JumpActivity.single(lam) if lam else JumpActivity.empty()
    return TreeModel(n_steps=n_steps, dt=dt, k=k, activity=act)


def test_budget_enforced():
    act = JumpActivity.from_list([(1.0, 0.5), (2.0, 0.5), (3.0, 0.5)])
    with pytest.raises(ResourceError):
        TreeModel(n_steps=8, dt=0.25, k=2, activity=act)


def test_q_must_be_in_unit_interval():
    with pytest.raises(ConfigurationError):
        TreeModel(n_steps=2, dt=0.5, k=1, activity=JumpActivity.single(2.5))


def test_outcome_probabilities_sum_to_one():
    tree = _tree(lam=0.8)
    dw, ind, aux, prob = tree.outcomes()
    assert prob.sum() == pytest.approx(1.0, abs=1e-14)
    assert dw.shape == (tree.branching, 1)


class TestSolveExact:
    def test_constant_terminal(self):
        tree = _tree(lam=0.5)
        sol = solve_exact(tree, make_model("zero", tree.activity),
                          make_terminal("const:2.5"))
        for y in sol.Y:
            assert np.allclose(y, 2.5, atol=1e-14)
        for arr in sol.Z + sol.psi + sol.dM:
            assert np.allclose(arr, 0.0, atol=1e-14)

    def test_aux_terminal_all_in_m(self):
        # xi = first aux sign is orthogonal to W and pi: Y_0 = 0, Z = psi = 0,
        # dM is +-1 on the first step only
        tree = _tree(n_steps=3, lam=0.5)
        sol = solve_exact(tree, make_model("zero", tree.activity),
                          make_terminal("aux1"))
        assert sol.y0[0] == pytest.approx(0.0, abs=1e-14)
        assert all(np.allclose(z, 0.0, atol=1e-14) for z in sol.Z)
        assert all(np.allclose(p, 0.0, atol=1e-14) for p in sol.psi)
        dw, ind, aux, prob = tree.outcomes()
        assert np.allclose(sol.dM[0][0, :, 0], aux)
        assert np.allclose(sol.dM[1], 0.0, atol=1e-14)

    def test_implicit_euler_closed_form(self):
        # f(y) = -y, xi = 1, 4 steps of 0.25: y_i = y_{i+1} / (1 + dt)
        tree = _tree(n_steps=4, dt=0.25)
        sol = solve_exact(tree, make_model("ohlm1", tree.activity),
                          make_terminal("one"))
        assert sol.y0[0] == pytest.approx(1.0 / 1.25**4, abs=1e-10)
        assert sol.y0[0] == pytest.approx(0.4096, abs=1e-10)

    def test_identity_and_orthogonality(self):
        tree = _tree(n_steps=4, lam=0.8)
        sol = solve_exact(tree, make_model("mixed1", tree.activity),
                          make_terminal("mixed"))
        assert sol.identity_residual() <= 1e-10
        assert sol.orthogonality_max() <= 1e-12

    def test_two_initializations_agree(self):
        tree = _tree(n_steps=4, lam=0.8)
        spec = make_model("cubic", tree.activity)
        xi = make_terminal("w1")
        a = solve_exact(tree, spec, xi, init="mean")
        b = solve_exact(tree, spec, xi, init="zero")
        worst = max(float(np.max(np.abs(x - y))) for x, y in zip(a.Y, b.Y))
        assert worst <= 1e-10


class TestDecompose:
    def test_brownian_increment(self):
        tree = _tree(n_steps=1, lam=0.5)
        dw, ind, aux, prob = tree.outcomes()
        child = 2.0 * dw[:, :1][None, :, :]      # 2 * first Brownian step
        mean, z, psi, dm = decompose_increment(tree, child)
        assert mean[0, 0] == pytest.approx(0.0, abs=1e-14)
        assert z[0, 0, 0] == pytest.approx(2.0, abs=1e-12)
        assert np.allclose(psi, 0.0, atol=1e-12)
        assert np.allclose(dm, 0.0, atol=1e-12)

    def test_compensated_indicator(self):
        tree = _tree(n_steps=1, lam=0.5)
        dw, ind, aux, prob = tree.outcomes()
        q = tree.q[0]
        child = (3.0 * (ind[:, 0] - q))[None, :, None]
        mean, z, psi, dm = decompose_increment(tree, child)
        assert psi[0, 0, 0] == pytest.approx(3.0, abs=1e-12)
        assert np.allclose(z, 0.0, atol=1e-12)
        assert np.allclose(dm, 0.0, atol=1e-12)

    def test_product_goes_to_m(self):
        # (Brownian step) * (aux step) is orthogonal to both projectors
        tree = _tree(n_steps=1, lam=0.5)
        dw, ind, aux, prob = tree.outcomes()
        child = (dw[:, 0] * aux)[None, :, None]
        mean, z, psi, dm = decompose_increment(tree, child)
        assert np.allclose(z, 0.0, atol=1e-12)
        assert np.allclose(psi, 0.0, atol=1e-12)
        assert np.allclose(dm[0, :, 0], dw[:, 0] * aux, atol=1e-12)


class TestPathwiseNorms:
    def test_constant_solution(self):
        tree = _tree(lam=0.5)
        sol = solve_exact(tree, make_model("zero", tree.activity),
                          make_terminal("const:-2"))
        for p in (1.5, 2.0, 3.0):
            n = sol.pathwise_norms(p)
            assert n["sup_Y"] == pytest.approx(2.0**p, rel=1e-12)
            assert n["hp_Z"] == 0.0 and n["mp_M"] == 0.0 and n["lp_psi"] == 0.0

    def test_aux_terminal_unit_bracket(self):
        tree = _tree(n_steps=2, lam=0.5)
        sol = solve_exact(tree, make_model("zero", tree.activity),
                          make_terminal("aux1"))
        for p in (1.5, 2.0):
            assert sol.pathwise_norms(p)["mp_M"] == pytest.approx(1.0, abs=1e-12)

    def test_two_step_brownian_variance(self):
        # f = 0, xi = W-surrogate terminal, p = 2: E int |Z|^2 dt = Var(xi) = 2 dt
        tree = _tree(n_steps=2, dt=0.25)
        sol = solve_exact(tree, make_model("zero", tree.activity),
                          make_terminal("w1"))
        n = sol.pathwise_norms(2.0)
        assert n["hp_Z"] == pytest.approx(2 * 0.25, abs=1e-12)
        assert n["xi_p"] == pytest.approx(2 * 0.25, abs=1e-12)


def test_l2_stability_frozen_constant():
    # perturbing xi by delta moves the squared norms by at most C delta^2;
    # C fitted once on this problem and frozen with 5% headroom
    tree = _tree(n_steps=3, lam=0.8)
    spec = make_model("mixed1", tree.activity)

    def solve_shifted(delta):
        xi = TerminalSpec(
            name=f"w1+{delta}", mode="functional-of-state",
            eval_fn=lambda s, _d=delta: s.w_terminal[:, :1] + _d, d=1)
        return solve_exact(tree, spec, xi)

    base = solve_shifted(0.0)

    def gap(delta):
        pert = solve_shifted(delta)
        dsup = max(float(np.max(np.sum((a - b) ** 2, axis=1)))
                   for a, b in zip(base.Y, pert.Y))
        return dsup

    frozen_C = 1.02   # fitted on delta = 0.1 during development (gap ~ delta^2)
    for delta in (0.1, 0.2, 0.4):
        assert gap(delta) <= frozen_C * delta**2 * 1.05


def test_rhs_functionals_constant_case():
    tree = _tree(n_steps=2)
    sol = solve_exact(tree, make_model("zero", tree.activity),
                      make_terminal("const:3"))
    rhs = rhs_functionals(sol, 2.0)
    assert rhs["xi_p"] == pytest.approx(9.0, abs=1e-12)
    assert rhs["rhs_p1"] == pytest.approx(9.0, abs=1e-12)


def test_json_export_round_trips(tmp_path):
    import json
    tree = _tree(n_steps=2, lam=0.5)
    sol = solve_exact(tree, make_model("jumplin", tree.activity),
                      make_terminal("count1"))
    payload = json.loads(sol.to_json())
    assert payload["n_steps"] == 2
    assert len(payload["levels"]) == 3
    assert np.asarray(payload["levels"][0]["Y"]).shape == (1, 1)
