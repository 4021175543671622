"""The frozen standard battery: small tree problems, matched Monte Carlo
problems, and comparison pairs.  Acceptance checks and the CLI suite both
run off these definitions, so tolerances are calibrated once against a
fixed list, never against whatever model happens to be handy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ComparisonData, GeneratorSpec, TerminalSpec
from .noise import JumpActivity, TimeGrid, simulate, simulate_two_point
from .oracle import TreeModel, solve_exact
from .registry import make_model, make_terminal
from .regression import RegressionBasis
from .solver import backward_solve


@dataclass(frozen=True)
class TreeCase:
    name: str
    model: str
    terminal: str
    n_steps: int
    dt: float
    intensities: tuple = ()
    k: int = 1
    d: int = 1


TREE_BATTERY = (
    TreeCase("const", "zero", "const:3", 6, 0.25),
    TreeCase("exp_decay", "ohlm1", "one", 6, 0.25),
    TreeCase("exp_growth", "ohlm_half", "one", 6, 0.25),
    TreeCase("z_drift", "zdrift", "w1", 6, 0.25),
    TreeCase("monotone_cubic", "cubic", "w1", 6, 0.25),
    TreeCase("time_dep", "tcos", "one", 6, 0.25),
    TreeCase("rotation_2d", "skew2d", "w1", 5, 0.25, d=2),
    TreeCase("jump_linear", "jumplin", "count1", 5, 0.2, (0.8,)),
    TreeCase("jump_negative", "jumpneg", "indjump", 5, 0.2, (0.8,)),
    TreeCase("jump_sup", "jumpmax", "w1", 5, 0.2, (1.0,)),
    TreeCase("mixed_two_atoms", "mixed1", "mixed", 4, 0.2, (0.5, 0.8)),
    TreeCase("aux_terminal", "zero", "aux1", 5, 0.2, (0.5,)),
    TreeCase("bounded_sign", "zdrift", "wsign", 5, 0.2),
)

# bounded-data cases for the pathwise sup bound (|xi| <= kappa, f(.,0,0,0) = 0)
BOUNDED_CASES = ("const", "exp_decay", "bounded_sign", "aux_terminal")


def build_tree_case(case: TreeCase):
    activity = (JumpActivity.from_list([(1.0 + 0.5 * j, lam)
                                        for j, lam in enumerate(case.intensities)])
                if case.intensities else JumpActivity.empty())
    spec = make_model(case.model, activity, k=case.k)
    xi = make_terminal(case.terminal, d=case.d)
    tree = TreeModel(n_steps=case.n_steps, dt=case.dt, k=case.k, activity=activity)
    return tree, spec, xi


def solve_tree_case(case: TreeCase, **kwargs):
    tree, spec, xi = build_tree_case(case)
    return solve_exact(tree, spec, xi, **kwargs), tree, spec, xi


@dataclass(frozen=True)
class McCase:
    name: str
    model: str
    terminal: str
    n_steps: int = 16
    horizon: float = 1.0
    intensities: tuple = ()
    k: int = 1


MC_BATTERY = (
    McCase("mc_exp_decay", "ohlm1", "one"),
    McCase("mc_z_drift", "zdrift", "w1"),
    McCase("mc_cubic", "cubic", "w1"),
    McCase("mc_time_dep", "tcos", "one"),
    McCase("mc_jump_linear", "jumplin", "count1", intensities=(0.8,)),
    McCase("mc_mixed", "mixed1", "mixed", intensities=(0.5, 0.8)),
)


def build_mc_case(case: McCase, n_paths: int, seed: int):
    activity = (JumpActivity.from_list([(1.0 + 0.5 * j, lam)
                                        for j, lam in enumerate(case.intensities)])
                if case.intensities else JumpActivity.empty())
    spec = make_model(case.model, activity, k=case.k)
    xi = make_terminal(case.terminal)
    grid = TimeGrid.uniform(case.n_steps, case.horizon)
    ens = simulate(grid, case.k, activity, n_paths, seed)
    return ens, spec, xi, activity


def solve_mc_case(case: McCase, n_paths: int, seed: int):
    ens, spec, xi, activity = build_mc_case(case, n_paths, seed)
    sol = backward_solve(spec, xi, ens)
    return sol, ens, spec, xi


# ---------------------------------------------------------------------------
# matched problems: identical discrete laws for tree and Monte Carlo
# ---------------------------------------------------------------------------

MATCHED_CASES = (
    TreeCase("matched_drift", "ohlm1", "w1", 3, 0.25),
    TreeCase("matched_jump", "mixed1", "w1", 3, 0.25, (0.8,)),
    TreeCase("matched_aux", "zero", "mixed", 3, 0.25, (0.8,)),
)


def matched_basis(case: TreeCase) -> RegressionBasis:
    # cell width under the lattice spacings (2 sqrt(dt) for W, 1 for counts,
    # 2 for aux sums) makes the indicator regression exact on the tree's law
    width = min(np.sqrt(case.dt), 0.5)
    return RegressionBasis(family="hypercube", cell_width=float(width),
                           include_w=True, include_counts=True, include_aux=True)


def solve_matched_pair(case: TreeCase, n_paths: int, seed: int):
    tree, spec, xi = build_tree_case(case)
    tsol = solve_exact(tree, spec, xi)
    grid = TimeGrid.uniform(case.n_steps, case.n_steps * case.dt)
    ens = simulate_two_point(grid, case.k, tree.activity, n_paths, seed)
    msol = backward_solve(spec, xi, ens, basis=matched_basis(case))
    return tsol, msol, ens, spec, xi


# ---------------------------------------------------------------------------
# comparison pairs (d = 1): compliant pairs plus the crafted violation
# ---------------------------------------------------------------------------

def _with_comp(spec: GeneratorSpec, kappa_const: float, theta: float) -> GeneratorSpec:
    comp = ComparisonData(
        kappa_fn=lambda t, y, z, psi, phi, _c=kappa_const: np.full(
            (y.shape[0], spec.intensities.size), _c),
        theta=np.full(spec.intensities.size, theta))
    return GeneratorSpec(name=spec.name + "+comp", d=spec.d, k=spec.k,
                         eval_fn=spec.eval_fn, alpha=spec.alpha, lip_K=spec.lip_K,
                         intensities=spec.intensities, comp=comp)


def comparison_pairs():
    """(name, tree, spec1, xi1, spec2, xi2) with the hypotheses satisfied."""
    act = JumpActivity.single(0.8)
    pairs = []

    spec = make_model("jumpneg", act)
    tree = TreeModel(n_steps=4, dt=0.2, k=1, activity=act)
    pairs.append(("same_driver_ordered_xi", tree, spec,
                  make_terminal("minw0"), spec, make_terminal("const:0")))

    base = make_model("ohlm1", act)
    shifted = GeneratorSpec(
        name="ohlm1_minus", d=1, k=1,
        eval_fn=lambda t, y, z, psi: -y - 0.1,
        alpha=-1.0, lip_K=0.0, intensities=act.intensities)
    pairs.append(("ordered_drivers", tree, shifted, make_terminal("one"),
                  _with_comp(base, 0.0, 0.0), make_terminal("one")))

    lin = make_model("jumplin", act)
    pairs.append(("jump_slope_ordered_xi", tree, lin, make_terminal("minw0"),
                  lin, make_terminal("indjump")))
    return pairs


def violation_pair(epsilon: float = 0.5):
    """Crafted pair with kappa = -2 < -1: xi^1 = -eps 1_{jump} <= 0 = xi^2,
    same driver both sides, yet Y^1_0 = q eps > 0 = Y^2_0 on a short tree."""
    act = JumpActivity.single(0.8)
    tree = TreeModel(n_steps=2, dt=0.125, k=1, activity=act)
    spec = make_model("jumpbad", act)

    xi1 = TerminalSpec(
        name="neg_indjump", mode="functional-of-state",
        eval_fn=lambda s, _e=epsilon: -_e * (s.jump_totals[:, :1] > 0).astype(float),
        d=1, bound=epsilon)
    xi2 = make_terminal("const:0")
    return "kappa_below_minus_one", tree, spec, xi1, spec, xi2
