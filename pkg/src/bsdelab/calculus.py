"""Numerical verification of the |x|^p stochastic-calculus toolbox.

Discrete semimartingale convention: a path stores the raw decomposition
per step — drift rate K, Brownian term Z dW, per-atom jump contributions
psi * (counts against pi itself), and the orthogonal increment dM — and
reconstructs as

    X_{i+1} = X_i + K_i dt + Z_i dW_i + sum_j psi_ij c_ij + dM_i.

The |x|^p formula is stated for the compensated decomposition, so the
evaluator internally uses the drift K + sum_j psi_j lambda_j.  Evaluation
conventions (documented, and relied on by the tests):

* ds-integrals use left-endpoint Riemann sums (the predictable choice);
  a midpoint flag averages the step's endpoint states for deterministic
  convergence studies.
* jump events inside a step are applied sequentially — atoms in index
  order, each atom's count one event at a time, then the M jump — with the
  running pre-jump state feeding both the pi-integral and its Taylor
  remainder.  The compensator halves of the ds-terms then cancel the
  lambda part of the drift term algebraically, which is what makes the
  residual exactly zero on pure-jump paths regardless of the grid.
* M is treated as purely discontinuous: its bracket has no continuous
  part, so the d[M]^c term of the formula vanishes identically here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DomainError

# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------


def c_of_p(p: float) -> float:
    """Convexity constant of the jump lower bound: p(p-1)/2 on [1,2), p/2 above."""
    if p < 1:
        raise DomainError("c(p) needs p >= 1")
    return p * (p - 1.0) / 2.0 if p < 2.0 else p / 2.0


def kappa_of_p(p: float) -> float:
    """min(p/2, p(p-1) 3^{1-p}); positive for p > 1."""
    if p <= 1:
        raise DomainError("kappa_p needs p > 1")
    return min(p / 2.0, p * (p - 1.0) * 3.0 ** (1.0 - p))


def beta_of_K(K: float) -> float:
    return 2.0 * (1.0 + 2.0 * K**2)


def nu_of(alpha: float, K: float, p: float) -> float:
    """Random-horizon weight threshold nu = alpha + K^2 / ((p-1) ^ 1)."""
    if p <= 1:
        raise DomainError("nu needs p > 1")
    return alpha + K**2 / min(p - 1.0, 1.0)


@dataclass(frozen=True)
class EstimateConstants:
    """Explicit constants of the estimates; e_p has no published value and
    stays unset — only its empirical ratio is ever reported."""

    p: float
    c: float
    kappa_p: Optional[float]
    beta: float
    nu: Optional[float]
    rho: Optional[float] = None
    e_p: Optional[float] = None


def constants(p: float, K: float = 0.0, alpha: float = 0.0,
              rho: Optional[float] = None) -> EstimateConstants:
    if p < 1:
        raise DomainError("constants need p >= 1")
    if p == 1:
        return EstimateConstants(p=p, c=c_of_p(p), kappa_p=None,
                              beta=beta_of_K(K), nu=None, rho=rho)
    return EstimateConstants(p=p, c=c_of_p(p), kappa_p=kappa_of_p(p),
                          beta=beta_of_K(K), nu=nu_of(alpha, K, p), rho=rho)


# ---------------------------------------------------------------------------
# discrete semimartingale paths
# ---------------------------------------------------------------------------


def _norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x**2, axis=-1))


def _dir(x: np.ndarray) -> np.ndarray:
    """x-check = x / |x| off zero, 0 at zero."""
    n = _norm(x)
    safe = np.where(n > 0, n, 1.0)
    return np.where(n[..., None] > 0, x / safe[..., None], 0.0)


def _pow_dir(x: np.ndarray, p: float) -> np.ndarray:
    """|x|^{p-1} x-check, continuous at 0 for p > 1."""
    n = _norm(x)
    return np.where(n[..., None] > 0,
                    n[..., None] ** (p - 1.0) * _dir(x), 0.0)


@dataclass
class SemimartingalePath:
    """Sampled discrete semimartingales; all arrays share (n_paths, n_steps, ...)."""

    times: np.ndarray            # (n+1,)
    x0: np.ndarray               # (N, d)
    drift: np.ndarray            # (N, n, d) rates K
    Z: np.ndarray                # (N, n, d, k)
    dW: np.ndarray               # (N, n, k)
    psi: np.ndarray              # (N, n, d, A)
    counts: np.ndarray           # (N, n, A) nonnegative integers
    intensities: np.ndarray      # (A,)
    dM: np.ndarray               # (N, n, d)
    _X: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        n = self.times.size - 1
        npaths, d = self.x0.shape
        expect = {"drift": (npaths, n, d), "dM": (npaths, n, d),
                  "dW": (npaths, n, self.Z.shape[3] if self.Z.ndim == 4 else 0),
                  "counts": (npaths, n, self.intensities.size)}
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ConfigurationError(f"{name} has shape "
                                         f"{getattr(self, name).shape}, expected {shape}")

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def X(self) -> np.ndarray:
        """Running values (N, n+1, d); X_{i+1} = X_i + K dt + Z dW +
        sum_j psi_j counts_j + dM."""
        if self._X is None:
            dt = self.dt
            inc = (self.drift * dt[None, :, None]
                   + np.einsum("pidk,pik->pid", self.Z, self.dW)
                   + np.einsum("pidj,pij->pid", self.psi, self.counts.astype(float))
                   + self.dM)
            X = np.empty((self.x0.shape[0], self.times.size, self.x0.shape[1]))
            X[:, 0] = self.x0
            np.cumsum(inc, axis=1, out=X[:, 1:])
            X[:, 1:] += self.x0[:, None, :]
            self._X = X
        return self._X

    def reconstruction_error(self) -> float:
        inc = np.diff(self.X, axis=1)
        dt = self.dt
        direct = (self.drift * dt[None, :, None]
                  + np.einsum("pidk,pik->pid", self.Z, self.dW)
                  + np.einsum("pidj,pij->pid", self.psi, self.counts.astype(float))
                  + self.dM)
        return float(np.max(np.abs(inc - direct), initial=0.0))

    @classmethod
    def from_solution(cls, sol, spec, ensemble, driver_weights=None) -> "SemimartingalePath":
        """View a solver quadruple as a semimartingale: dY = -f dt + Z dW +
        psi dpi~ + dM, i.e. raw drift K = -f - sum_j psi_j lambda_j."""
        times = sol.grid.times
        n = sol.grid.n_steps
        lam = sol.intensities
        f_vals = np.empty_like(sol.Y[:, :-1, :])
        for i in range(n):
            w = driver_weights[:, i][:, None] if driver_weights is not None else 1.0
            f_vals[:, i] = w * spec(float(times[i]), sol.Y[:, i], sol.Z[:, i], sol.psi[:, i])
        comp_drift = sol.psi @ lam if lam.size else 0.0
        return cls(times=times, x0=sol.Y[:, 0].copy(), drift=-f_vals - comp_drift,
                   Z=sol.Z.copy(), dW=ensemble.dW.copy(), psi=sol.psi.copy(),
                   counts=ensemble.jump_counts.copy(), intensities=lam,
                   dM=sol.dM.copy())


# ---------------------------------------------------------------------------
# the |x|^p formula
# ---------------------------------------------------------------------------


def ito_p_terms(path: SemimartingalePath, p: float, convention: str = "left") -> dict:
    """Evaluate every term of the |x|^p expansion per step; see module
    docstring for the discrete conventions.  Returns per-step term arrays
    (N, n) plus the jump-event lists used by the bound checks."""
    if p <= 1:
        raise DomainError("the |x|^p evaluator needs p > 1 (no local time term)")
    if convention not in ("left", "midpoint"):
        raise ConfigurationError("convention must be 'left' or 'midpoint'")
    X = path.X
    dt = path.dt
    lam = path.intensities
    npaths, nsteps = path.drift.shape[:2]

    drift_term = np.zeros((npaths, nsteps))
    comp_term = np.zeros((npaths, nsteps))
    bm_term = np.zeros((npaths, nsteps))
    m_lin_term = np.zeros((npaths, nsteps))
    pi_lin_term = np.zeros((npaths, nsteps))
    pi_taylor_term = np.zeros((npaths, nsteps))
    m_taylor_term = np.zeros((npaths, nsteps))
    second_z_term = np.zeros((npaths, nsteps))
    jump_pre, jump_size = [], []      # pi jumps: pre-state and size
    mjump_pre, mjump_size = [], []    # M jumps

    max_counts = path.counts.max(axis=(0, 1)) if path.counts.size else np.zeros(0)

    for i in range(nsteps):
        x_left = X[:, i]
        x_state = 0.5 * (X[:, i] + X[:, i + 1]) if convention == "midpoint" else x_left
        pd_state = _pow_dir(x_state, p)

        # compensated drift: the formula's K is raw drift + sum psi_j lambda_j
        k_comp = path.drift[:, i] + (path.psi[:, i] @ lam if lam.size else 0.0)
        drift_term[:, i] = p * np.sum(pd_state * k_comp, axis=1) * dt[i]
        if lam.size:
            comp = path.psi[:, i] @ lam
            comp_term[:, i] = -p * np.sum(pd_state * comp, axis=1) * dt[i]

        zdw = np.einsum("pdk,pk->pd", path.Z[:, i], path.dW[:, i])
        bm_term[:, i] = p * np.sum(pd_state * zdw, axis=1)

        # second-order Brownian term
        n_state = _norm(x_state)
        mask = n_state > 0
        z2 = np.sum(path.Z[:, i] ** 2, axis=(1, 2))
        xd = _dir(x_state)
        zx = np.einsum("pdk,pd->pk", path.Z[:, i], xd)
        quad = np.sum(zx**2, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            weight = np.where(mask, n_state ** (p - 2.0), 0.0)
        second_z_term[:, i] = (p / 2.0) * weight * (
            (2.0 - p) * (z2 - quad) + (p - 1.0) * z2) * dt[i]

        # jump events: continuous displacement first, then sequenced jumps
        state = x_left + path.drift[:, i] * dt[i] + zdw
        for j in range(lam.size):
            cij = path.counts[:, i, j]
            for rep in range(int(max_counts[j])):
                live = cij > rep
                if not np.any(live):
                    break
                pre = state[live]
                size = path.psi[live, i, :, j]
                pdj = _pow_dir(pre, p)
                lin = p * np.sum(pdj * size, axis=1)
                tay = (_norm(pre + size) ** p - _norm(pre) ** p - lin)
                pi_lin_term[live, i] += lin
                pi_taylor_term[live, i] += tay
                jump_pre.append(pre)
                jump_size.append(size)
                state = state.copy()
                state[live] = pre + size
        dm = path.dM[:, i]
        moved = np.any(dm != 0.0, axis=1)
        pdm = _pow_dir(state, p)
        lin_m = p * np.sum(pdm * dm, axis=1)
        tay_m = _norm(state + dm) ** p - _norm(state) ** p - lin_m
        m_lin_term[:, i] = lin_m
        m_taylor_term[:, i] = tay_m
        if np.any(moved):
            mjump_pre.append(state[moved])
            mjump_size.append(dm[moved])

    return {
        "drift": drift_term, "pi_linear": pi_lin_term, "pi_compensator": comp_term,
        "brownian": bm_term, "m_linear": m_lin_term, "pi_taylor": pi_taylor_term,
        "m_taylor": m_taylor_term, "second_z": second_z_term,
        "second_mc": np.zeros((npaths, nsteps)),   # [M]^c = 0 by convention
        "jump_events": (jump_pre, jump_size),
        "m_jump_events": (mjump_pre, mjump_size),
    }


def ito_p_residual(path: SemimartingalePath, p: float,
                   convention: str = "left") -> np.ndarray:
    """LHS - RHS of the |x|^p expansion at every grid node; (N, n+1)."""
    terms = ito_p_terms(path, p, convention)
    X = path.X
    lhs = _norm(X) ** p
    per_step = (terms["drift"] + terms["pi_compensator"] + terms["brownian"]
                + terms["m_linear"] + terms["pi_linear"] + terms["pi_taylor"]
                + terms["m_taylor"] + terms["second_z"] + terms["second_mc"])
    rhs = np.empty_like(lhs)
    rhs[:, 0] = lhs[:, 0]
    rhs[:, 1:] = lhs[:, 0][:, None] + np.cumsum(per_step, axis=1)
    return lhs - rhs


def jump_bound_margins(y_pre: np.ndarray, jumps: np.ndarray, p: float) -> np.ndarray:
    """Margins of the jump lower bound, one per event:

      |y + e|^p - |y|^p - p |y|^{p-1} y-check . e
        - c(p) |e|^2 (|y|^2 v |y + e|^2)^{p/2 - 1} 1_{|y| v |y+e| != 0}

    Nonnegative by convexity for p in [1, 2), exact equality at p = 2.  The
    max-weighted form is false above 2 (the segment bound on |y + a e| flips
    sign in the exponent), so larger p is rejected."""
    if not 1 <= p <= 2:
        raise DomainError("the max-weighted jump bound holds for p in [1, 2] only")
    c = c_of_p(p)
    n0 = _norm(y_pre)
    n1 = _norm(y_pre + jumps)
    lin = p * np.sum(_pow_dir(y_pre, p) * jumps, axis=-1)
    lhs = n1**p - n0**p - lin
    m = np.maximum(n0, n1)
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.where(m > 0, (m**2) ** (p / 2.0 - 1.0), 0.0)
    rhs = c * np.sum(jumps**2, axis=-1) * weight
    return lhs - rhs


@dataclass
class JumpBoundReport:
    p: float
    n_events: int
    min_margin: float
    ok: bool


def jump_bound_check(path: SemimartingalePath, p: float,
                     tol: float = 1e-12) -> JumpBoundReport:
    """Evaluate the bound on every M jump and every pi jump of the path."""
    if not 1 <= p <= 2:
        raise DomainError("the max-weighted jump bound holds for p in [1, 2] only")
    # event extraction does not depend on the exponent; 1.5 keeps it valid at p = 1
    terms = ito_p_terms(path, max(p, 1.5), "left")
    pres, sizes = terms["m_jump_events"]
    jp, js = terms["jump_events"]
    pres, sizes = list(pres) + list(jp), list(sizes) + list(js)
    if not pres:
        return JumpBoundReport(p=p, n_events=0, min_margin=0.0, ok=True)
    y = np.concatenate(pres, axis=0)
    e = np.concatenate(sizes, axis=0)
    margins = jump_bound_margins(y, e, p)
    return JumpBoundReport(p=p, n_events=y.shape[0],
                           min_margin=float(margins.min()),
                           ok=bool(margins.min() >= -tol))


def convexity_margins(x: np.ndarray, y: np.ndarray, p: float) -> np.ndarray:
    """theta(x+y) - theta(x) - grad theta(x).y - p(p-1) 3^{1-p} |y|^2 |x|^{p-2}
    with theta = |.|^p, p >= 2; nonnegative."""
    if p < 2:
        raise DomainError("the Taylor lower bound is stated for p >= 2")
    nx = _norm(x)
    lhs = _norm(x + y) ** p - nx**p - p * np.sum(_pow_dir(x, p) * y, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        wx = np.where(nx > 0, nx ** (p - 2.0), 0.0 if p > 2 else 1.0)
    if p == 2:
        wx = np.ones_like(nx)
    rhs = p * (p - 1.0) * 3.0 ** (1.0 - p) * np.sum(y**2, axis=-1) * wx
    return lhs - rhs


@dataclass
class ZeroSetReport:
    z_mass: float
    mc_mass: float
    m_jump_mass: float
    threshold: float
    nodes_flagged: int


def zero_set_check(solution, p: float, tol_zero: float = 1e-9) -> ZeroSetReport:
    """Mass of int 1_{Y=0} [|Z|^2 ds + d[M]^c] on a solved process.

    Accepts a SolutionEnsemble or a TreeSolution.  The indicator fires where
    |Y| < tol_zero * sup |Y|; the identity constrains only Z and the
    continuous bracket of M (identically zero in this discrete setting), so
    the jump mass of M over the zero set is reported separately for
    information and is NOT asserted to vanish."""
    if not 1 < p < 2:
        raise DomainError("the zero-set identity is stated for p in (1, 2)")
    if hasattr(solution, "tree"):   # TreeSolution
        tree = solution.tree
        dw, ind, aux, prob = tree.outcomes()
        sup = max(float(_norm(y).max()) for y in solution.Y)
        thr = tol_zero * max(sup, 1e-300)
        z_mass = 0.0
        mj_mass = 0.0
        pvec = np.ones(1)
        for i in range(tree.n_steps):
            at_zero = _norm(solution.Y[i]) < thr
            z2 = np.sum(solution.Z[i] ** 2, axis=(1, 2)) * tree.dt
            z_mass += float(np.sum(pvec * np.where(at_zero, z2, 0.0)))
            dm2 = np.einsum("o,nod->n", prob, solution.dM[i] ** 2)
            mj_mass += float(np.sum(pvec * np.where(at_zero, dm2, 0.0)))
            pvec = (pvec[:, None] * prob[None, :]).reshape(-1)
        flagged = int(sum(int(np.count_nonzero(_norm(y) < thr)) for y in solution.Y))
        return ZeroSetReport(z_mass=z_mass, mc_mass=0.0, m_jump_mass=mj_mass,
                             threshold=thr, nodes_flagged=flagged)

    Y, Z = solution.Y, solution.Z
    dt = solution.grid.dt
    sup = float(_norm(Y).max())
    thr = tol_zero * max(sup, 1e-300)
    at_zero = _norm(Y[:, :-1, :]) < thr
    z2 = np.sum(Z**2, axis=(2, 3)) * dt[None, :]
    dm2 = np.sum(solution.dM**2, axis=2)
    n = Y.shape[0]
    return ZeroSetReport(
        z_mass=float(np.sum(np.where(at_zero, z2, 0.0)) / n),
        mc_mass=0.0,
        m_jump_mass=float(np.sum(np.where(at_zero, dm2, 0.0)) / n),
        threshold=thr,
        nodes_flagged=int(np.count_nonzero(at_zero)))


def pred_quad_ratio(sol, p: float) -> float:
    """Empirical ratio E(int ||psi||^2 mu ds)^{p/2} / E(int int |psi|^2 pi)^{p/2}.

    The constant e_p bounding it has no published value; the ratio is
    reported for information only."""
    lam = sol.intensities
    if lam.size == 0:
        return float("nan")
    dt = sol.grid.dt
    mu_side = np.sum(np.sum(sol.psi**2, axis=2) * lam[None, None, :], axis=2) * dt[None, :]
    counts = getattr(sol, "jump_counts", None)
    if counts is None:
        raise ConfigurationError("pass a solution carrying jump counts")
    pi_side = np.sum(np.sum(sol.psi**2, axis=2) * counts, axis=2)
    num = float(np.mean(np.sum(mu_side, axis=1) ** (p / 2.0)))
    den = float(np.mean(np.sum(pi_side, axis=1) ** (p / 2.0)))
    return num / den if den > 0 else float("inf")
