"""Monte Carlo backward solver on path ensembles.

The scheme is explicit in z and implicit (Picard) in y: per time step the
martingale integrands come from normalized regressions of the next value
against the driving increments, and the remaining scalar equation
y = E[Y_next | state] + f(t, y, z, psi) dt is solved by a damped fixed
point, mirroring the two-level structure where an inner problem is solved
in y for frozen (z, psi) slots and an outer contraction iterates on them.

The orthogonal increment dM is defined as the full regression residual of
the centered one-step increment after removing the fitted Z and psi
projections.  That makes the discrete backward identity hold to round-off
pathwise, keeps M_0 = 0, and leaves M empirically uncorrelated with the
Brownian and compensated-jump increments at the 1/sqrt(n_paths) rate.

Projection normalizations (documented): the Z regression target is
Y_next * dW / dt (dt is the per-step variance of a Brownian increment in
both supported laws); the psi_j target is Y_next * dpi~_j / v_j where
v_j = lambda_j dt for Poisson counts and v_j = q_j (1 - q_j) for the
two-point (tree-matched) Bernoulli law.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, NumericError
from .fixedpoint import CONTRACTION_LIMIT, damped_fixed_point
from .model import GeneratorSpec, TerminalSpec, TerminalState, l2_mu_norm
from .noise import LAW_TWO_POINT, PathEnsemble, compensated_increments
from .regression import RegressionBasis, StateFeatures, design_matrix, fit_values


def default_beta(lip_K: float) -> float:
    """Exponential weight of the contraction norm, beta = 2 (1 + 2 K^2)."""
    return 2.0 * (1.0 + 2.0 * lip_K**2)


@dataclass(frozen=True)
class PicardParams:
    max_outer: int = 25          # outer contraction-map iterations
    max_inner: int = 2000        # per-step fixed-point iterations
    tol_beta: float = 1e-10      # outer stopping threshold on the beta norm
    beta: Optional[float] = None  # defaults to 2 (1 + 2 K^2)
    inner_tol: float = 1e-12

    def resolve_beta(self, spec: GeneratorSpec) -> float:
        return default_beta(spec.lip_K) if self.beta is None else self.beta


@dataclass
class SolutionEnsemble:
    """Sampled solution quadruple on a grid.

    Y (N, n+1, d); Z (N, n, d, k); psi (N, n, d, A); M (N, n+1, d) cumulative
    with M_0 = 0.  Terminal Y equals xi pathwise, bitwise.
    """

    grid: object
    Y: np.ndarray
    Z: np.ndarray
    psi: np.ndarray
    M: np.ndarray
    intensities: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    @property
    def d(self) -> int:
        return self.Y.shape[2]

    @property
    def dM(self) -> np.ndarray:
        return np.diff(self.M, axis=1)

    @property
    def y0(self) -> np.ndarray:
        return self.Y[:, 0, :].mean(axis=0)

    @property
    def y0_se(self) -> float:
        # Y_0 is (up to the deterministic driver term) the sample mean of the
        # first-step values, so its error scale is their component-wise SE
        if self.Y.shape[1] == 1:
            return 0.0
        se_vec = self.Y[:, 1, :].std(axis=0) / np.sqrt(self.n_paths)
        return float(np.sqrt(np.sum(se_vec**2)))

    def scaled(self, factor: float) -> "SolutionEnsemble":
        return SolutionEnsemble(self.grid, factor * self.Y, factor * self.Z,
                                factor * self.psi, factor * self.M,
                                self.intensities, dict(self.provenance))


def _check_same_lattice(a: SolutionEnsemble, b: SolutionEnsemble):
    if (a.Y.shape != b.Y.shape or not np.array_equal(a.grid.times, b.grid.times)):
        raise ConfigurationError("solutions live on different grids or path counts")


def beta_norm(a: SolutionEnsemble, b: SolutionEnsemble, beta: float) -> float:
    """Squared exponentially-weighted distance of two solution quadruples:

      E[sup_i e^{beta t_i} |dY_i|^2] + E[sum_i e^{beta t_i} |dZ_i|^2 dt_i]
      + E[sum_i e^{beta t_i} ||dpsi_i||^2_mu dt_i]
      + E[sum_i e^{beta t_i} |dM-increment_i|^2]

    Symmetric, zero iff the quadruples agree on every path; scaling both
    components of the difference by c scales the value by c^2.
    """
    _check_same_lattice(a, b)
    t = a.grid.times
    dt = a.grid.dt
    wt_nodes = np.exp(beta * t)
    wt_steps = np.exp(beta * t[:-1])

    dY = a.Y - b.Y
    sup_term = np.max(wt_nodes[None, :] * np.sum(dY**2, axis=2), axis=1).mean()
    dZ = a.Z - b.Z
    z_term = np.einsum("pidk,i->", dZ**2, wt_steps * dt) / a.n_paths
    dpsi = a.psi - b.psi
    if a.intensities.size:
        psi_sq = l2_mu_norm(dpsi, a.intensities) ** 2  # (N, n)
        psi_term = float((psi_sq * (wt_steps * dt)[None, :]).sum() / a.n_paths)
    else:
        psi_term = 0.0
    dMinc = a.dM - b.dM
    m_term = np.einsum("pid,i->", dMinc**2, wt_steps) / a.n_paths
    return float(sup_term + z_term + psi_term + m_term)


def _increment_variances(ensemble: PathEnsemble, intensities: np.ndarray) -> np.ndarray:
    """Per step/atom variance of the compensated jump increment; (n, A)."""
    lam_dt = np.outer(ensemble.grid.dt, intensities)
    if ensemble.law == LAW_TWO_POINT:
        return lam_dt * (1.0 - lam_dt)
    return lam_dt


def check_contraction_threshold(spec: GeneratorSpec, ensemble: PathEnsemble):
    lam_tot = float(spec.intensities.sum())
    thr = ensemble.grid.max_step * (max(spec.alpha, 0.0)
                                    + spec.lip_K * (1.0 + np.sqrt(lam_tot)))
    if thr > CONTRACTION_LIMIT:
        raise ConfigurationError(
            f"dt * (alpha^+ + K (1 + sqrt(Lambda))) = {thr:.3g} exceeds "
            f"{CONTRACTION_LIMIT}; refine the grid")


def _picard_step(spec, t, cond_mean, z, psi, dt_scaled, tol, max_iter):
    """Damped fixed point for y = cond_mean + f(t,y,z,psi) * dt_scaled,
    where dt_scaled is (N,1) to allow pathwise driver weights."""
    return damped_fixed_point(
        lambda y: y - cond_mean - spec(t, y, z, psi) * dt_scaled,
        cond_mean, tol, max_iter, where=f"at t={t:.6g}")


def _backward_pass(spec, ensemble, basis, params, terminal, frozen=None,
                   driver_weights=None, tau=None, provenance=None):
    """Shared backward loop.  frozen=(V, phi) switches the driver's (z, psi)
    arguments to the given inputs (one application of the contraction map);
    otherwise the freshly projected Z_i, psi_i are used."""
    n = ensemble.grid.n_steps
    npaths = ensemble.n_paths
    d = spec.d
    k, a = ensemble.k, ensemble.n_atoms
    if k != spec.k:
        raise ConfigurationError("ensemble and generator disagree on k")
    if a != spec.n_atoms:
        raise ConfigurationError("ensemble and generator disagree on the atom count")

    times = ensemble.grid.times
    dt = ensemble.grid.dt
    comp = compensated_increments(
        ensemble, _activity_view(spec, ensemble)) if a else np.zeros((npaths, n, 0))
    var = _increment_variances(ensemble, spec.intensities) if a else np.zeros((n, 0))
    feats = StateFeatures(ensemble, basis, tau=tau)

    Y = np.empty((npaths, n + 1, d))
    Z = np.zeros((npaths, n, d, k))
    PSI = np.zeros((npaths, n, d, a))
    Minc = np.zeros((npaths, n, d))
    Y[:, n, :] = terminal
    inner_counts = []

    for i in range(n - 1, -1, -1):
        phi_mat = design_matrix(basis, feats.at(i))
        y_next = Y[:, i + 1, :]
        dw = ensemble.dW[:, i, :]
        dpi = comp[:, i, :]

        cond_mean = fit_values(phi_mat, y_next, context=f"at step {i}")
        centered = y_next - cond_mean
        targets = [np.einsum("pd,pl->pdl", centered, dw).reshape(npaths, d * k) / dt[i]]
        if a:
            scaled = dpi / var[i][None, :]
            targets.append(np.einsum("pd,pj->pdj", centered, scaled).reshape(npaths, d * a))
        fitted = fit_values(phi_mat, np.concatenate(targets, axis=1),
                            context=f"at step {i}")
        z_i = fitted[:, :d * k].reshape(npaths, d, k)
        psi_i = (fitted[:, d * k:].reshape(npaths, d, a) if a
                 else np.zeros((npaths, d, 0)))

        if frozen is not None:
            z_arg, psi_arg = frozen[0][:, i], frozen[1][:, i]
        else:
            z_arg, psi_arg = z_i, psi_i
        w_i = (driver_weights[:, i] if driver_weights is not None
               else np.ones(npaths))
        y_i, used = _picard_step(spec, float(times[i]), cond_mean, z_arg, psi_arg,
                                 (w_i * dt[i])[:, None], params.inner_tol,
                                 params.max_inner)
        inner_counts.append(used)

        Y[:, i, :] = y_i
        Z[:, i] = z_i
        PSI[:, i] = psi_i
        recon = np.einsum("pdl,pl->pd", z_i, dw)
        if a:
            recon = recon + np.einsum("pdj,pj->pd", psi_i, dpi)
        Minc[:, i] = y_next - cond_mean - recon

    M = np.zeros((npaths, n + 1, d))
    np.cumsum(Minc, axis=1, out=M[:, 1:, :])
    prov = dict(provenance or {})
    prov.update(model=spec.name, basis=basis.basis_id, seed=ensemble.seed,
                n_paths=npaths, law=ensemble.law,
                n_basis=int(design_matrix(basis, feats.at(max(n - 1, 0))).shape[1]) if n else 1,
                inner_iterations=inner_counts[::-1])
    return SolutionEnsemble(grid=ensemble.grid, Y=Y, Z=Z, psi=PSI, M=M,
                            intensities=spec.intensities.copy(), provenance=prov)


class _ActivityView:
    """Minimal duck-typed activity carrying just the intensities."""

    def __init__(self, intensities):
        self.intensities = intensities
        self.n_atoms = intensities.size


def _activity_view(spec, ensemble):
    if spec.n_atoms != ensemble.n_atoms:
        raise ConfigurationError("generator and ensemble disagree on the atom count")
    return _ActivityView(spec.intensities)


def default_basis_for(xi: TerminalSpec) -> RegressionBasis:
    return RegressionBasis(family="poly", degree=2, include_w=True,
                           include_counts=True, include_aux=xi.uses_aux)


def backward_solve(spec: GeneratorSpec, xi: TerminalSpec, ensemble: PathEnsemble,
                   basis: RegressionBasis | None = None,
                   params: PicardParams | None = None) -> SolutionEnsemble:
    """Regression-based backward induction for the full quadruple."""
    basis = basis or default_basis_for(xi)
    params = params or PicardParams()
    check_contraction_threshold(spec, ensemble)
    terminal = xi(TerminalState.from_ensemble(ensemble))
    return _backward_pass(spec, ensemble, basis, params, terminal,
                          provenance={"terminal": xi.name})


def apply_xi(spec: GeneratorSpec, xi: TerminalSpec, ensemble: PathEnsemble,
             input_sol: SolutionEnsemble, basis: RegressionBasis | None = None,
             params: PicardParams | None = None) -> SolutionEnsemble:
    """One application of the contraction map: solve the backward equation
    with the driver's (z, psi) slots frozen at the input's (V, phi)."""
    basis = basis or default_basis_for(xi)
    params = params or PicardParams()
    if input_sol.Y.shape[1] != ensemble.grid.n_steps + 1 \
            or input_sol.n_paths != ensemble.n_paths:
        raise ConfigurationError("input quadruple does not live on this ensemble")
    check_contraction_threshold(spec, ensemble)
    terminal = xi(TerminalState.from_ensemble(ensemble))
    return _backward_pass(spec, ensemble, basis, params, terminal,
                          frozen=(input_sol.Z, input_sol.psi),
                          provenance={"terminal": xi.name, "map": "Xi"})


def measure_contraction(spec: GeneratorSpec, xi: TerminalSpec,
                        ensemble: PathEnsemble, n_pairs: int = 5,
                        basis: RegressionBasis | None = None,
                        params: PicardParams | None = None,
                        seed: int = 99, scale: float = 1.0) -> list:
    """Measured beta-norm ratios ||Xi a - Xi b||_beta / ||a - b||_beta on
    random input pairs differing only in their (V, phi) components."""
    params = params or PicardParams()
    beta = params.resolve_beta(spec)
    n, npaths, d, k, a = (ensemble.grid.n_steps, ensemble.n_paths, spec.d,
                          spec.k, spec.n_atoms)
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))

    def random_input():
        sol = SolutionEnsemble(
            grid=ensemble.grid,
            Y=np.zeros((npaths, n + 1, d)),
            Z=scale * rng.standard_normal((npaths, n, d, k)),
            psi=scale * rng.standard_normal((npaths, n, d, a)),
            M=np.zeros((npaths, n + 1, d)),
            intensities=spec.intensities.copy())
        return sol

    ratios = []
    for _ in range(n_pairs):
        a_in, b_in = random_input(), random_input()
        out_a = apply_xi(spec, xi, ensemble, a_in, basis, params)
        out_b = apply_xi(spec, xi, ensemble, b_in, basis, params)
        num = beta_norm(out_a, out_b, beta)
        den = beta_norm(a_in, b_in, beta)
        ratios.append(float(np.sqrt(num / den)))
    return ratios


def picard_solve(spec: GeneratorSpec, xi: TerminalSpec, ensemble: PathEnsemble,
                 basis: RegressionBasis | None = None,
                 params: PicardParams | None = None):
    """Iterate the contraction map to its fixed point, reporting the
    beta-norm decrements.  backward_solve computes the same fixed point in
    one pass; this routine exists to observe the contraction."""
    params = params or PicardParams()
    beta = params.resolve_beta(spec)
    current = backward_solve(make_frozen_zero(spec), xi, ensemble, basis, params)
    history = []
    for _ in range(params.max_outer):
        nxt = apply_xi(spec, xi, ensemble, current, basis, params)
        dist = beta_norm(nxt, current, beta)
        history.append(dist)
        current = nxt
        if dist <= params.tol_beta:
            return current, history
    raise NumericError(
        f"outer Picard iteration did not reach tol_beta={params.tol_beta:g}; "
        f"last squared distance {history[-1]:.3e}")


def make_frozen_zero(spec: GeneratorSpec) -> GeneratorSpec:
    """Driver with the (z, psi) slots zeroed; used as the Picard seed."""
    def fz(t, y, z, psi, _f=spec.eval_fn):
        return _f(t, y, np.zeros_like(z), np.zeros_like(psi))
    return GeneratorSpec(name=f"{spec.name}:frozen0", d=spec.d, k=spec.k,
                         eval_fn=fz, alpha=spec.alpha, lip_K=spec.lip_K,
                         intensities=spec.intensities, comp=None)


# ---------------------------------------------------------------------------
# persistence: same columnar style as the noise files (magic "BJS1",
# version u32, n_paths u64, n_steps u64, d u32, k u32, n_atoms u32, then
# little-endian f64 blocks: times, intensities, Y, Z, psi, M in C order),
# with the provenance dict in a JSON sidecar <path>.provenance.json
# ---------------------------------------------------------------------------

_SOL_MAGIC = b"BJS1"
_SOL_HEADER = struct.Struct("<4sIQQIII")


def save_solution(path, sol: SolutionEnsemble) -> None:
    import json as _json
    n = sol.Y.shape[1] - 1
    with open(path, "wb") as fh:
        fh.write(_SOL_HEADER.pack(_SOL_MAGIC, 1, sol.n_paths, n, sol.d,
                                  sol.Z.shape[3], sol.psi.shape[3]))
        fh.write(np.asarray(sol.grid.times, dtype="<f8").tobytes())
        fh.write(np.asarray(sol.intensities, dtype="<f8").tobytes())
        for arr in (sol.Y, sol.Z, sol.psi, sol.M):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(str(path) + ".provenance.json").write_text(
        _json.dumps(sol.provenance, sort_keys=True, default=str) + "\n")


def load_solution(path) -> SolutionEnsemble:
    import json as _json
    from .noise import TimeGrid
    with open(path, "rb") as fh:
        raw = fh.read(_SOL_HEADER.size)
        if len(raw) < _SOL_HEADER.size:
            raise ConfigurationError("solution file truncated")
        magic, version, npaths, n, d, k, a = _SOL_HEADER.unpack(raw)
        if magic != _SOL_MAGIC:
            raise ConfigurationError("not a BJS1 solution file")
        if version != 1:
            raise ConfigurationError(f"unsupported solution format version {version}")

        def block(count):
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if data.size != count:
                raise ConfigurationError("solution file truncated")
            return data

        times = block(n + 1)
        lam = block(a)
        Y = block(npaths * (n + 1) * d).reshape(npaths, n + 1, d)
        Z = block(npaths * n * d * k).reshape(npaths, n, d, k)
        psi = block(npaths * n * d * a).reshape(npaths, n, d, a)
        M = block(npaths * (n + 1) * d).reshape(npaths, n + 1, d)
    side = Path(str(path) + ".provenance.json")
    prov = _json.loads(side.read_text()) if side.exists() else {}
    return SolutionEnsemble(grid=TimeGrid(times), Y=Y, Z=Z, psi=psi, M=M,
                            intensities=lam, provenance=prov)


def unshift_solution(sol: SolutionEnsemble, alpha: float) -> SolutionEnsemble:
    """Map a solution of the alpha-shifted problem back to the original one:
    Y_t = e^{-alpha t} Y'_t (same factor on Z, psi; dM_i = e^{-alpha t_i} dM'_i)."""
    t = sol.grid.times
    wn = np.exp(-alpha * t)[None, :, None]
    ws = np.exp(-alpha * t[:-1])
    Y = sol.Y * wn
    Z = sol.Z * ws[None, :, None, None]
    psi = sol.psi * ws[None, :, None, None]
    Minc = sol.dM * ws[None, :, None]
    M = np.zeros_like(sol.M)
    np.cumsum(Minc, axis=1, out=M[:, 1:, :])
    return SolutionEnsemble(sol.grid, Y, Z, psi, M, sol.intensities,
                            dict(sol.provenance, alpha_unshift=alpha))


# ---------------------------------------------------------------------------
# random terminal times
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StoppingRule:
    """Pathwise-evaluable stopping times, each capped at t_max.

    Grammar: "det:<t0>" (deterministic), "jump:<atom>" (first jump of the
    atom), "exit:<coord>,<lo>,<hi>" (first exit of the W coordinate from the
    open interval).  Event times are resolved to the right endpoint of the
    step in which the event occurred.
    """

    kind: str
    t_max: float
    t0: float = 0.0
    atom: int = 0
    coord: int = 0
    lo: float = -1.0
    hi: float = 1.0

    @classmethod
    def parse(cls, text: str, t_max: float) -> "StoppingRule":
        head, _, rest = text.partition(":")
        if head == "det":
            return cls(kind="det", t_max=t_max, t0=float(rest))
        if head == "jump":
            return cls(kind="jump", t_max=t_max, atom=int(rest))
        if head == "exit":
            c, lo, hi = rest.split(",")
            return cls(kind="exit", t_max=t_max, coord=int(c),
                       lo=float(lo), hi=float(hi))
        raise ConfigurationError(
            f"unknown stopping rule {text!r}; use det:<t>, jump:<atom> or exit:<c>,<lo>,<hi>")

    def evaluate(self, ensemble: PathEnsemble):
        """Returns (tau (N,), event_step (N,) with -1 when capped/deterministic)."""
        times = ensemble.grid.times
        n = ensemble.grid.n_steps
        npaths = ensemble.n_paths
        if self.kind == "det":
            if self.t0 > self.t_max + 1e-12:
                raise ConfigurationError("deterministic stopping time exceeds t_max")
            ensemble.grid.index_of(self.t0)
            return np.full(npaths, self.t0), np.full(npaths, -1, dtype=np.int64)
        if self.kind == "jump":
            if not (0 <= self.atom < ensemble.n_atoms):
                raise ConfigurationError(f"stopping atom {self.atom} out of range")
            hit = ensemble.jump_counts[:, :, self.atom] > 0
        else:
            w = ensemble.w_state()[:, 1:, self.coord]
            hit = (w <= self.lo) | (w >= self.hi)
        any_hit = hit.any(axis=1)
        first = np.argmax(hit, axis=1)
        raw_tau = np.where(any_hit, times[1:][first], np.inf)
        capped = raw_tau > self.t_max + 1e-12
        tau = np.where(capped, self.t_max, raw_tau)
        event = np.where(capped, -1, first).astype(np.int64)
        return tau, event


def driver_weights_for(rule: StoppingRule, ensemble: PathEnsemble,
                       tau: np.ndarray, event: np.ndarray) -> np.ndarray:
    """Per path/step driver weights approximating int 1_[0,tau] f ds: full
    steps before the event step, half weight on the step straddling the
    event (its exact time inside the step is unobserved), zero after."""
    times = ensemble.grid.times
    n = ensemble.grid.n_steps
    w = np.ones((ensemble.n_paths, n))
    if rule.kind == "det":
        w[:] = (times[1:][None, :] <= tau[:, None] + 1e-12).astype(float)
        return w
    steps = np.arange(n)[None, :]
    ev = event[:, None]
    has = ev >= 0
    w = np.where(has & (steps > ev), 0.0, w)
    w = np.where(has & (steps == ev), 0.5, w)
    return w


@dataclass
class HorizonResult:
    solutions: list           # SolutionEnsemble per horizon, on sub-grids
    extended_Y: list          # (N, n+1, d) arrays on the full grid
    distances: list           # weighted Cauchy distances D_1..D_n
    y0: list
    rho: float
    nu: float
    tau: np.ndarray
    xi_values: np.ndarray


def random_horizon_solve(spec: GeneratorSpec, xi: TerminalSpec,
                         rule: StoppingRule, rho: float, p: float,
                         n_max: int, ensemble: PathEnsemble,
                         basis: RegressionBasis | None = None,
                         params: PicardParams | None = None,
                         horizon_unit: float = 1.0) -> HorizonResult:
    """Approximation ladder for a BSDE with stopping-time horizon.

    For n = 1..n_max the equation is solved on [0, n*horizon_unit ^ t_max]
    with terminal E(xi | F at the truncation time) obtained by regression
    on the truncation-time state, and with the driver switched off pathwise
    after tau.  Beyond its truncation time each Y^n is extended by the
    regression estimate of E(xi | F_t).  The reported distances
    D_n = E sup_t e^{p rho (t ^ tau)} |Y^n_t - Y^{n-1}_t|^p (with Y^0 the
    pure martingale extension) must decrease in n when the weight condition
    rho > nu = alpha + K^2 / ((p-1) ^ 1) holds; configurations violating it
    are rejected.
    """
    params = params or PicardParams()
    nu = spec.alpha + spec.lip_K**2 / min(p - 1.0, 1.0)
    if not rho > nu:
        raise ConfigurationError(
            f"(H5') requires rho > nu = alpha + K^2/((p-1)^1) = {nu:.6g}; got rho = {rho:.6g}")
    if p <= 1:
        raise ConfigurationError("the exponent p must exceed 1")

    grid = ensemble.grid
    if rule.t_max > grid.horizon + 1e-12:
        raise ConfigurationError("stopping cap t_max exceeds the simulated horizon")
    grid.index_of(rule.t_max)
    tau, event = rule.evaluate(ensemble)
    weights = driver_weights_for(rule, ensemble, tau, event)

    # xi evaluated pathwise on the stopped state (tau is capped, so always known)
    xi_vals = xi(_stopped_state(ensemble, tau, event))

    base = basis or default_basis_for(xi)
    hbasis = RegressionBasis(family=base.family, degree=base.degree,
                             cell_width=base.cell_width, include_w=base.include_w,
                             include_counts=base.include_counts,
                             include_aux=base.include_aux, horizon_features=True)
    feats = StateFeatures(ensemble, hbasis, tau=tau)

    # conditional-expectation extension xi_hat_t = E(xi | F_t) for every node
    n = grid.n_steps
    d = xi_vals.shape[1]
    xi_hat = np.empty((ensemble.n_paths, n + 1, d))
    xi_hat[:, n, :] = xi_vals
    for i in range(n):
        phi = design_matrix(hbasis, feats.at(i))
        xi_hat[:, i, :] = fit_values(phi, xi_vals, context=f"xi extension at node {i}")

    solutions, extended = [], []
    for m in range(1, n_max + 1):
        t_n = min(m * horizon_unit, rule.t_max)
        i_n = grid.index_of(t_n)
        sub = ensemble.prefix(i_n)
        terminal = xi_vals if i_n == n else xi_hat[:, i_n, :]
        sol = _backward_pass(spec, sub, hbasis, params, terminal,
                             driver_weights=weights[:, :i_n], tau=tau,
                             provenance={"terminal": xi.name, "horizon": t_n})
        ext = xi_hat.copy()
        ext[:, :i_n + 1, :] = sol.Y
        solutions.append(sol)
        extended.append(ext)
    prev = xi_hat
    distances = []
    wt = np.exp(p * rho * np.minimum(grid.times[None, :], tau[:, None]))
    for ext in extended:
        diff = np.sqrt(np.sum((ext - prev) ** 2, axis=2)) ** p
        distances.append(float(np.max(wt * diff, axis=1).mean()))
        prev = ext
    y0s = [ext[:, 0, :].mean(axis=0).tolist() for ext in extended]
    return HorizonResult(solutions=solutions, extended_Y=extended,
                         distances=distances, y0=y0s, rho=rho, nu=nu,
                         tau=tau, xi_values=xi_vals)


def _stopped_state(ensemble: PathEnsemble, tau: np.ndarray,
                   event: np.ndarray) -> TerminalState:
    """Terminal information frozen at the (capped) stopping time."""
    times = ensemble.grid.times
    idx = np.searchsorted(times, tau + 1e-12) - 1
    idx = np.clip(idx, 0, ensemble.grid.n_steps)
    w = ensemble.w_state()
    c = ensemble.count_state()
    rows = np.arange(ensemble.n_paths)
    aux_masked = np.where(
        (np.arange(ensemble.grid.n_steps)[None, :] < idx[:, None]),
        ensemble.aux, 0.0)
    return TerminalState(w_terminal=w[rows, idx, :],
                         jump_totals=c[rows, idx, :],
                         aux_path=aux_masked, horizon=tau)
