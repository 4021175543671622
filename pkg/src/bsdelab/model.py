"""Generators, terminal conditions, and sampled verification of the
structural hypotheses: one-sided (monotone) Lipschitz continuity in y,
Lipschitz continuity in (z, psi), and the jump-monotonicity condition
needed by the comparison principle.

Hypotheses are universally quantified statements about opaque callables,
so verification here is sampled, never symbolic: each verifier draws
random evaluation points, reports the empirical extremum of the relevant
ratio or margin, and a witness when the declared constant is violated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, ModelError
from .noise import PathEnsemble


def l2_mu_norm(psi: np.ndarray, intensities: np.ndarray) -> np.ndarray:
    """Discrete L^2_mu norm sqrt(sum_j |psi_j|^2 lambda_j); psi (..., d, A)."""
    if intensities.size == 0:
        return np.zeros(psi.shape[:-2])
    sq = np.sum(psi**2, axis=-2)          # (..., A), |psi_j|^2 over d
    return np.sqrt(np.sum(sq * intensities, axis=-1))


@dataclass(frozen=True)
class ComparisonData:
    """Per-atom slope process kappa and its dominating bound theta for the
    jump-monotonicity condition: f(psi) - f(phi) <= sum_j (psi_j - phi_j)
    kappa_j lambda_j with kappa_j >= -1 and |kappa_j| <= theta_j."""

    kappa_fn: Callable  # (t, y, z, psi, phi) -> (N, n_atoms)
    theta: np.ndarray   # (n_atoms,), nonnegative

    def __post_init__(self):
        th = np.atleast_1d(np.asarray(self.theta, dtype=np.float64))
        if th.size and np.any(th < 0):
            raise ConfigurationError("theta bounds must be nonnegative")
        object.__setattr__(self, "theta", th)


@dataclass(frozen=True)
class GeneratorSpec:
    """A driver f(t, y, z, psi) with its declared constants.

    eval_fn must be vectorized over a leading sample axis:
    t scalar or (N,), y (N, d), z (N, d, k), psi (N, d, n_atoms) -> (N, d).
    It must be pure and reentrant.  alpha is the monotonicity constant of
    <f(y) - f(y'), y - y'> <= alpha |y - y'|^2; lip_K the Lipschitz constant
    in (z, psi) with the psi-distance measured in L^2_mu.
    """

    name: str
    d: int
    k: int
    eval_fn: Callable
    alpha: float
    lip_K: float
    intensities: np.ndarray = field(default_factory=lambda: np.zeros(0))
    comp: Optional[ComparisonData] = None

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.lip_K)):
            raise ConfigurationError("declared alpha and K must be finite")
        lam = np.atleast_1d(np.asarray(self.intensities, dtype=np.float64))
        object.__setattr__(self, "intensities", lam)

    @property
    def n_atoms(self) -> int:
        return self.intensities.size

    def __call__(self, t, y, z, psi) -> np.ndarray:
        return np.asarray(self.eval_fn(t, y, z, psi), dtype=np.float64)

    def f_zero(self, t) -> np.ndarray:
        """f(t, 0, 0, 0) for scalar t; returns (d,)."""
        y = np.zeros((1, self.d))
        z = np.zeros((1, self.d, self.k))
        psi = np.zeros((1, self.d, self.n_atoms))
        return self(t, y, z, psi)[0]


@dataclass(frozen=True)
class TerminalState:
    """Terminal information of simulated paths: W value, total jump counts
    per atom, the auxiliary sign sequence, and the horizon."""

    w_terminal: np.ndarray   # (N, k)
    jump_totals: np.ndarray  # (N, n_atoms)
    aux_path: np.ndarray     # (N, n_steps)
    horizon: float | np.ndarray

    @classmethod
    def from_ensemble(cls, ens: PathEnsemble) -> "TerminalState":
        return cls(
            w_terminal=ens.dW.sum(axis=1),
            jump_totals=ens.jump_counts.sum(axis=1).astype(np.float64),
            aux_path=ens.aux,
            horizon=ens.grid.horizon,
        )

    @property
    def n(self) -> int:
        return self.w_terminal.shape[0]

    @property
    def aux_first(self) -> np.ndarray:
        if self.aux_path.shape[1] == 0:
            return np.zeros(self.n)
        return self.aux_path[:, 0]

    @property
    def aux_sum(self) -> np.ndarray:
        return self.aux_path.sum(axis=1)


MODE_STATE = "functional-of-state"
MODE_AUX = "functional-of-aux"
MODE_MIXED = "mixed"


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal condition xi as a function of the path's terminal information."""

    name: str
    mode: str
    eval_fn: Callable  # TerminalState -> (N, d)
    d: int = 1
    p_integrability: float = 2.0
    bound: Optional[float] = None   # known sup bound, when one exists
    uses_aux: bool = False

    def __call__(self, state: TerminalState) -> np.ndarray:
        vals = np.asarray(self.eval_fn(state), dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if not np.all(np.isfinite(vals)):
            raise ModelError(f"terminal condition {self.name!r} produced non-finite values")
        return vals


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling ranges for hypothesis verification.  Defaults: y, z, psi
    uniform on [-5, 5] per coordinate, t uniform on [0, horizon]."""

    y_range: tuple = (-5.0, 5.0)
    z_range: tuple = (-5.0, 5.0)
    psi_range: tuple = (-5.0, 5.0)
    horizon: float = 1.0
    seed: int = 20240

    def draw(self, rng, n, shape, which):
        lo, hi = getattr(self, f"{which}_range")
        return rng.uniform(lo, hi, size=(n, *shape))


@dataclass
class HypothesisReport:
    hypothesis: str
    passed: bool
    declared: float
    observed: float
    n_samples: int
    witness: Optional[dict] = None
    notes: str = ""

    def __str__(self):
        tag = "pass" if self.passed else "FAIL"
        return (f"[{tag}] {self.hypothesis}: declared {self.declared:.6g}, "
                f"observed {self.observed:.6g} over {self.n_samples} samples")


def _finite_or_raise(values: np.ndarray, spec: GeneratorSpec, inputs: dict):
    bad = ~np.all(np.isfinite(values), axis=tuple(range(1, values.ndim)))
    if np.any(bad):
        i = int(np.argmax(bad))
        detail = {key: np.asarray(val)[i].tolist() for key, val in inputs.items()}
        raise ModelError(
            f"generator {spec.name!r} returned a non-finite value at {detail}")


def _sample_inputs(spec: GeneratorSpec, sampler: SamplerConfig, n: int, rng):
    t = rng.uniform(0.0, sampler.horizon, size=n)
    y = sampler.draw(rng, n, (spec.d,), "y")
    z = sampler.draw(rng, n, (spec.d, spec.k), "z")
    psi = sampler.draw(rng, n, (spec.d, spec.n_atoms), "psi")
    return t, y, z, psi


def verify_monotonicity(spec: GeneratorSpec, sampler: SamplerConfig | None = None,
                        n_samples: int = 10_000) -> HypothesisReport:
    """Sampled check of <f(t,y,z,psi) - f(t,y',z,psi), y - y'> <= alpha |y-y'|^2."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    sampler = sampler or SamplerConfig()
    rng = np.random.Generator(np.random.Philox(key=[sampler.seed, 1]))
    t, y, z, psi = _sample_inputs(spec, sampler, n_samples, rng)
    y2 = sampler.draw(rng, n_samples, (spec.d,), "y")

    f1 = spec(t, y, z, psi)
    f2 = spec(t, y2, z, psi)
    _finite_or_raise(f1, spec, {"t": t, "y": y, "z": z, "psi": psi})
    _finite_or_raise(f2, spec, {"t": t, "y": y2, "z": z, "psi": psi})

    dy = y - y2
    den = np.sum(dy**2, axis=1)
    keep = den > 1e-14
    ratio = np.sum((f1 - f2) * dy, axis=1)[keep] / den[keep]
    if ratio.size == 0:
        return HypothesisReport("(H1) monotonicity", True, spec.alpha, -np.inf, n_samples)
    i = int(np.argmax(ratio))
    observed = float(ratio[i])
    tol = 1e-9 * (1.0 + abs(spec.alpha))
    witness = None
    if observed > spec.alpha + tol:
        idx = np.nonzero(keep)[0][i]
        witness = {"t": float(t[idx]), "y": y[idx].tolist(), "y2": y2[idx].tolist(),
                   "ratio": observed}
    return HypothesisReport("(H1) monotonicity", witness is None, spec.alpha,
                            observed, n_samples, witness)


def verify_lipschitz(spec: GeneratorSpec, sampler: SamplerConfig | None = None,
                     n_samples: int = 10_000) -> HypothesisReport:
    """Sampled check of |f(t,y,z,psi) - f(t,y,z',psi')| <= K (|z-z'| + ||psi-psi'||)."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    sampler = sampler or SamplerConfig()
    rng = np.random.Generator(np.random.Philox(key=[sampler.seed, 2]))
    t, y, z, psi = _sample_inputs(spec, sampler, n_samples, rng)
    z2 = sampler.draw(rng, n_samples, (spec.d, spec.k), "z")
    psi2 = sampler.draw(rng, n_samples, (spec.d, spec.n_atoms), "psi")

    f1 = spec(t, y, z, psi)
    f2 = spec(t, y, z2, psi2)
    _finite_or_raise(f1, spec, {"t": t, "y": y, "z": z, "psi": psi})
    _finite_or_raise(f2, spec, {"t": t, "y": y, "z": z2, "psi": psi2})

    num = np.sqrt(np.sum((f1 - f2)**2, axis=1))
    dz = np.sqrt(np.sum((z - z2)**2, axis=(1, 2)))
    dpsi = l2_mu_norm(psi - psi2, spec.intensities)
    den = dz + dpsi
    keep = den > 1e-12
    if not np.any(keep):
        return HypothesisReport("(H3) Lipschitz in (z, psi)", True, spec.lip_K, 0.0, n_samples)
    ratio = num[keep] / den[keep]
    i = int(np.argmax(ratio))
    observed = float(ratio[i])
    tol = 1e-9 * (1.0 + abs(spec.lip_K))
    witness = None
    if observed > spec.lip_K + tol:
        idx = np.nonzero(keep)[0][i]
        witness = {"t": float(t[idx]), "z": z[idx].tolist(), "z2": z2[idx].tolist(),
                   "psi": psi[idx].tolist(), "psi2": psi2[idx].tolist(), "ratio": observed}
    return HypothesisReport("(H3) Lipschitz in (z, psi)", witness is None, spec.lip_K,
                            observed, n_samples, witness)


def verify_h3prime(spec: GeneratorSpec, sampler: SamplerConfig | None = None,
                   n_samples: int = 10_000) -> HypothesisReport:
    """Sampled check of the jump-monotonicity condition with the declared
    kappa process: f(psi) - f(phi) <= sum_j (psi_j - phi_j) kappa_j lambda_j,
    kappa_j >= -1 and |kappa_j| <= theta_j at every sampled point."""
    if spec.comp is None:
        raise ConfigurationError(
            "(H3') comparison data missing: the comparison principle requires an extra condition")
    if spec.d != 1:
        raise ConfigurationError("(H3') verification is defined for d = 1 only")
    sampler = sampler or SamplerConfig()
    rng = np.random.Generator(np.random.Philox(key=[sampler.seed, 3]))
    t, y, z, psi = _sample_inputs(spec, sampler, n_samples, rng)
    phi = sampler.draw(rng, n_samples, (spec.d, spec.n_atoms), "psi")

    f1 = spec(t, y, z, psi)
    f2 = spec(t, y, z, phi)
    kappa = np.asarray(spec.comp.kappa_fn(t, y, z, psi, phi), dtype=np.float64)
    lam = spec.intensities
    bound = np.sum((psi[:, 0, :] - phi[:, 0, :]) * kappa * lam, axis=1)

    margin = bound - (f1 - f2)[:, 0]      # must be >= 0
    kappa_min = float(kappa.min()) if kappa.size else 0.0
    theta_excess = (np.abs(kappa) - spec.comp.theta[None, :]) if kappa.size else np.zeros((1, 1))
    tol = 1e-9
    worst_margin = float(margin.min()) if margin.size else 0.0
    ok = (worst_margin >= -tol) and (kappa_min >= -1.0 - tol) and (theta_excess.max() <= tol)
    witness = None
    if not ok:
        i = int(np.argmin(margin))
        witness = {"t": float(t[i]), "psi": psi[i].tolist(), "phi": phi[i].tolist(),
                   "margin": float(margin[i]), "kappa_min": kappa_min,
                   "theta_excess": float(theta_excess.max())}
    return HypothesisReport("(H3') jump monotonicity", ok, -1.0,
                            min(worst_margin, kappa_min + 1.0), n_samples, witness)


def verify_integrability(spec: GeneratorSpec, sampler: SamplerConfig | None = None,
                         n_samples: int = 10_000, radius: float = 5.0) -> HypothesisReport:
    """Sampled-finiteness stand-in for the growth integrability condition:
    sup_{|y| <= r} |f(t, y, 0, 0) - f(t, 0, 0, 0)| evaluated on random (t, y)
    must stay finite.  Genuine integrability over paths and time is not
    numerically decidable; this only rules out blow-ups on the sampled box."""
    sampler = sampler or SamplerConfig()
    rng = np.random.Generator(np.random.Philox(key=[sampler.seed, 4]))
    t = rng.uniform(0.0, sampler.horizon, size=n_samples)
    y = rng.uniform(-radius, radius, size=(n_samples, spec.d))
    z = np.zeros((n_samples, spec.d, spec.k))
    psi = np.zeros((n_samples, spec.d, spec.n_atoms))
    vals = spec(t, y, z, psi)
    _finite_or_raise(vals, spec, {"t": t, "y": y})
    zero = spec(t, np.zeros_like(y), z, psi)
    sup = float(np.max(np.sqrt(np.sum((vals - zero) ** 2, axis=1))))
    return HypothesisReport("(H2) sampled growth finiteness", np.isfinite(sup),
                            radius, sup, n_samples)


def shift_alpha_to_zero(spec: GeneratorSpec, xi: TerminalSpec, horizon: float):
    """Rescale the problem so the monotonicity constant becomes zero.

    Returns (spec', xi') where f'(t,y,z,psi) = e^{alpha t} f(t, e^{-alpha t} y,
    e^{-alpha t} z, e^{-alpha t} psi) - alpha y and xi' = e^{alpha T} xi.
    Solving the transformed problem and mapping back via Y_t = e^{-alpha t}
    Y'_t (same factor on Z, psi, dM) reproduces the original solution.
    """
    a = spec.alpha
    if not np.isfinite(horizon):
        raise ConfigurationError("horizon must be finite")
    if a == 0.0:
        return spec, xi

    base = spec.eval_fn

    def shifted(t, y, z, psi, _a=a, _f=base):
        t_arr = np.asarray(t, dtype=np.float64)
        e = np.exp(_a * t_arr)
        em = np.exp(-_a * t_arr)
        if t_arr.ndim == 0:
            val = e * np.asarray(_f(t, em * y, em * z, em * psi))
        else:
            val = e[:, None] * np.asarray(
                _f(t, em[:, None] * y, em[:, None, None] * z, em[:, None, None] * psi))
        return val - _a * y

    spec2 = GeneratorSpec(
        name=f"{spec.name}:alpha_shifted", d=spec.d, k=spec.k,
        eval_fn=shifted, alpha=0.0, lip_K=spec.lip_K,
        intensities=spec.intensities, comp=None)

    scale = float(np.exp(a * horizon))
    xi2 = TerminalSpec(
        name=f"{xi.name}:alpha_shifted", mode=xi.mode,
        eval_fn=lambda state, _s=scale, _g=xi.eval_fn: _s * np.asarray(_g(state)),
        d=xi.d, p_integrability=xi.p_integrability,
        bound=None if xi.bound is None else abs(scale) * xi.bound,
        uses_aux=xi.uses_aux)
    return spec2, xi2
