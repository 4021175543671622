"""Least-squares conditional expectations for the Monte Carlo solver.

Design matrices come from either a total-degree polynomial family or
hypercube partition indicators over selected state features (Brownian
state, cumulative jump counts, auxiliary partial sums, and optionally the
stopped-time features used by random-horizon runs).  Normal equations are
accumulated with fixed-order einsum reductions so results cannot depend on
BLAS threading, and a ridge term 1e-10 * trace/dim is always added: silent
rank deficiency is the dominant failure mode of regression Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ConfigurationError, NumericError

RIDGE_SCALE = 1e-10


@dataclass(frozen=True)
class RegressionBasis:
    """Feature selection plus functional family for the regressions.

    family: "poly" (all monomials of total degree <= degree) or "hypercube"
    (indicator columns of occupied cells with the given widths).  The state
    map flags choose which path statistics feed the features.
    """

    family: str = "poly"
    degree: int = 2
    cell_width: float = 0.5
    include_w: bool = True
    include_counts: bool = True
    include_aux: bool = False
    horizon_features: bool = False

    def __post_init__(self):
        if self.family not in ("poly", "hypercube"):
            raise ConfigurationError(f"unknown basis family {self.family!r}")
        if self.family == "poly" and self.degree < 0:
            raise ConfigurationError("polynomial degree must be >= 0")
        if self.family == "hypercube" and self.cell_width <= 0:
            raise ConfigurationError("hypercube cell width must be positive")

    @property
    def basis_id(self) -> str:
        feats = "".join(c for c, on in
                        (("w", self.include_w), ("n", self.include_counts),
                         ("a", self.include_aux), ("h", self.horizon_features)) if on)
        if self.family == "poly":
            return f"poly{self.degree}[{feats}]"
        return f"cube{self.cell_width:g}[{feats}]"

    @classmethod
    def parse(cls, text: str) -> "RegressionBasis":
        """e.g. "poly:2", "poly:3:wna", "cube:0.5", "cube:1.0:wn"."""
        parts = text.split(":")
        feats = parts[2] if len(parts) > 2 else "wn"
        flags = dict(include_w="w" in feats, include_counts="n" in feats,
                     include_aux="a" in feats, horizon_features="h" in feats)
        if parts[0] == "poly":
            return cls(family="poly", degree=int(parts[1]) if len(parts) > 1 else 2, **flags)
        if parts[0] == "cube":
            return cls(family="hypercube",
                       cell_width=float(parts[1]) if len(parts) > 1 else 0.5, **flags)
        raise ConfigurationError(f"cannot parse basis spec {text!r}")


def _poly_exponents(n_features: int, degree: int):
    exps = [e for e in product(range(degree + 1), repeat=n_features)
            if sum(e) <= degree]
    exps.sort(key=lambda e: (sum(e), e))
    return exps


def design_matrix(basis: RegressionBasis, features: np.ndarray) -> np.ndarray:
    """features (N, F) -> design matrix (N, n_columns)."""
    n, f = features.shape
    if f == 0 or basis.family == "poly" and basis.degree == 0:
        return np.ones((n, 1))
    if basis.family == "poly":
        cols = [np.prod(features ** np.asarray(e, dtype=float), axis=1)
                for e in _poly_exponents(f, basis.degree)]
        return np.stack(cols, axis=1)
    # hypercube indicators over occupied cells, in sorted cell order
    idx = np.floor(features / basis.cell_width).astype(np.int64)
    cells, inverse = np.unique(idx, axis=0, return_inverse=True)
    phi = np.zeros((n, cells.shape[0]))
    phi[np.arange(n), inverse] = 1.0
    return phi


def fit_values(phi: np.ndarray, targets: np.ndarray, context: str = "") -> np.ndarray:
    """Ridge least squares returning fitted values, deterministic reductions.

    The intercept is handled by centering and left unpenalized, so constant
    targets are reproduced exactly; the ridge applies to the centered slope
    block only.  targets may be (N,) or (N, q); fitted values keep the shape.
    """
    squeeze = targets.ndim == 1
    y = targets[:, None] if squeeze else targets
    mu_y = y.mean(axis=0)
    yc = y - mu_y
    mu_x = phi.mean(axis=0)
    xc = phi - mu_x
    gram = np.einsum("pi,pj->ij", xc, xc, optimize=False)
    ncol = gram.shape[0]
    trace = float(np.trace(gram))
    if trace <= 0.0:
        fitted = np.broadcast_to(mu_y, y.shape).copy()
        return fitted[:, 0] if squeeze else fitted
    gram = gram + (RIDGE_SCALE * trace / ncol) * np.eye(ncol)
    rhs = np.einsum("pi,pq->iq", xc, yc, optimize=False)
    try:
        coef = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f"regression normal equations singular despite ridge {context}") from exc
    fitted = mu_y[None, :] + np.einsum("pi,iq->pq", xc, coef, optimize=False)
    if not np.all(np.isfinite(fitted)):
        raise NumericError(f"regression produced non-finite values {context}")
    return fitted[:, 0] if squeeze else fitted


class StateFeatures:
    """Per-node feature slices for one ensemble, built once per solve."""

    def __init__(self, ensemble, basis: RegressionBasis, tau=None):
        self.basis = basis
        self.n_paths = ensemble.n_paths
        self.w = ensemble.w_state() if basis.include_w else None
        self.counts = ensemble.count_state() if basis.include_counts and ensemble.n_atoms else None
        self.aux = ensemble.aux_state() if basis.include_aux else None
        self.times = ensemble.grid.times
        self.tau = tau
        if basis.horizon_features and tau is None:
            raise ConfigurationError("horizon features need pathwise stopping times")

    def at(self, i: int) -> np.ndarray:
        cols = []
        if self.w is not None:
            cols.append(self.w[:, i, :])
        if self.counts is not None:
            cols.append(self.counts[:, i, :])
        if self.aux is not None:
            cols.append(self.aux[:, i][:, None])
        if self.basis.horizon_features:
            t = self.times[i]
            cols.append(np.minimum(self.tau, t)[:, None])
            cols.append((self.tau <= t).astype(float)[:, None])
        if not cols:
            return np.zeros((self.n_paths, 0))
        return np.concatenate(cols, axis=1)
