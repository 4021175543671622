"""Damped fixed-point iteration for the implicit backward step.

Solves y = target + f(y) * dt for monotone f, vectorized over the leading
(node/path) axis.  Each node carries its own damping factor: a trial step
is accepted where it reduces that node's residual and the factor re-grows,
otherwise the factor halves and the node stays put.  One-sided
Lipschitz continuity of f with alpha dt < 1 makes the residual a descent
direction at every node, so the per-node backtracking always converges;
f may be non-Lipschitz in y (a monotone cubic, say) at the price of more
iterations at stiff nodes.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError

CONTRACTION_LIMIT = 0.5
THETA_FLOOR = 1e-7


def damped_fixed_point(residual_fn, y0: np.ndarray, tol: float,
                       max_iter: int, where: str = ""):
    """residual_fn(y) -> g = y - target - f(y) dt; returns (root, iterations)."""
    y = y0.copy()
    g = residual_fn(y)
    trail = tuple(range(1, y.ndim))
    res = np.max(np.abs(g), axis=trail) if trail else np.abs(g)
    if not np.all(np.isfinite(res)):
        raise NumericError(f"implicit step produced non-finite residual {where}")
    scale = 1.0 + float(np.max(np.abs(y0), initial=0.0))
    theta = np.ones(y.shape[0])
    for it in range(max_iter):
        live = res > tol * scale
        if not np.any(live):
            return y, it
        y_try = y - theta.reshape((-1,) + (1,) * (y.ndim - 1)) * g
        g_try = residual_fn(y_try)
        res_try = np.max(np.abs(g_try), axis=trail) if trail else np.abs(g_try)
        # sufficient decrease (Armijo): merely-strict decrease admits slow
        # two-branch oscillations around stiff roots; the one-sided Lipschitz
        # bound alpha dt <= 1/2 guarantees a (1 - 0.2 theta) factor is
        # attainable once theta is small enough
        enough = res_try <= (1.0 - 0.2 * theta) * res
        ok = np.isfinite(res_try) & (enough | (theta <= THETA_FLOOR)) & live
        y = np.where(ok.reshape((-1,) + (1,) * (y.ndim - 1)), y_try, y)
        g = np.where(ok.reshape((-1,) + (1,) * (g.ndim - 1)), g_try, g)
        res = np.where(ok, res_try, res)
        # damping never re-grows: rejected trials halve it for that node only
        theta = np.where(live & ~ok, theta * 0.5, theta)
    node = int(np.argmax(res))
    raise NumericError(
        f"implicit step failed to converge {where}: residual {res[node]:.3e} "
        f"(worst node {node}) after {max_iter} iterations")
