"""Built-in model and terminal registries plus a small expression grammar.

Models are selected by string id from the CLI.  Custom scalar drivers can be
written as expressions over t, y, z and psum (the mu-weighted atom sum
sum_j psi_j lambda_j) using arithmetic, min/max, exp and abs; they are parsed
into vectorized numpy callables at load time.  Declared constants for
expression models must be supplied explicitly; nothing is inferred.
"""

from __future__ import annotations

import ast

import numpy as np

from .errors import ConfigurationError
from .model import (ComparisonData, GeneratorSpec, TerminalSpec, MODE_AUX,
                    MODE_MIXED, MODE_STATE)
from .noise import JumpActivity

# ---------------------------------------------------------------------------
# expression grammar
# ---------------------------------------------------------------------------

_ALLOWED_CALLS = {
    "min": np.minimum,
    "max": np.maximum,
    "exp": np.exp,
    "abs": np.abs,
}
_ALLOWED_CONSTS = {"e": float(np.e), "pi": float(np.pi)}
_ALLOWED_NAMES = {"t", "y", "z", "psum"} | set(_ALLOWED_CONSTS)
_ALLOWED_NODES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load,
    ast.Constant, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub,
    ast.UAdd,
)


def _validate_node(node: ast.AST, src: str) -> None:
    if not isinstance(node, _ALLOWED_NODES):
        raise ConfigurationError(
            f"expression {src!r}: construct {type(node).__name__} not allowed")
    if isinstance(node, ast.Name) and node.id not in _ALLOWED_NAMES:
        raise ConfigurationError(
            f"expression {src!r}: unknown name {node.id!r} "
            f"(allowed: t, y, z, psum, e, pi)")
    if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
        raise ConfigurationError(f"expression {src!r}: only numeric constants allowed")
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_CALLS:
            raise ConfigurationError(
                f"expression {src!r}: only min/max/exp/abs calls allowed")
        if node.keywords:
            raise ConfigurationError(f"expression {src!r}: keyword arguments not allowed")
        for arg in node.args:
            _validate_node(arg, src)
        return
    for child in ast.iter_child_nodes(node):
        _validate_node(child, src)


def parse_expression_model(src: str, activity: JumpActivity, alpha: float,
                           lip_K: float, k: int = 1) -> GeneratorSpec:
    """Compile a d=1 driver expression into a GeneratorSpec.

    Variables: t (time), y (solution value), z (first Brownian slot),
    psum = sum_j psi_j * lambda_j.  The declared alpha and K are taken as
    given and can be checked afterwards with the model verifiers.
    """
    try:
        tree = ast.parse(src, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"expression {src!r}: {exc.msg}") from exc
    _validate_node(tree, src)
    code = compile(tree, "<model-expression>", "eval")
    lam = activity.intensities

    def eval_fn(t, y, z, psi, _code=code, _lam=lam):
        t_arr = np.asarray(t, dtype=np.float64)
        if t_arr.ndim == 0:
            t_arr = np.full(y.shape[0], float(t_arr))
        env = {
            "t": t_arr,
            "y": y[:, 0],
            "z": z[:, 0, 0],
            "psum": psi[:, 0, :] @ _lam if _lam.size else np.zeros(y.shape[0]),
            **_ALLOWED_CONSTS,
            **_ALLOWED_CALLS,
        }
        out = np.asarray(eval(_code, {"__builtins__": {}}, env), dtype=np.float64)
        return np.broadcast_to(out, y.shape[:1]).reshape(-1, 1)

    return GeneratorSpec(name=f"expr:{src}", d=1, k=k, eval_fn=eval_fn,
                         alpha=alpha, lip_K=lip_K, intensities=lam)


# ---------------------------------------------------------------------------
# built-in drivers
# ---------------------------------------------------------------------------

def _no_psi(lam):
    return lam if lam is not None else np.zeros(0)


def _psum(psi, lam):
    # sum over atoms of psi_j * lambda_j, per solution coordinate: (N, d)
    if lam.size == 0:
        return np.zeros(psi.shape[:2])
    return psi @ lam


def make_model(model_id: str, activity: JumpActivity, k: int = 1,
               alpha: float | None = None, lip_K: float | None = None) -> GeneratorSpec:
    """Resolve a model id.  'expr:<source>' requires explicit alpha/lip_K."""
    lam = activity.intensities
    Lam = activity.total_intensity
    rootL = np.sqrt(Lam) if Lam > 0 else 0.0

    if model_id.startswith("expr:"):
        if alpha is None or lip_K is None:
            raise ConfigurationError(
                "expression models need declared constants: set alpha and lip_k")
        return parse_expression_model(model_id[5:], activity, alpha, lip_K, k=k)

    if model_id == "zero":
        return GeneratorSpec("zero", 1, k, lambda t, y, z, psi: np.zeros_like(y),
                             alpha=0.0, lip_K=0.0, intensities=lam)
    if model_id == "ohlm1":
        return GeneratorSpec("ohlm1", 1, k, lambda t, y, z, psi: -y,
                             alpha=-1.0, lip_K=0.0, intensities=lam)
    if model_id == "ohlm_half":
        return GeneratorSpec("ohlm_half", 1, k, lambda t, y, z, psi: 0.5 * y,
                             alpha=0.5, lip_K=0.0, intensities=lam)
    if model_id == "zdrift":
        return GeneratorSpec("zdrift", 1, k,
                             lambda t, y, z, psi: 0.3 * z[:, :, 0],
                             alpha=0.0, lip_K=0.3, intensities=lam)
    if model_id == "cubic":
        return GeneratorSpec("cubic", 1, k, lambda t, y, z, psi: -(y**3) - y,
                             alpha=-1.0, lip_K=0.0, intensities=lam)
    if model_id == "tcos":
        def tcos(t, y, z, psi):
            t_arr = np.asarray(t, dtype=np.float64)
            if t_arr.ndim == 0:
                t_arr = np.full(y.shape[0], float(t_arr))
            return np.cos(t_arr)[:, None] - y
        return GeneratorSpec("tcos", 1, k, tcos, alpha=-1.0, lip_K=0.0, intensities=lam)
    if model_id == "skew2d":
        def skew(t, y, z, psi):
            return np.stack([-y[:, 1], y[:, 0]], axis=1)
        return GeneratorSpec("skew2d", 2, k, skew, alpha=0.0, lip_K=0.0, intensities=lam)

    if model_id == "jumplin":
        if Lam == 0:
            raise ConfigurationError("model 'jumplin' needs at least one jump atom")
        c = 0.5 / rootL
        spec_fn = lambda t, y, z, psi: c * _psum(psi, lam)
        comp = ComparisonData(
            kappa_fn=lambda t, y, z, psi, phi: np.full((y.shape[0], lam.size), c),
            theta=np.full(lam.size, c))
        return GeneratorSpec("jumplin", 1, k, spec_fn, alpha=0.0, lip_K=0.5,
                             intensities=lam, comp=comp)
    if model_id == "jumpneg":
        if Lam == 0:
            raise ConfigurationError("model 'jumpneg' needs at least one jump atom")
        c = -min(1.0, 0.5 / rootL)
        spec_fn = lambda t, y, z, psi: c * _psum(psi, lam)
        comp = ComparisonData(
            kappa_fn=lambda t, y, z, psi, phi: np.full((y.shape[0], lam.size), c),
            theta=np.full(lam.size, abs(c)))
        return GeneratorSpec("jumpneg", 1, k, spec_fn, alpha=0.0,
                             lip_K=abs(c) * rootL, intensities=lam, comp=comp)
    if model_id == "jumpbad":
        # kappa = -2 < -1 by construction: violates the comparison condition
        if Lam == 0:
            raise ConfigurationError("model 'jumpbad' needs at least one jump atom")
        spec_fn = lambda t, y, z, psi: -2.0 * _psum(psi, lam)
        comp = ComparisonData(
            kappa_fn=lambda t, y, z, psi, phi: np.full((y.shape[0], lam.size), -2.0),
            theta=np.full(lam.size, 2.0))
        return GeneratorSpec("jumpbad", 1, k, spec_fn, alpha=0.0,
                             lip_K=2.0 * rootL, intensities=lam, comp=comp)
    if model_id == "jumpmax":
        if Lam == 0:
            raise ConfigurationError("model 'jumpmax' needs at least one jump atom")
        c = 1.0 / rootL
        spec_fn = lambda t, y, z, psi: np.maximum(0.0, c * _psum(psi, lam))

        def kappa(t, y, z, psi, phi, _c=c, _lam=lam):
            s_psi = (psi[:, 0, :] @ _lam)
            s_phi = (phi[:, 0, :] @ _lam)
            # subgradient of x -> max(0, c x): slope c where the larger sum wins
            on = (np.maximum(0.0, _c * s_psi) - np.maximum(0.0, _c * s_phi)) > 0
            return np.where(on[:, None], _c, 0.0) * np.ones((1, _lam.size))
        comp = ComparisonData(kappa_fn=kappa, theta=np.full(lam.size, c))
        return GeneratorSpec("jumpmax", 1, k, spec_fn, alpha=0.0, lip_K=1.0,
                             intensities=lam, comp=comp)
    if model_id == "mixed1":
        if Lam == 0:
            raise ConfigurationError("model 'mixed1' needs at least one jump atom")
        c = 0.3 / rootL
        def mixed(t, y, z, psi):
            return -y + 0.3 * z[:, :, 0] + c * _psum(psi, lam)
        comp = ComparisonData(
            kappa_fn=lambda t, y, z, psi, phi: np.full((y.shape[0], lam.size), c),
            theta=np.full(lam.size, c))
        return GeneratorSpec("mixed1", 1, k, mixed, alpha=-1.0, lip_K=0.3,
                             intensities=lam, comp=comp)
    if model_id.startswith("contraction:"):
        # f = K (z + sum_j psi_j w_j lambda_j) with sqrt(sum w^2 lambda) = 1,
        # so the declared K is exactly the joint (z, psi) Lipschitz constant
        K = float(model_id.split(":", 1)[1])
        if lam.size:
            w = 1.0 / np.sqrt(lam.size * lam)
            def fk(t, y, z, psi, _K=K, _w=w, _lam=lam):
                return _K * (z[:, :, 0] + psi @ (_w * _lam))
        else:
            def fk(t, y, z, psi, _K=K):
                return _K * z[:, :, 0]
        return GeneratorSpec(model_id, 1, k, fk, alpha=0.0, lip_K=K, intensities=lam)

    raise ConfigurationError(f"unknown model id {model_id!r}")


# ---------------------------------------------------------------------------
# built-in terminal conditions
# ---------------------------------------------------------------------------

def make_terminal(terminal_id: str, d: int = 1) -> TerminalSpec:
    if terminal_id == "one":
        return TerminalSpec("one", MODE_STATE,
                            lambda s: np.ones((s.n, d)), d=d, bound=1.0)
    if terminal_id.startswith("const:"):
        v = float(terminal_id.split(":", 1)[1])
        return TerminalSpec(terminal_id, MODE_STATE,
                            lambda s, _v=v: np.full((s.n, d), _v), d=d, bound=abs(v))
    if terminal_id == "w1":
        return TerminalSpec("w1", MODE_STATE,
                            lambda s: np.tile(s.w_terminal[:, :1], (1, d)), d=d)
    if terminal_id == "wsum":
        return TerminalSpec("wsum", MODE_STATE,
                            lambda s: np.tile(s.w_terminal.sum(axis=1, keepdims=True), (1, d)),
                            d=d)
    if terminal_id == "minw0":
        return TerminalSpec("minw0", MODE_STATE,
                            lambda s: np.tile(np.minimum(s.w_terminal[:, :1], 0.0), (1, d)),
                            d=d)
    if terminal_id == "expw":
        def expw(s):
            h = np.asarray(s.horizon, dtype=np.float64)
            arg = s.w_terminal[:, :1] - 0.5 * (h.reshape(-1, 1) if h.ndim else h)
            return np.tile(np.exp(arg), (1, d))
        return TerminalSpec("expw", MODE_STATE, expw, d=d)
    if terminal_id == "aux1":
        return TerminalSpec("aux1", MODE_AUX,
                            lambda s: np.tile(s.aux_first[:, None], (1, d)),
                            d=d, bound=1.0, uses_aux=True)
    if terminal_id == "auxsum":
        return TerminalSpec("auxsum", MODE_AUX,
                            lambda s: np.tile(s.aux_sum[:, None], (1, d)),
                            d=d, uses_aux=True)
    if terminal_id == "count1":
        return TerminalSpec("count1", MODE_STATE,
                            lambda s: np.tile(s.jump_totals[:, :1], (1, d)), d=d)
    if terminal_id == "indjump":
        return TerminalSpec("indjump", MODE_STATE,
                            lambda s: np.tile((s.jump_totals[:, :1] > 0).astype(float), (1, d)),
                            d=d, bound=1.0)
    if terminal_id == "negindjump":
        return TerminalSpec("negindjump", MODE_STATE,
                            lambda s: np.tile(-0.5 * (s.jump_totals[:, :1] > 0), (1, d)),
                            d=d, bound=0.5)
    if terminal_id == "wsign":
        return TerminalSpec("wsign", MODE_STATE,
                            lambda s: np.tile(np.sign(s.w_terminal[:, :1]), (1, d)),
                            d=d, bound=1.0)
    if terminal_id == "mixed":
        def mixed(s):
            base = (np.minimum(s.w_terminal[:, 0], 1.0)
                    + 0.5 * np.minimum(s.jump_totals[:, 0] if s.jump_totals.shape[1] else 0.0, 2.0)
                    + 0.25 * s.aux_first)
            return np.tile(base[:, None], (1, d))
        return TerminalSpec("mixed", MODE_MIXED, mixed, d=d, uses_aux=True)
    raise ConfigurationError(f"unknown terminal id {terminal_id!r}")


MODEL_IDS = ["zero", "ohlm1", "ohlm_half", "zdrift", "cubic", "tcos", "skew2d",
             "jumplin", "jumpneg", "jumpbad", "jumpmax", "mixed1",
             "contraction:<K>", "expr:<source>"]
TERMINAL_IDS = ["one", "const:<v>", "w1", "wsum", "minw0", "expw", "aux1",
                "auxsum", "count1", "indjump", "negindjump", "wsign", "mixed"]
