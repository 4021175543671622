"""Driving noises: Brownian increments, Poisson jump counts, auxiliary signs.

Each path draws from a counter-based substream keyed by (seed, path index),
so regeneration is bit-identical and ensembles of different sizes share
path prefixes.  The auxiliary stream is i.i.d. Rademacher (+/-1); it is the
source that a generic filtration contributes on top of the Brownian and
Poisson noises, and it is what makes the orthogonal component of a solution
genuinely nonzero when the terminal condition depends on it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

SUBSTREAM_SCHEME = "philox-key(seed,path)-v1"

LAW_POISSON = "poisson"
LAW_TWO_POINT = "two_point"

_MAGIC = b"BJL1"
_FORMAT_VERSION = 1
_LAW_CODES = {LAW_POISSON: 0, LAW_TWO_POINT: 1}
_LAW_NAMES = {v: k for k, v in _LAW_CODES.items()}


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid 0 = t_0 < t_1 < ... < t_n."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 1:
            raise ConfigurationError("grid must be a 1-d array of times")
        if not np.all(np.isfinite(t)):
            raise ConfigurationError("grid times must be finite")
        if t[0] != 0.0:
            raise ConfigurationError("grid must start at t_0 = 0")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ConfigurationError("grid times must be strictly increasing")
        object.__setattr__(self, "times", _readonly(t))

    @classmethod
    def uniform(cls, n_steps: int, horizon: float) -> "TimeGrid":
        if n_steps < 0:
            raise ConfigurationError("n_steps must be >= 0")
        if n_steps == 0:
            return cls(np.zeros(1))
        if horizon <= 0:
            raise ConfigurationError("horizon must be positive")
        return cls(np.linspace(0.0, horizon, n_steps + 1))

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def max_step(self) -> float:
        return float(self.dt.max()) if self.n_steps else 0.0

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-12 * (1.0 + abs(t)):
            raise ConfigurationError(f"time {t} is not a grid node")
        return i


@dataclass(frozen=True)
class JumpActivity:
    """Finite-atom jump intensity: marks u_j in R^m with rates lambda_j > 0."""

    marks: np.ndarray        # (n_atoms, m)
    intensities: np.ndarray  # (n_atoms,)

    def __post_init__(self):
        marks = np.atleast_2d(np.asarray(self.marks, dtype=np.float64))
        lam = np.atleast_1d(np.asarray(self.intensities, dtype=np.float64))
        if marks.shape[0] != lam.shape[0]:
            raise ConfigurationError("marks and intensities must have one row per atom")
        if lam.size and not np.all(lam > 0):
            raise ConfigurationError("all jump intensities lambda_j must be > 0")
        if marks.size:
            if np.any(np.all(marks == 0.0, axis=1)):
                raise ConfigurationError("jump marks must be nonzero")
            flat = [tuple(row) for row in marks]
            if len(set(flat)) != len(flat):
                raise ConfigurationError("jump marks must be distinct")
        # sigma-finiteness functional; trivially finite for a finite atom list
        check = np.sum(np.minimum(1.0, np.sum(marks**2, axis=1)) * lam) if lam.size else 0.0
        if not np.isfinite(check):
            raise ConfigurationError("integral of (1 ^ |u|^2) against mu must be finite")
        object.__setattr__(self, "marks", _readonly(marks))
        object.__setattr__(self, "intensities", _readonly(lam))

    @classmethod
    def empty(cls) -> "JumpActivity":
        return cls(np.zeros((0, 1)), np.zeros(0))

    @classmethod
    def single(cls, intensity: float, mark: float = 1.0) -> "JumpActivity":
        return cls(np.array([[mark]]), np.array([intensity]))

    @classmethod
    def from_list(cls, atoms) -> "JumpActivity":
        """atoms: iterable of (mark, intensity) with scalar or vector marks."""
        marks = [np.atleast_1d(m) for m, _ in atoms]
        lam = [l for _, l in atoms]
        if not marks:
            return cls.empty()
        return cls(np.stack(marks), np.array(lam, dtype=np.float64))

    @property
    def n_atoms(self) -> int:
        return self.intensities.size

    @property
    def total_intensity(self) -> float:
        return float(self.intensities.sum())


@dataclass(frozen=True)
class PathEnsemble:
    """Sampled increments of (W, pi, aux) on a grid.

    dW has shape (n_paths, n_steps, k); jump_counts (n_paths, n_steps,
    n_atoms); aux (n_paths, n_steps) with values +/-1.  `law` records the
    per-step increment law: "poisson" for Gaussian dW + Poisson counts,
    "two_point" for +/-sqrt(dt) signs + Bernoulli indicators (the law the
    tree oracle enumerates exactly).  Immutable after creation.
    """

    grid: TimeGrid
    dW: np.ndarray
    jump_counts: np.ndarray
    aux: np.ndarray
    seed: int
    scheme: str = SUBSTREAM_SCHEME
    law: str = LAW_POISSON

    def __post_init__(self):
        object.__setattr__(self, "dW", _readonly(np.asarray(self.dW, dtype=np.float64)))
        object.__setattr__(self, "jump_counts", _readonly(np.asarray(self.jump_counts, dtype=np.int64)))
        object.__setattr__(self, "aux", _readonly(np.asarray(self.aux, dtype=np.float64)))
        n, steps, _ = self.dW.shape
        if self.jump_counts.shape[:2] != (n, steps) or self.aux.shape != (n, steps):
            raise ConfigurationError("ensemble arrays must agree on (n_paths, n_steps)")
        if steps != self.grid.n_steps:
            raise ConfigurationError("ensemble arrays must match the grid step count")
        if self.law not in _LAW_CODES:
            raise ConfigurationError(f"unknown increment law {self.law!r}")

    @property
    def n_paths(self) -> int:
        return self.dW.shape[0]

    @property
    def k(self) -> int:
        return self.dW.shape[2]

    @property
    def n_atoms(self) -> int:
        return self.jump_counts.shape[2]

    def w_state(self) -> np.ndarray:
        """Running W value at every grid node, W_0 = 0; (n_paths, n_steps+1, k)."""
        n = self.n_paths
        out = np.zeros((n, self.grid.n_steps + 1, self.k))
        np.cumsum(self.dW, axis=1, out=out[:, 1:, :])
        return out

    def count_state(self) -> np.ndarray:
        """Cumulative jump counts at every grid node; (n_paths, n_steps+1, n_atoms)."""
        n = self.n_paths
        out = np.zeros((n, self.grid.n_steps + 1, self.n_atoms))
        np.cumsum(self.jump_counts, axis=1, out=out[:, 1:, :])
        return out

    def aux_state(self) -> np.ndarray:
        """Partial sums of the auxiliary signs; (n_paths, n_steps+1)."""
        n = self.n_paths
        out = np.zeros((n, self.grid.n_steps + 1))
        np.cumsum(self.aux, axis=1, out=out[:, 1:])
        return out

    def prefix(self, n_steps: int) -> "PathEnsemble":
        """Restriction to the first n_steps steps (same paths)."""
        if n_steps > self.grid.n_steps:
            raise ConfigurationError("prefix longer than the ensemble grid")
        return PathEnsemble(
            grid=TimeGrid(self.grid.times[: n_steps + 1]),
            dW=self.dW[:, :n_steps, :],
            jump_counts=self.jump_counts[:, :n_steps, :],
            aux=self.aux[:, :n_steps],
            seed=self.seed,
            scheme=self.scheme,
            law=self.law,
        )


def _path_rng(seed: int, path: int) -> np.random.Generator:
    key = [seed & 0xFFFFFFFFFFFFFFFF, path & 0xFFFFFFFFFFFFFFFF]
    return np.random.Generator(np.random.Philox(key=key))


def simulate(grid: TimeGrid, k: int, activity: JumpActivity, n_paths: int,
             seed: int) -> PathEnsemble:
    """Sample Gaussian dW, Poisson jump counts and Rademacher aux increments.

    Deterministic in all inputs; path p depends only on (seed, p), so
    re-simulating with a larger n_paths reproduces the smaller ensemble as
    a prefix.  Per path the draw order is fixed: dW block, counts block,
    aux block.
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    if k < 1:
        raise ConfigurationError("Brownian dimension k must be >= 1")
    steps, a = grid.n_steps, activity.n_atoms
    dt = grid.dt
    sqrt_dt = np.sqrt(dt)
    lam_dt = np.outer(dt, activity.intensities) if a else np.zeros((steps, 0))

    dW = np.empty((n_paths, steps, k))
    counts = np.empty((n_paths, steps, a), dtype=np.int64)
    aux = np.empty((n_paths, steps))
    for p in range(n_paths):
        rng = _path_rng(seed, p)
        dW[p] = rng.standard_normal((steps, k)) * sqrt_dt[:, None]
        counts[p] = rng.poisson(lam=lam_dt) if a else 0
        aux[p] = rng.integers(0, 2, size=steps) * 2.0 - 1.0
    return PathEnsemble(grid=grid, dW=dW, jump_counts=counts, aux=aux,
                        seed=seed, law=LAW_POISSON)


def simulate_two_point(grid: TimeGrid, k: int, activity: JumpActivity,
                       n_paths: int, seed: int) -> PathEnsemble:
    """Sample the tree oracle's discrete laws: dW = +/-sqrt(dt) and Bernoulli
    jump indicators with q_j = lambda_j*dt (requires q_j < 1)."""
    if n_paths < 1:
        raise ConfigurationError("n_paths must be >= 1")
    if k < 1:
        raise ConfigurationError("Brownian dimension k must be >= 1")
    steps, a = grid.n_steps, activity.n_atoms
    dt = grid.dt
    q = np.outer(dt, activity.intensities) if a else np.zeros((steps, 0))
    if q.size and np.any(q >= 1.0):
        raise ConfigurationError("two-point law needs lambda_j * dt < 1 for every atom")
    sqrt_dt = np.sqrt(dt)

    dW = np.empty((n_paths, steps, k))
    counts = np.empty((n_paths, steps, a), dtype=np.int64)
    aux = np.empty((n_paths, steps))
    for p in range(n_paths):
        rng = _path_rng(seed, p)
        signs = rng.integers(0, 2, size=(steps, k)) * 2.0 - 1.0
        dW[p] = signs * sqrt_dt[:, None]
        counts[p] = (rng.random((steps, a)) < q).astype(np.int64) if a else 0
        aux[p] = rng.integers(0, 2, size=steps) * 2.0 - 1.0
    return PathEnsemble(grid=grid, dW=dW, jump_counts=counts, aux=aux,
                        seed=seed, law=LAW_TWO_POINT)


def compensated_increments(ensemble: PathEnsemble, activity: JumpActivity) -> np.ndarray:
    """Per path/step/atom increments of pi~ : counts[p,i,j] - lambda_j * dt_i."""
    if ensemble.n_atoms != activity.n_atoms:
        raise ConfigurationError(
            f"ensemble has {ensemble.n_atoms} atoms, activity has {activity.n_atoms}")
    if activity.n_atoms == 0:
        return np.zeros_like(ensemble.jump_counts, dtype=np.float64)
    lam_dt = np.outer(ensemble.grid.dt, activity.intensities)
    return ensemble.jump_counts.astype(np.float64) - lam_dt[None, :, :]


def moment_checks(ensemble: PathEnsemble, activity: JumpActivity,
                  n_se: float = 5.0) -> dict:
    """Sample-moment diagnostics: per step E[dW]=0, E[dW^2]=dt, E[count]=lam*dt,
    E[aux]=0, E[aux^2]=1, and cross-correlations near 0; all within n_se
    standard errors.  Returns a dict with the worst normalized deviations."""
    n = ensemble.n_paths
    dt = ensemble.grid.dt
    rt_n = np.sqrt(n)
    out = {"n_paths": n, "n_se": n_se}
    if ensemble.grid.n_steps == 0:
        out.update(ok=True, worst=0.0)
        return out

    devs = []
    mw = ensemble.dW.mean(axis=0)
    sw = ensemble.dW.std(axis=0) / rt_n
    devs.append(np.max(np.abs(mw) / np.maximum(sw, 1e-300)))
    vw = (ensemble.dW**2).mean(axis=0)
    svw = (ensemble.dW**2).std(axis=0) / rt_n
    devs.append(np.max(np.abs(vw - dt[:, None]) / np.maximum(svw, 1e-300)))
    if activity.n_atoms:
        lam_dt = np.outer(dt, activity.intensities)
        c = ensemble.jump_counts.astype(np.float64)
        mc = c.mean(axis=0)
        sc = c.std(axis=0) / rt_n
        devs.append(np.max(np.abs(mc - lam_dt) / np.maximum(sc, 1e-300)))
    ma = ensemble.aux.mean(axis=0)
    devs.append(np.max(np.abs(ma) / (1.0 / rt_n)))
    if not np.all(ensemble.aux**2 == 1.0):
        raise ConfigurationError("aux increments must be +/-1 exactly")

    # independence: cross-correlations between the three streams, per step
    comp = compensated_increments(ensemble, activity)
    for a_arr, b_arr in (
        (ensemble.dW[:, :, 0], ensemble.aux),
        (ensemble.dW[:, :, 0], comp[:, :, 0] if activity.n_atoms else None),
        (ensemble.aux, comp[:, :, 0] if activity.n_atoms else None),
    ):
        if b_arr is None:
            continue
        prod = a_arr * b_arr
        m = prod.mean(axis=0) - a_arr.mean(axis=0) * b_arr.mean(axis=0)
        s = prod.std(axis=0) / rt_n
        devs.append(np.max(np.abs(m) / np.maximum(s, 1e-300)))

    worst = float(max(devs))
    out.update(ok=worst <= n_se, worst=worst)
    return out


# ---------------------------------------------------------------------------
# Columnar persistence.  Byte layout (all little-endian):
#   magic "BJL1" (4 bytes) | version u32 | n_paths u64 | n_steps u64 |
#   k u32 | n_atoms u32 | seed u64 (two's complement) | law u32 |
#   times f64[n_steps+1] | dW f64[n_paths*n_steps*k] (C order) |
#   counts f64[n_paths*n_steps*n_atoms] | aux f64[n_paths*n_steps]
# The law field and the times block extend the fixed header; see README.
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQQIIQI")


def save_ensemble(path, ensemble: PathEnsemble) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(
            _MAGIC, _FORMAT_VERSION,
            ensemble.n_paths, ensemble.grid.n_steps,
            ensemble.k, ensemble.n_atoms,
            ensemble.seed & 0xFFFFFFFFFFFFFFFF,
            _LAW_CODES[ensemble.law],
        ))
        fh.write(ensemble.grid.times.astype("<f8").tobytes())
        fh.write(ensemble.dW.astype("<f8").tobytes())
        fh.write(ensemble.jump_counts.astype("<f8").tobytes())
        fh.write(ensemble.aux.astype("<f8").tobytes())


def load_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise ConfigurationError("ensemble file truncated")
        magic, version, n_paths, n_steps, k, n_atoms, seed_u, law_code = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise ConfigurationError("not a BJL1 ensemble file")
        if version != _FORMAT_VERSION:
            raise ConfigurationError(f"unsupported ensemble format version {version}")

        def block(count):
            data = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if data.size != count:
                raise ConfigurationError("ensemble file truncated")
            return data

        times = block(n_steps + 1)
        dW = block(n_paths * n_steps * k).reshape(n_paths, n_steps, k)
        counts = block(n_paths * n_steps * n_atoms).reshape(n_paths, n_steps, n_atoms)
        aux = block(n_paths * n_steps).reshape(n_paths, n_steps)
    seed = seed_u if seed_u < 2**63 else seed_u - 2**64
    return PathEnsemble(grid=TimeGrid(times), dW=dW,
                        jump_counts=counts.astype(np.int64), aux=aux,
                        seed=seed, law=_LAW_NAMES[law_code])
