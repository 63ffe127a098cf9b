"""Euler-Maruyama path simulation for the coupled, frozen and averaged systems.

All simulators advance a batch of paths at once.  Ensembles are split into
blocks of :data:`BLOCK_SIZE` paths; every block draws from its own streams,
keyed by ``(seed, stream label, block index)``, so results do not depend on
how many workers process the blocks.
"""

from __future__ import annotations

import csv
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteError, StepTooCoarse
from .model import JumpMeasure, SlowFastModel, jump_compensator_drift
from .switching import (
    GeneratorSchedule,
    SwitchingPath,
    simulate_chains,
    simulate_schedule_chains,
    states_on_grid,
)

BLOCK_SIZE = 1024
_BLOCK, _SINGLE = 0, 1


@dataclass(frozen=True)
class PathGrid:
    t0: float
    T: float
    dt: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T > self.t0:
            raise ValueError("need T > t0")
        steps = (self.T - self.t0) / self.dt
        if abs(steps - round(steps)) >= 1e-9:
            raise ValueError(f"dt={self.dt} does not divide [{self.t0}, {self.T}]")

    @property
    def n_steps(self) -> int:
        return int(round((self.T - self.t0) / self.dt))

    @property
    def times(self) -> np.ndarray:
        t = self.t0 + self.dt * np.arange(self.n_steps + 1)
        t[-1] = self.T
        return t

    def index_of(self, t: float) -> int:
        k = (t - self.t0) / self.dt
        if abs(k - round(k)) >= 1e-6 or not -1e-9 <= k <= self.n_steps + 1e-9:
            raise ValueError(f"t={t} is not a node of the grid")
        return int(round(k))


def derive_seed(seed: int, label: str) -> int:
    """Independent integer seed for a named sub-study of ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(label.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class NoiseBundle:
    """Seeded source of independent named streams.

    The same ``(seed, label, key)`` always reproduces the same stream;
    distinct labels or keys give independent streams.
    """

    seed: int

    def generator(self, label: str, *key: int) -> np.random.Generator:
        ident = zlib.crc32(label.encode())
        ss = np.random.SeedSequence(self.seed, spawn_key=(ident, *[int(k) for k in key]))
        return np.random.Generator(np.random.PCG64(ss))

    def block(self, index: int) -> dict:
        return _Streams(self, (_BLOCK, index))

    def single(self, index: int) -> dict:
        return _Streams(self, (_SINGLE, index))


class _Streams(dict):
    """Lazily created per-label generators sharing one key."""

    def __init__(self, bundle, key):
        super().__init__()
        self.bundle = bundle
        self.key = key

    def __missing__(self, label):
        gen = self.bundle.generator(label, *self.key)
        self[label] = gen
        return gen


@dataclass(eq=False)
class System:
    """Batched coefficient set consumed by the stepper.

    Slow callbacks take ``(x, r, xi, t)``; jump callbacks receive atom
    indices ``idx`` instead of jump sizes.  ``None`` means zero.
    """

    dx: int
    dxi: int
    measure: JumpMeasure
    drift: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    jump: Optional[Callable] = None
    jump_comp: Optional[Callable] = None
    fast_drift: Optional[Callable] = None
    fast_diffusion: Optional[Callable] = None
    fast_jump: Optional[Callable] = None
    fast_jump_comp: Optional[Callable] = None

    @property
    def has_fast(self) -> bool:
        return any(c is not None for c in (self.fast_drift, self.fast_diffusion, self.fast_jump))


def system_from_model(model: SlowFastModel) -> System:
    m = model.jumps
    atoms = m.atoms
    sys = System(model.dx, model.dxi, m)
    if model.drift is not None:
        sys.drift = lambda x, r, xi, t: model.drift(x, r, xi)
    if model.diffusion is not None:
        sys.diffusion = lambda x, r, xi, t: model.diffusion(x, r, xi)
    if model.jump is not None and not m.is_empty:
        sys.jump = lambda x, r, xi, t, idx: model.jump(x, r, xi, atoms[idx])
        sys.jump_comp = lambda x, r, xi, t: jump_compensator_drift(model.jump, m, x, r, xi)
    if model.fast_drift is not None:
        sys.fast_drift = model.fast_drift
    if model.fast_diffusion is not None:
        sys.fast_diffusion = model.fast_diffusion
    if model.fast_jump is not None and not m.is_empty:
        sys.fast_jump = lambda x, xi, idx: model.fast_jump(x, xi, atoms[idx])
        sys.fast_jump_comp = lambda x, xi: jump_compensator_drift(model.fast_jump, m, x, xi)
    return sys


@dataclass
class Ensemble:
    """Recorded states of a batch of paths.

    ``x`` has shape ``(len(times), n_paths, dx)``; ``occupation`` holds the
    time each path's chain spends in each state over the horizon.
    """

    times: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    regimes: np.ndarray
    occupation: Optional[np.ndarray] = None
    seed: Optional[int] = None

    @property
    def n_paths(self) -> int:
        return self.x.shape[1]

    @classmethod
    def concatenate(cls, parts: list) -> "Ensemble":
        occ = None
        if all(p.occupation is not None for p in parts):
            occ = np.concatenate([p.occupation for p in parts], axis=0)
        return cls(
            parts[0].times,
            np.concatenate([p.x for p in parts], axis=1),
            np.concatenate([p.xi for p in parts], axis=1),
            np.concatenate([p.regimes for p in parts], axis=1),
            occ,
            parts[0].seed,
        )


@dataclass
class SamplePath:
    times: np.ndarray
    x: np.ndarray  # (n_nodes, dx)
    xi: np.ndarray  # (n_nodes, dxi)
    regimes: np.ndarray  # (n_nodes,)
    regime_path: Optional[SwitchingPath] = None
    jump_log: list = field(default_factory=list)  # (t, "slow" | "fast", z)

    def to_csv(self, path) -> Path:
        path = Path(path)
        dx, dxi = self.x.shape[1], self.xi.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(dx)] + [f"xi_{i + 1}" for i in range(dxi)] + ["regime"])
            for k, t in enumerate(self.times):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.x[k]]
                           + [repr(float(v)) for v in self.xi[k]] + [int(self.regimes[k])])
        return path

    def jump_log_to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "component", "z"])
            for t, comp, z in self.jump_log:
                w.writerow([repr(float(t)), comp, " ".join(repr(float(v)) for v in np.ravel(z))])
        return path


def _record_indices(grid: PathGrid, record) -> np.ndarray:
    if isinstance(record, str):
        if record == "terminal":
            return np.array([grid.n_steps])
        if record == "full":
            return np.arange(grid.n_steps + 1)
        raise ValueError(f"unknown record mode {record!r}")
    return np.unique(np.asarray(record, dtype=int))


def _draw_counts(rng, lam, P, replicate):
    base = rng.poisson(lam, size=P // replicate)
    return np.tile(base, replicate)


def _draw_atoms(rng, cum, P, replicate):
    u = rng.random(P // replicate)
    idx = np.minimum(np.searchsorted(cum, u, side="right"), cum.size - 1)
    return np.tile(idx, replicate)


def _draw_normal(rng, shape, replicate):
    base = rng.standard_normal((shape[0] // replicate,) + shape[1:])
    return np.tile(base, (replicate,) + (1,) * (len(shape) - 1))


def integrate(
    system: System,
    x0: np.ndarray,
    xi0: np.ndarray,
    grid: PathGrid,
    eps: float,
    streams,
    regimes: Optional[np.ndarray] = None,
    record="terminal",
    freeze_x: bool = False,
    observer: Optional[Callable] = None,
    replicate: int = 1,
    jump_log: Optional[list] = None,
):
    """Advance a batch of paths over ``grid``.

    Explicit Euler with left-endpoint coefficients.  The slow increment is
    ``f dt + sigma dW - (sum_i w_i g(z_i)) dt`` and the fast one
    ``kappa dt/eps + varsigma sqrt(dt/eps) Z - (sum_i w_i theta(z_i)) dt/eps``.
    Poisson jump counts per step are drawn with mean ``lambda dt`` (slow)
    and ``lambda dt / eps`` (fast) and applied after the continuous part.

    ``replicate`` > 1 shares every random draw across that many equal
    sub-batches (common random numbers).  ``observer(k, x, xi, r)`` sees
    the state at every node before it is stepped.  Returns recorded
    ``(x, xi)`` arrays of shape ``(n_rec, P, d)``.
    """
    x = np.array(x0, dtype=float)
    xi = np.array(xi0, dtype=float)
    P = x.shape[0]
    if P % replicate:
        raise ValueError("batch size must be a multiple of replicate")
    n = grid.n_steps
    dt = grid.dt
    times = grid.times
    if system.has_fast and dt > eps * (1 + 1e-9):
        raise StepTooCoarse(f"dt={dt} exceeds eps={eps}; explicit Euler is unstable for the fast drift")
    if regimes is None:
        regimes = np.zeros((n + 1, P), dtype=int)
    rec = _record_indices(grid, record)
    rec_pos = {int(k): i for i, k in enumerate(rec)}
    out_x = np.empty((rec.size, P, system.dx))
    out_xi = np.empty((rec.size, P, system.dxi))

    measure = system.measure
    lam = measure.total_rate
    cum = np.cumsum(measure.probabilities) if lam > 0 else None
    slow_jumps = not freeze_x and system.jump is not None
    fast_jumps = system.fast_jump is not None
    sq_dt = math.sqrt(dt)
    sq_fast = math.sqrt(dt / eps)

    for k in range(n + 1):
        if k in rec_pos:
            out_x[rec_pos[k]] = x
            out_xi[rec_pos[k]] = xi
        if k == n:
            break
        t = times[k]
        r = regimes[k]
        if observer is not None:
            observer(k, x, xi, r)

        if not freeze_x:
            x_new = x.copy()
            if system.drift is not None:
                x_new += system.drift(x, r, xi, t) * dt
            if system.diffusion is not None:
                dw = _draw_normal(streams["w"], (P, system.dx), replicate) * sq_dt
                x_new += np.einsum("pij,pj->pi", system.diffusion(x, r, xi, t), dw)
            if slow_jumps:
                x_new -= system.jump_comp(x, r, xi, t) * dt
                counts = _draw_counts(streams["N"], lam * dt, P, replicate)
                for j in range(int(counts.max(initial=0))):
                    idx = _draw_atoms(streams["N"], cum, P, replicate)
                    hit = counts > j
                    x_new += system.jump(x, r, xi, t, idx) * hit[:, None]
                    if jump_log is not None:
                        for p in np.flatnonzero(hit):
                            jump_log.append((times[k + 1], "slow", measure.atoms[idx[p]]))
        else:
            x_new = x

        if system.has_fast:
            xi_new = xi.copy()
            if system.fast_drift is not None:
                xi_new += system.fast_drift(x, xi) * (dt / eps)
            if system.fast_diffusion is not None:
                dw1 = _draw_normal(streams["w1"], (P, system.dxi), replicate) * sq_fast
                xi_new += np.einsum("pij,pj->pi", system.fast_diffusion(x, xi), dw1)
            if fast_jumps:
                xi_new -= system.fast_jump_comp(x, xi) * (dt / eps)
                counts = _draw_counts(streams["N1"], lam * dt / eps, P, replicate)
                for j in range(int(counts.max(initial=0))):
                    idx = _draw_atoms(streams["N1"], cum, P, replicate)
                    hit = counts > j
                    xi_new += system.fast_jump(x, xi, idx) * hit[:, None]
                    if jump_log is not None:
                        for p in np.flatnonzero(hit):
                            jump_log.append((times[k + 1], "fast", measure.atoms[idx[p]]))
        else:
            xi_new = xi

        if not (np.isfinite(x_new).all() and np.isfinite(xi_new).all()):
            bad = ~(np.isfinite(x_new).all(axis=1) & np.isfinite(xi_new).all(axis=1))
            p = int(np.flatnonzero(bad)[0])
            raise NonFiniteError(
                f"non-finite state at node {k + 1} (t={times[k + 1]}), path {p}", node=k + 1, path=p
            )
        x, xi = x_new, xi_new
    return out_x, out_xi


def run_blocks(fn: Callable, n_paths: int, jobs: int = 1, block_size: int = BLOCK_SIZE) -> list:
    """Apply ``fn(block_index, block_paths)`` to every block, in block order."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    blocks = [(b, min(block_size, n_paths - b * block_size)) for b in range(-(-n_paths // block_size))]
    if jobs is None or jobs <= 1 or len(blocks) == 1:
        return [fn(b, m) for b, m in blocks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda a: fn(*a), blocks))


def _check_eps(model_has_fast: bool, grid: PathGrid, eps: float):
    if not eps > 0:
        raise ValueError("eps must be positive")
    if model_has_fast and grid.dt > eps * (1 + 1e-9):
        raise StepTooCoarse(f"dt={grid.dt} exceeds eps={eps}")


def _coupled_block(model, system, eps, grid, streams, n, record, jump_log=None):
    chains = simulate_chains(model.switching, eps, grid.t0, grid.T, np.full(n, model.r0), streams["chain"])
    regimes = states_on_grid(chains, grid.times)
    occupation = np.stack([c.occupation_times(model.n_regimes) for c in chains])
    x, xi = integrate(
        system,
        np.tile(model.x0, (n, 1)),
        np.tile(model.xi0, (n, 1)),
        grid,
        eps,
        streams,
        regimes=regimes,
        record=record,
        jump_log=jump_log,
    )
    rec = _record_indices(grid, record)
    return chains, Ensemble(grid.times[rec], x, xi, regimes[rec], occupation)


def simulate_coupled(model: SlowFastModel, eps: float, grid: PathGrid, noise: NoiseBundle, path_index: int = 0) -> SamplePath:
    """One path of the coupled slow-fast system with its chain and jump log."""
    _check_eps(model.has_fast_dynamics, grid, eps)
    log = []
    chains, ens = _coupled_block(
        model, system_from_model(model), eps, grid, noise.single(path_index), 1, "full", jump_log=log
    )
    return SamplePath(ens.times, ens.x[:, 0], ens.xi[:, 0], ens.regimes[:, 0], chains[0], log)


def coupled_ensemble(
    model: SlowFastModel,
    eps: float,
    grid: PathGrid,
    n_paths: int,
    seed: int,
    record="terminal",
    jobs: int = 1,
) -> Ensemble:
    _check_eps(model.has_fast_dynamics, grid, eps)
    system = system_from_model(model)
    noise = NoiseBundle(seed)

    def block(b, n):
        return _coupled_block(model, system, eps, grid, noise.block(b), n, record)[1]

    ens = Ensemble.concatenate(run_blocks(block, n_paths, jobs))
    ens.seed = seed
    return ens


def simulate_frozen_fast(
    model: SlowFastModel,
    x_frozen,
    grid: PathGrid,
    noise: NoiseBundle,
    n_paths: int = 1,
    xi0=None,
    record="full",
    jobs: int = 1,
) -> Ensemble:
    """Fast process with the slow state held fixed, on the unit time scale.

    ``x_frozen`` may be one point ``(dx,)`` or several ``(K, dx)``; with
    several points every one is driven by the same noise, and the result
    has shape ``(n_rec, K * n_paths, dxi)`` ordered point-major.
    """
    xs = np.atleast_2d(np.asarray(x_frozen, dtype=float))
    K = xs.shape[0]
    system = system_from_model(model)
    start = model.xi0 if xi0 is None else np.atleast_1d(np.asarray(xi0, dtype=float))

    def block(b, n):
        x = np.repeat(xs, n, axis=0)
        xi = np.broadcast_to(start, (K * n, model.dxi)) if start.ndim == 1 else np.repeat(start, n, axis=0)
        rx, rxi = integrate(system, x, xi, grid, 1.0, noise.block(b), record=record, freeze_x=True, replicate=K)
        rec = _record_indices(grid, record)
        return Ensemble(grid.times[rec], rx.reshape(rec.size, K, n, -1), rxi.reshape(rec.size, K, n, -1),
                        np.zeros((rec.size, K, n), dtype=int))

    parts = run_blocks(block, n_paths, jobs)
    return Ensemble(
        parts[0].times,
        np.concatenate([p.x for p in parts], axis=2).reshape(parts[0].times.size, K * n_paths, -1),
        np.concatenate([p.xi for p in parts], axis=2).reshape(parts[0].times.size, K * n_paths, -1),
        np.zeros((parts[0].times.size, K * n_paths), dtype=int),
        seed=noise.seed,
    )


def _averaged_block(avg, system, grid, streams, n, record):
    sched: GeneratorSchedule = avg.aggregated
    chains = simulate_schedule_chains(sched, grid.t0, grid.T, np.full(n, avg.initial_class), streams["chain"])
    regimes = states_on_grid(chains, grid.times)
    occupation = np.stack([c.occupation_times(sched.n_states) for c in chains])
    x, xi = integrate(system, np.tile(avg.x0, (n, 1)), np.zeros((n, 0)), grid, 1.0, streams,
                      regimes=regimes, record=record)
    rec = _record_indices(grid, record)
    return chains, Ensemble(grid.times[rec], x, xi, regimes[rec], occupation)


def simulate_averaged(avg, grid: PathGrid, noise: NoiseBundle, path_index: int = 0) -> SamplePath:
    """One path of the averaged system; the class label follows the aggregated generator."""
    chains, ens = _averaged_block(avg, avg.as_system(), grid, noise.single(path_index), 1, "full")
    return SamplePath(ens.times, ens.x[:, 0], ens.xi[:, 0], ens.regimes[:, 0], chains[0])


def averaged_ensemble(avg, grid: PathGrid, n_paths: int, seed: int, record="terminal", jobs: int = 1) -> Ensemble:
    system = avg.as_system()
    noise = NoiseBundle(seed)

    def block(b, n):
        return _averaged_block(avg, system, grid, noise.block(b), n, record)[1]

    ens = Ensemble.concatenate(run_blocks(block, n_paths, jobs))
    ens.seed = seed
    return ens


@dataclass
class PicardResult:
    times: np.ndarray
    iterates: list  # [(x (n_nodes, P, dx), xi (n_nodes, P, dxi)), ...] starting at the constant iterate
    deltas: np.ndarray  # sup_t |x^{n+1} - x^n|, averaged over paths
    deltas_xi: np.ndarray

    def ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.deltas[1:] / self.deltas[:-1]


def picard_iterate(
    model: SlowFastModel,
    regime: int,
    grid: PathGrid,
    noise: NoiseBundle,
    n_iters: int,
    eps: float = 1.0,
    n_paths: int = 1,
) -> PicardResult:
    """Successive approximations on an interval where the regime is frozen.

    The first iterate is the constant initial data; each next one
    integrates the coefficients along the previous iterate against one
    fixed set of Brownian and Poisson increments.
    """
    system = system_from_model(model)
    N, P, dt = grid.n_steps, n_paths, grid.dt
    streams = noise.single(0)
    measure = model.jumps
    lam = measure.total_rate
    cum = np.cumsum(measure.probabilities) if lam > 0 else None

    dW = streams["w"].standard_normal((N, P, model.dx)) * math.sqrt(dt)
    dW1 = streams["w1"].standard_normal((N, P, model.dxi)) * math.sqrt(dt / eps)

    def poisson_marks(label, mean):
        if cum is None:
            return np.zeros((N, P), dtype=int), np.zeros((N, P, 0), dtype=int)
        counts = streams[label].poisson(mean, size=(N, P))
        K = int(counts.max(initial=0))
        u = streams[label].random((N, P, K))
        return counts, np.minimum(np.searchsorted(cum, u, side="right"), cum.size - 1)

    n_counts, n_idx = poisson_marks("N", lam * dt)
    n1_counts, n1_idx = poisson_marks("N1", lam * dt / eps)
    r = np.full(N * P, regime)
    t_flat = None

    def slow_increment(X, Xi):
        xf = X[:-1].reshape(N * P, model.dx)
        xif = Xi[:-1].reshape(N * P, model.dxi)
        inc = np.zeros((N * P, model.dx))
        if system.drift is not None:
            inc += system.drift(xf, r, xif, t_flat) * dt
        if system.diffusion is not None:
            inc += np.einsum("pij,pj->pi", system.diffusion(xf, r, xif, t_flat), dW.reshape(N * P, -1))
        if system.jump is not None:
            inc -= system.jump_comp(xf, r, xif, t_flat) * dt
            for j in range(n_idx.shape[2]):
                hit = (n_counts > j).reshape(-1)
                inc += system.jump(xf, r, xif, t_flat, n_idx[:, :, j].reshape(-1)) * hit[:, None]
        return inc.reshape(N, P, model.dx)

    def fast_increment(X, Xi):
        xf = X[:-1].reshape(N * P, model.dx)
        xif = Xi[:-1].reshape(N * P, model.dxi)
        inc = np.zeros((N * P, model.dxi))
        if system.fast_drift is not None:
            inc += system.fast_drift(xf, xif) * (dt / eps)
        if system.fast_diffusion is not None:
            inc += np.einsum("pij,pj->pi", system.fast_diffusion(xf, xif), dW1.reshape(N * P, -1))
        if system.fast_jump is not None:
            inc -= system.fast_jump_comp(xf, xif) * (dt / eps)
            for j in range(n1_idx.shape[2]):
                hit = (n1_counts > j).reshape(-1)
                inc += system.fast_jump(xf, xif, n1_idx[:, :, j].reshape(-1)) * hit[:, None]
        return inc.reshape(N, P, model.dxi)

    def integrate_from(start, inc):
        out = np.empty((N + 1,) + inc.shape[1:])
        out[0] = start
        out[1:] = start + np.cumsum(inc, axis=0)
        return out

    X = np.broadcast_to(model.x0, (N + 1, P, model.dx)).copy()
    Xi = np.broadcast_to(model.xi0, (N + 1, P, model.dxi)).copy()
    iterates = [(X, Xi)]
    deltas, deltas_xi = [], []
    for _ in range(n_iters):
        X_new = integrate_from(model.x0, slow_increment(X, Xi))
        Xi_new = integrate_from(model.xi0, fast_increment(X, Xi))
        if not (np.isfinite(X_new).all() and np.isfinite(Xi_new).all()):
            raise NonFiniteError(f"Picard iterate {len(iterates)} is not finite")
        deltas.append(float(np.mean(np.max(np.linalg.norm(X_new - X, axis=2), axis=0))))
        deltas_xi.append(float(np.mean(np.max(np.linalg.norm(Xi_new - Xi, axis=2), axis=0))) if model.dxi else 0.0)
        X, Xi = X_new, Xi_new
        iterates.append((X, Xi))
    return PicardResult(grid.times, iterates, np.array(deltas), np.array(deltas_xi))
