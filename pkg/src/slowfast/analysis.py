"""Statistical checks of the averaging principle.

Weak convergence is measured on the terminal marginals, coordinate by
coordinate, against an ensemble of the averaged system; distances are
judged against a noise floor given by two independently seeded averaged
ensembles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .averaging import AveragedModel, build_averaged_model
from .errors import BudgetExceeded, StepTooCoarse
from .integrator import (
    Ensemble,
    NoiseBundle,
    PathGrid,
    System,
    averaged_ensemble,
    coupled_ensemble,
    derive_seed,
    integrate,
    system_from_model,
)
from .model import SlowFastModel
from .switching import (
    QuasiStationaryDistribution,
    TwoScaleGenerator,
    occupation_deviation,
    segment_index,
    simulate_chains,
    states_on_grid,
)


# ---------------------------------------------------------------------------
# sample distances


def wasserstein1(a, b) -> float:
    """Wasserstein-1 distance of two equal-size 1-D samples (mean gap of order statistics)."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size != b.size:
        raise ValueError(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("empty samples")
    return float(np.mean(np.abs(a - b)))


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic."""
    # the statistic does not depend on the p-value method; skip the exact one
    with np.errstate(divide="ignore"):
        return float(ks_test(a, b, method="asymp")[0])


def ks_test(a, b, method: str = "auto"):
    """``(statistic, p-value)`` of the two-sample KS test."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("empty samples")
    res = stats.ks_2samp(a, b, method=method)
    return float(res.statistic), float(res.pvalue)


@dataclass(frozen=True, eq=False)
class EnsembleSummary:
    time: float
    samples: np.ndarray  # (n_paths, dx), each column sorted ascending
    n_paths: int
    seed: Optional[int] = None

    @classmethod
    def from_ensemble(cls, ens: Ensemble, index: int = -1) -> "EnsembleSummary":
        x = np.sort(ens.x[index], axis=0)
        return cls(float(ens.times[index]), x, x.shape[0], ens.seed)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def variance(self) -> np.ndarray:
        return self.samples.var(axis=0, ddof=1)


def terminal_ensemble(target, n_paths: int, grid: PathGrid, seed: int, eps: Optional[float] = None, jobs: int = 1):
    """Terminal-time summary of ``n_paths`` paths of a model (needs ``eps``) or an averaged model."""
    if n_paths < 2:
        raise ValueError("need at least two paths")
    if isinstance(target, AveragedModel):
        ens = averaged_ensemble(target, grid, n_paths, seed, jobs=jobs)
    else:
        ens = coupled_ensemble(target, 1.0 if eps is None else eps, grid, n_paths, seed, jobs=jobs)
    return EnsembleSummary.from_ensemble(ens)


# ---------------------------------------------------------------------------
# weak convergence


def _loglog_slope(x, y, keep):
    keep = np.asarray(keep, dtype=bool) & (np.asarray(y) > 0)
    if np.count_nonzero(keep) < 2:
        return None
    return float(np.polyfit(np.log(np.asarray(x)[keep]), np.log(np.asarray(y)[keep]), 1)[0])


def _class_fractions(ens: Ensemble, indicator: np.ndarray) -> np.ndarray:
    occ = ens.occupation @ indicator
    return (occ / occ.sum(axis=1, keepdims=True)).mean(axis=0)


def _split_floor(a, b, n_splits, seed):
    """Mean W1 and KS between random equal halves of the pooled samples ``a`` and ``b``.

    Both are i.i.d. draws of one law, so every random split is again a
    pair of independent samples of size ``len(a)``.
    """
    pool = np.concatenate([a, b], axis=0)
    n = a.shape[0]
    rng = np.random.default_rng(seed)
    w1 = np.zeros(pool.shape[1])
    ks = np.zeros(pool.shape[1])
    for _ in range(n_splits):
        p = pool[rng.permutation(pool.shape[0])]
        for d in range(pool.shape[1]):
            w1[d] += wasserstein1(p[:n, d], p[n:, d])
            ks[d] += ks_statistic(p[:n, d], p[n:, d])
    return w1 / n_splits, ks / n_splits


@dataclass
class ConvergenceReport:
    eps: np.ndarray
    dt: np.ndarray
    w1: np.ndarray  # (n_eps, dx)
    ks: np.ndarray  # (n_eps, dx)
    noise_floor_w1: np.ndarray  # (dx,)
    noise_floor_ks: np.ndarray  # (dx,)
    slope: Optional[np.ndarray]  # (dx,) or None
    class_gap: Optional[np.ndarray] = None  # (n_eps,) max |occupation fraction difference|
    averaged_fractions: Optional[np.ndarray] = None
    coupled_fractions: Optional[np.ndarray] = None
    seeds: dict = field(default_factory=dict)
    n_paths: int = 0
    T: float = 1.0
    direct_floor_w1: Optional[np.ndarray] = None  # W1 between the two averaged ensembles as drawn

    @property
    def decreasing(self) -> bool:
        """W1 strictly decreasing in every coordinate as eps shrinks."""
        return bool(np.all(np.diff(self.w1, axis=0) < 0))

    def within_floor(self, factor: float = 3.0) -> bool:
        return bool(np.all(self.w1[-1] <= factor * self.noise_floor_w1))

    def rows(self) -> list:
        out = []
        dx = self.w1.shape[1]
        for i, e in enumerate(self.eps):
            row = {"eps": float(e), "dt": float(self.dt[i])}
            for d in range(dx):
                sfx = "" if dx == 1 else f"_{d + 1}"
                row["W1" + sfx] = float(self.w1[i, d])
                row["KS" + sfx] = float(self.ks[i, d])
                row["noise_floor" + sfx] = float(self.noise_floor_w1[d])
                row["slope" + sfx] = None if self.slope is None else float(self.slope[d])
            if self.class_gap is not None:
                row["class_gap"] = float(self.class_gap[i])
            out.append(row)
        return out

    def summary(self) -> dict:
        return {
            "decreasing": self.decreasing,
            "final_within_3x_floor": self.within_floor(3.0) if len(self.eps) else None,
            "slope": None if self.slope is None else self.slope.tolist(),
            "noise_floor_w1": self.noise_floor_w1.tolist(),
            "noise_floor_ks": self.noise_floor_ks.tolist(),
            "direct_floor_w1": None if self.direct_floor_w1 is None else self.direct_floor_w1.tolist(),
            "averaged_class_fractions": None if self.averaged_fractions is None else self.averaged_fractions.tolist(),
            "n_paths": self.n_paths,
            "T": self.T,
            "seeds": self.seeds,
        }


def weak_convergence_study(
    model: SlowFastModel,
    eps_list: Sequence[float],
    T: float = 1.0,
    n_paths: int = 10_000,
    seed: int = 0,
    dt: Optional[float] = None,
    dt_max: float = 1e-3,
    averaged: Optional[AveragedModel] = None,
    t0: float = 0.0,
    jobs: int = 1,
    n_splits: int = 64,
) -> ConvergenceReport:
    """Distances between terminal marginals of the coupled and averaged systems.

    Each ``eps`` runs on step ``min(dt_max, eps)`` unless a fixed ``dt`` is
    given, in which case every ``eps`` must be at least ``dt``.  The
    averaged reference and the noise-floor ensemble use disjoint derived
    seeds, as does every ``eps``.  The noise floor is the mean distance
    over ``n_splits`` random equal splits of the two pooled averaged
    ensembles; a single split has a spread of about a third of its value.
    """
    eps = np.asarray(list(eps_list), dtype=float)
    if eps.size > 1 and np.any(np.diff(eps) >= 0):
        raise ValueError("eps list must be strictly descending")
    if dt is not None and eps.size and eps.min() < dt and model.has_fast_dynamics:
        raise StepTooCoarse(f"eps={eps.min()} is below dt={dt}")
    avg = build_averaged_model(model) if averaged is None else averaged
    dt_ref = dt if dt is not None else dt_max
    ref_grid = PathGrid(t0, T, dt_ref)
    seeds = {"averaged": derive_seed(seed, "averaged"), "floor": derive_seed(seed, "floor")}
    ref = averaged_ensemble(avg, ref_grid, n_paths, seeds["averaged"], jobs=jobs)
    twin = averaged_ensemble(avg, ref_grid, n_paths, seeds["floor"], jobs=jobs)
    dx = model.dx
    direct = np.array([wasserstein1(ref.x[-1, :, d], twin.x[-1, :, d]) for d in range(dx)])
    floor_w1, floor_ks = _split_floor(ref.x[-1], twin.x[-1], n_splits, derive_seed(seed, "split"))

    partition = model.switching.partition
    multi = partition.n_classes > 1
    indicator = partition.indicator()
    avg_frac = _class_fractions(ref, np.eye(avg.n_classes)) if multi else None

    w1 = np.zeros((eps.size, dx))
    ks = np.zeros((eps.size, dx))
    dts = np.zeros(eps.size)
    gaps, fracs = [], []
    for i, e in enumerate(eps):
        step = dt if dt is not None else min(dt_max, float(e))
        dts[i] = step
        key = f"eps={float(e)!r}"
        seeds[key] = derive_seed(seed, key)
        ens = coupled_ensemble(model, float(e), PathGrid(t0, T, step), n_paths, seeds[key], jobs=jobs)
        for d in range(dx):
            w1[i, d] = wasserstein1(ens.x[-1, :, d], ref.x[-1, :, d])
            ks[i, d] = ks_statistic(ens.x[-1, :, d], ref.x[-1, :, d])
        if multi:
            frac = _class_fractions(ens, indicator)
            fracs.append(frac)
            gaps.append(float(np.max(np.abs(frac - avg_frac))))

    slope = None
    if eps.size >= 2:
        slopes = [_loglog_slope(eps, w1[:, d], w1[:, d] >= 2 * floor_w1[d]) for d in range(dx)]
        if all(s is not None for s in slopes):
            slope = np.array(slopes)
    return ConvergenceReport(
        eps=eps,
        dt=dts,
        w1=w1,
        ks=ks,
        noise_floor_w1=floor_w1,
        noise_floor_ks=floor_ks,
        slope=slope,
        class_gap=np.array(gaps) if multi else None,
        averaged_fractions=avg_frac,
        coupled_fractions=np.array(fracs) if multi else None,
        seeds=seeds,
        n_paths=n_paths,
        T=T,
        direct_floor_w1=direct,
    )


# ---------------------------------------------------------------------------
# switching ergodicity


@dataclass
class SwitchingErgodicityReport:
    eps: np.ndarray
    values: np.ndarray  # mean squared occupation deviation per eps
    standard_errors: np.ndarray

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.values) <= 0))

    def rows(self) -> list:
        return [
            {"eps": float(e), "mean_sq_deviation": float(v), "standard_error": float(s)}
            for e, v, s in zip(self.eps, self.values, self.standard_errors)
        ]


def switching_ergodicity_study(
    gen: TwoScaleGenerator,
    eps_list: Sequence[float],
    beta=1.0,
    t0: float = 0.0,
    T: float = 1.0,
    n_paths: int = 1000,
    seed: int = 0,
    state: int = 0,
    initial: int = 0,
) -> SwitchingErgodicityReport:
    """Monte Carlo ``E |int (1{r=state} - nu) beta du|^2`` for each eps.

    In the multi-class case the centring term is ``nu_state 1{class(r) =
    class(state)}``.
    """
    eps = np.asarray(list(eps_list), dtype=float)
    qsd: QuasiStationaryDistribution = gen.qsd
    values, ses = [], []
    for e in eps:
        rng = NoiseBundle(derive_seed(seed, f"eps={float(e)!r}")).generator("chain")
        paths = simulate_chains(gen, float(e), t0, T, np.full(n_paths, initial), rng)
        dev = np.array([occupation_deviation(p, qsd, state, beta, t0, T) for p in paths])
        sq = dev**2
        values.append(float(sq.mean()))
        ses.append(float(sq.std(ddof=1) / math.sqrt(sq.size)) if sq.size > 1 else 0.0)
    return SwitchingErgodicityReport(eps, np.array(values), np.array(ses))


# ---------------------------------------------------------------------------
# increment moments


@dataclass
class ModulusReport:
    taus: np.ndarray
    moments: np.ndarray  # E|x(t + tau) - x(t)|^2
    slope: Optional[float]
    anchor: float

    def rows(self) -> list:
        return [{"tau": float(t), "second_moment": float(m)} for t, m in zip(self.taus, self.moments)]


def modulus_check(
    model: SlowFastModel,
    eps: float,
    taus: Sequence[float] = tuple(2.0**-k for k in range(4, 11)),
    anchor: float = 0.25,
    n_paths: int = 10_000,
    seed: int = 0,
    dt: Optional[float] = None,
    jobs: int = 1,
) -> ModulusReport:
    """Second moments of slow increments over lags ``taus`` from time ``anchor``."""
    taus = np.asarray(list(taus), dtype=float)
    if dt is None:
        dt = min(float(taus.min()) / 4, eps) if model.has_fast_dynamics else float(taus.min()) / 4
    grid = PathGrid(0.0, anchor + float(taus.max()), dt)
    idx = [grid.index_of(anchor)] + [grid.index_of(anchor + t) for t in taus]
    ens = coupled_ensemble(model, eps, grid, n_paths, seed, record=idx, jobs=jobs)
    order = np.searchsorted(np.unique(idx), idx)
    base = ens.x[order[0]]
    moments = np.array([np.mean(np.sum((ens.x[k] - base) ** 2, axis=1)) for k in order[1:]])
    slope = _loglog_slope(taus, moments, np.ones(taus.size, dtype=bool))
    return ModulusReport(taus, moments, slope, anchor)


# ---------------------------------------------------------------------------
# perturbed test function


@dataclass(frozen=True)
class BumpFunction:
    """Smooth compactly supported test function ``exp(-1 / (1 - |y|^2))``, ``y = (x - center) / radius``."""

    center: tuple
    radius: float = 4.0
    scale: float = 1.0

    def _y(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=float)) - np.asarray(self.center, dtype=float)) / self.radius

    def __call__(self, x) -> np.ndarray:
        y = self._y(x)
        s = np.sum(y * y, axis=1)
        out = np.zeros(s.shape)
        inside = s < 1
        out[inside] = self.scale * np.exp(-1.0 / (1.0 - s[inside]))
        return out

    def gradient(self, x) -> np.ndarray:
        y = self._y(x)
        s = np.sum(y * y, axis=1)
        out = np.zeros(y.shape)
        inside = s < 1
        si = s[inside]
        val = self.scale * np.exp(-1.0 / (1.0 - si))
        out[inside] = (val * -2.0 / (1.0 - si) ** 2)[:, None] * y[inside] / self.radius
        return out


class ZeroFunction:
    def __call__(self, x):
        return np.zeros(np.atleast_2d(x).shape[0])

    def gradient(self, x):
        return np.zeros(np.atleast_2d(x).shape)


@dataclass
class PerturbationReport:
    times: np.ndarray
    mean_abs: np.ndarray  # per t, mean over outer paths of |iota_1|
    estimate: float  # mean over outer paths of sup_t |iota_1|
    n_outer: int
    n_inner: int

    def rows(self) -> list:
        return [{"t": float(t), "mean_abs_iota1": float(v)} for t, v in zip(self.times, self.mean_abs)]


def perturbation_magnitude(
    model: SlowFastModel,
    eps: float,
    test_function=None,
    times: Sequence[float] = (0.0, 0.25, 0.5),
    n_outer: int = 200,
    n_inner: int = 200,
    seed: int = 0,
    T: float = 1.0,
    dt: Optional[float] = None,
    averaged: Optional[AveragedModel] = None,
    budget: int = 1_000_000,
) -> PerturbationReport:
    """Nested Monte Carlo size of the first-order drift correction ``iota_1``.

    Outer paths of the coupled system give ``(x, xi, r)`` at each ``t``.
    From each, ``n_inner`` conditional paths run the fast pair on
    ``[t, T]`` with ``x`` held fixed and accumulate
    ``int_t^T (f(x, r(u), xi(u)) - fbar(x, class(r(u)))) du``.  The inner
    mean is weighted by the test function's gradient at ``x``.
    """
    if n_outer * n_inner > budget:
        raise BudgetExceeded(f"{n_outer} outer x {n_inner} inner paths exceed the budget of {budget}")
    iota = BumpFunction(tuple(model.x0)) if test_function is None else test_function
    avg = build_averaged_model(model) if averaged is None else averaged
    if dt is None:
        dt = eps / 10
    times = np.asarray(list(times), dtype=float)
    grid = PathGrid(0.0, T, dt)
    idx = [grid.index_of(t) for t in times]
    outer = coupled_ensemble(model, eps, grid, n_outer, derive_seed(seed, "outer"), record=idx)
    order = np.searchsorted(np.unique(idx), idx)
    fast_only = System(model.dx, model.dxi, model.jumps)
    full = system_from_model(model)
    fast_only.fast_drift, fast_only.fast_diffusion = full.fast_drift, full.fast_diffusion
    fast_only.fast_jump, fast_only.fast_jump_comp = full.fast_jump, full.fast_jump_comp
    class_of = model.switching.partition.class_of

    per_t = np.zeros((times.size, n_outer))
    for j, (t, k) in enumerate(zip(times, order)):
        x, xi, r = outer.x[k], outer.xi[k], outer.regimes[k]
        grad = iota.gradient(x)  # (n_outer, dx)
        if not np.any(grad) or t >= T:
            continue
        rows = n_outer * n_inner
        xr = np.repeat(x, n_inner, axis=0)
        xir = np.repeat(xi, n_inner, axis=0)
        rr = np.repeat(r, n_inner)
        inner_grid = PathGrid(float(t), T, dt)
        bundle = NoiseBundle(derive_seed(seed, f"inner-{j}"))
        streams = bundle.block(0)
        chains = simulate_chains(model.switching, eps, float(t), T, rr, streams["chain"])
        regimes = states_on_grid(chains, inner_grid.times)
        acc = np.zeros((rows, model.dx))
        fbar = {}  # x is frozen, so fbar only changes with the schedule segment
        lanes = np.arange(rows)

        def observe(step, xs, xis, rs, acc=acc, times_=inner_grid.times, fbar=fbar):
            seg = segment_index(avg.qsd.breakpoints, times_[step])
            if seg not in fbar:
                fbar[seg] = np.stack([avg.drift(xs, c, times_[step]) for c in range(avg.n_classes)])
            f = model.drift(xs, rs, xis) if model.drift is not None else 0.0
            acc += (f - fbar[seg][class_of[rs], lanes]) * dt

        integrate(fast_only, xr, xir, inner_grid, eps, streams, regimes=regimes, freeze_x=True, observer=observe)
        inner_mean = acc.reshape(n_outer, n_inner, model.dx).mean(axis=1)
        per_t[j] = np.abs(np.sum(grad * inner_mean, axis=1))
    return PerturbationReport(times, per_t.mean(axis=1), float(per_t.max(axis=0).mean()), n_outer, n_inner)
