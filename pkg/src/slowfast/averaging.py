"""Frozen-process invariant measures, ergodic decay fits and the averaged model.

The averaged coefficients are assembled in two steps.  First, for every
switching state ``m`` and slow point ``x``, the coefficient is integrated
against the invariant law of the frozen fast process (``F_m(x)`` for the
drift, ``A_m(x)`` for ``sigma sigma``, per-atom ``G_m(x, z_i)`` for the
jumps).  Second, these per-state values are combined with the
quasi-stationary weights of the class the regime belongs to.  Keeping the
two steps apart lets one table serve every class and every schedule
segment.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.interpolate import RegularGridInterpolator

from .errors import AllBelowNoiseFloor, GridExtrapolation, NotPSD
from .integrator import NoiseBundle, PathGrid, System, simulate_frozen_fast
from .model import JumpMeasure, SlowFastModel, index_square, validate_dissipativity
from .switching import (
    ClassPartition,
    GeneratorSchedule,
    QuasiStationaryDistribution,
    aggregated_schedule,
    quasi_stationary_schedule,
    segment_index,
)

PSD_CLAMP_TOL = 1e-6
SYMMETRY_TOL = 1e-8


def psd_root(a) -> np.ndarray:
    """Symmetric PSD square root by spectral decomposition, batched over leading axes.

    Eigenvalues in ``[-1e-6, 0)`` are clamped to zero; anything more
    negative raises :class:`NotPSD`.
    """
    a = np.asarray(a, dtype=float)
    scalar = a.ndim == 0
    if scalar:
        a = a.reshape(1, 1)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError("psd_root needs square matrices")
    scale = max(1.0, float(np.max(np.abs(a), initial=0.0)))
    if np.max(np.abs(a - np.swapaxes(a, -1, -2)), initial=0.0) > SYMMETRY_TOL * scale:
        raise NotPSD("matrix is not symmetric")
    if a.shape[-1] == 1:
        if np.min(a, initial=0.0) < -PSD_CLAMP_TOL:
            raise NotPSD(f"negative eigenvalue {float(np.min(a))}")
        root = np.sqrt(np.maximum(a, 0.0))
    else:
        sym = 0.5 * (a + np.swapaxes(a, -1, -2))
        vals, vecs = np.linalg.eigh(sym)
        if np.min(vals, initial=0.0) < -PSD_CLAMP_TOL:
            raise NotPSD(f"negative eigenvalue {float(np.min(vals))}")
        root = (vecs * np.sqrt(np.maximum(vals, 0.0))[..., None, :]) @ np.swapaxes(vecs, -1, -2)
        root = 0.5 * (root + np.swapaxes(root, -1, -2))
    return root.reshape(()) if scalar else root


# ---------------------------------------------------------------------------
# invariant measure of the frozen fast process


@dataclass(frozen=True)
class AveragingSettings:
    """How frozen-law integrals are computed.

    ``estimator`` is ``"quadrature"`` (Gauss-Hermite against the model's
    closed-form Gaussian ``frozen_law``), ``"monte-carlo"`` (pooled
    time samples of the frozen fast process) or ``"auto"`` (quadrature when
    a closed form exists).  ``burn_in`` defaults to ``10 / rate`` from the
    sampled dissipativity constants and ``horizon`` to five burn-ins.
    """

    estimator: str = "auto"
    n_quad: int = 8
    n_paths: int = 1000
    samples_per_path: int = 10
    dt: float = 0.01
    burn_in: Optional[float] = None
    horizon: Optional[float] = None
    seed: int = 0
    jobs: int = 1

    def resolve(self, model: SlowFastModel) -> str:
        if self.estimator == "auto":
            return "quadrature" if model.frozen_law is not None else "monte-carlo"
        if self.estimator not in ("quadrature", "monte-carlo"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "quadrature" and model.frozen_law is None:
            raise ValueError("quadrature needs a model with a closed-form frozen_law")
        return self.estimator


@dataclass(frozen=True, eq=False)
class InvariantMeasureEstimate:
    x: np.ndarray
    regime: int
    cloud: np.ndarray  # (n_samples, dxi), equal weights
    burn_in: float
    horizon: float
    n_paths: int

    @property
    def mean(self) -> np.ndarray:
        return self.cloud.mean(axis=0)

    @property
    def cov(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.cloud, rowvar=False, bias=True))

    @property
    def variance(self) -> np.ndarray:
        return self.cloud.var(axis=0)

    @property
    def standard_error(self) -> np.ndarray:
        """Naive standard error of the mean (ignores within-path correlation)."""
        return self.cloud.std(axis=0, ddof=1) / math.sqrt(self.cloud.shape[0])


def default_burn_in(model: SlowFastModel, x, regime: int = 0) -> float:
    consts = validate_dissipativity(model, x, regime)
    if consts.rate <= 0:
        warnings.warn(
            f"sampled dissipativity check failed at x={np.ravel(x).tolist()} (rate {consts.rate:.3g}); "
            "using burn-in 10",
            RuntimeWarning,
            stacklevel=3,
        )
        return 10.0
    return 10.0 / consts.rate


def _snap(t: float, dt: float) -> float:
    return round(t / dt) * dt


def _sampling_plan(model, xs, regime, burn_in, horizon, dt, samples_per_path):
    if burn_in is None:
        burn_in = max(default_burn_in(model, x, regime) for x in xs)
    burn_in = max(_snap(burn_in, dt), dt)
    if horizon is None:
        horizon = 5.0 * burn_in
    horizon = _snap(horizon, dt)
    if horizon < burn_in:
        raise ValueError("horizon must not precede the burn-in")
    n = int(round(horizon / dt))
    start = int(round(burn_in / dt))
    if samples_per_path == 1 or n == start:
        idx = np.array([n])
    else:
        idx = np.unique(np.round(np.linspace(start, n, samples_per_path)).astype(int))
    return burn_in, horizon, PathGrid(0.0, horizon, dt), idx


def frozen_clouds(
    model: SlowFastModel,
    xs,
    regime: int = 0,
    burn_in=None,
    horizon=None,
    n_paths: int = 1000,
    seed: int = 0,
    dt: float = 0.01,
    samples_per_path: int = 10,
    xi0=None,
    jobs: int = 1,
):
    """Pooled post-burn-in samples of the frozen fast process at several slow points.

    All points share the same noise.  Returns ``(clouds, burn_in, horizon)``
    with ``clouds`` of shape ``(K, n_paths * samples, dxi)``.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    burn_in, horizon, grid, idx = _sampling_plan(model, xs, regime, burn_in, horizon, dt, samples_per_path)
    ens = simulate_frozen_fast(model, xs, grid, NoiseBundle(seed), n_paths=n_paths, xi0=xi0, record=idx, jobs=jobs)
    K = xs.shape[0]
    xi = ens.xi.reshape(idx.size, K, n_paths, model.dxi)
    clouds = np.transpose(xi, (1, 2, 0, 3)).reshape(K, n_paths * idx.size, model.dxi)
    return clouds, burn_in, horizon


def estimate_invariant_measure(
    model: SlowFastModel,
    x,
    regime: int = 0,
    burn_in: Optional[float] = None,
    horizon: Optional[float] = None,
    n_paths: int = 1000,
    seed: int = 0,
    dt: float = 0.01,
    samples_per_path: int = 10,
    xi0=None,
    jobs: int = 1,
) -> InvariantMeasureEstimate:
    """Sample cloud of the frozen fast process's invariant law at slow state ``x``.

    Paths start at ``xi0`` (default: the model's initial fast state), run
    for ``horizon`` and are sampled at ``samples_per_path`` evenly spaced
    nodes after ``burn_in``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    clouds, burn_in, horizon = frozen_clouds(
        model, x[None, :], regime, burn_in, horizon, n_paths, seed, dt, samples_per_path, xi0, jobs
    )
    return InvariantMeasureEstimate(x, regime, clouds[0], burn_in, horizon, n_paths)


# ---------------------------------------------------------------------------
# ergodic decay


@dataclass
class ErgodicityReport:
    times: np.ndarray
    deviations: np.ndarray
    noise_floor: np.ndarray
    rate: float  # fitted decay rate
    intercept: float  # log C of the fit
    used: np.ndarray  # points above the noise floor that entered the fit
    theoretical_rate: float
    reference: float

    @property
    def constant(self) -> float:
        return math.exp(self.intercept)

    def bound_holds(self, rate: float, constant: Optional[float] = None) -> bool:
        """Whether every deviation is at most ``C exp(-rate t)``."""
        c = self.constant if constant is None else constant
        return bool(np.all(self.deviations <= c * np.exp(-rate * self.times)))

    def rows(self) -> list:
        return [
            {"t": float(t), "deviation": float(d), "noise_floor": float(f), "used": bool(u)}
            for t, d, f, u in zip(self.times, self.deviations, self.noise_floor, self.used)
        ]


def ergodicity_decay(
    model: SlowFastModel,
    x,
    regime: int = 0,
    observable: Callable = None,
    eta=None,
    times=None,
    n_paths: int = 10_000,
    seed: int = 0,
    dt: float = 0.01,
    reference: Optional[float] = None,
    floor_factor: float = 3.0,
    jobs: int = 1,
) -> ErgodicityReport:
    """Fit the exponential rate at which ``E F(xi_t)`` approaches its invariant mean.

    ``observable`` maps ``(P, dxi)`` to ``(P,)`` (default: first
    coordinate).  The invariant mean comes from an independent
    :func:`estimate_invariant_measure` run unless ``reference`` is given.
    A point enters the least-squares fit of ``log deviation`` against
    ``t`` only if its deviation exceeds ``floor_factor`` standard errors.
    """
    F = observable if observable is not None else (lambda xi: xi[:, 0])
    x = np.atleast_1d(np.asarray(x, dtype=float))
    times = np.arange(0.5, 6.01, 0.5) if times is None else np.asarray(times, dtype=float)
    eta = model.xi0 if eta is None else np.atleast_1d(np.asarray(eta, dtype=float))
    theory = validate_dissipativity(model, x, regime).rate

    ref_se = 0.0
    if reference is None:
        est = estimate_invariant_measure(model, x, regime, n_paths=n_paths, seed=seed + 1, dt=dt, jobs=jobs)
        vals = F(est.cloud)
        reference = float(vals.mean())
        ref_se = float(vals.std(ddof=1) / math.sqrt(vals.size))

    T = _snap(float(times.max()), dt)
    grid = PathGrid(0.0, T, dt)
    idx = np.array([grid.index_of(_snap(t, dt)) for t in times])
    ens = simulate_frozen_fast(model, x, grid, NoiseBundle(seed), n_paths=n_paths, xi0=eta, record=idx, jobs=jobs)
    order = np.searchsorted(np.unique(idx), idx)
    means = np.empty(times.size)
    ses = np.empty(times.size)
    for j, k in enumerate(order):
        v = F(ens.xi[k])
        means[j] = v.mean()
        ses[j] = v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else 0.0
    dev = np.abs(means - reference)
    floor = floor_factor * np.sqrt(ses**2 + ref_se**2)
    used = dev > floor
    if np.count_nonzero(used) >= 2:
        slope, intercept = np.polyfit(times[used], np.log(dev[used]), 1)
        rate = -float(slope)
    else:
        if not used.any():
            warnings.warn("no time point rises above the noise floor", AllBelowNoiseFloor, stacklevel=2)
        rate, intercept = float("nan"), float(np.log(max(dev.max(initial=0.0), 1e-300)))
    return ErgodicityReport(times, dev, floor, rate, float(intercept), used, theory, float(reference))


# ---------------------------------------------------------------------------
# per-state frozen averages


@lru_cache(maxsize=None)
def _hermite_rule(n: int, dim: int):
    """Tensor Gauss-Hermite rule for the standard normal in ``dim`` dimensions."""
    u, w = hermgauss(n)
    nodes = np.stack([g.ravel() for g in np.meshgrid(*([u] * dim), indexing="ij")], axis=1) * math.sqrt(2.0)
    weights = np.ones(nodes.shape[0])
    for wg in np.meshgrid(*([w] * dim), indexing="ij"):
        weights = weights * wg.ravel()
    weights = weights / math.pi ** (dim / 2)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def _quadrature_cloud(model: SlowFastModel, xs: np.ndarray, n_quad: int):
    """Gauss-Hermite nodes of the Gaussian frozen law at every x: ``(K, M, dxi)`` and weights ``(M,)``."""
    mean, cov = model.frozen_law(xs)
    mean = np.asarray(mean, dtype=float).reshape(xs.shape[0], model.dxi)
    cov = np.asarray(cov, dtype=float).reshape(xs.shape[0], model.dxi, model.dxi)
    nodes, weights = _hermite_rule(n_quad, model.dxi)
    root = psd_root(cov)  # (K, dxi, dxi)
    cloud = mean[:, None, :] + np.einsum("kij,mj->kmi", root, nodes)
    return cloud, weights


def _clouds(model: SlowFastModel, xs: np.ndarray, settings: AveragingSettings):
    if settings.resolve(model) == "quadrature":
        return _quadrature_cloud(model, xs, settings.n_quad)
    clouds, _, _ = frozen_clouds(
        model, xs, 0, settings.burn_in, settings.horizon, settings.n_paths, settings.seed,
        settings.dt, settings.samples_per_path, jobs=settings.jobs,
    )
    return clouds, np.full(clouds.shape[1], 1.0 / clouds.shape[1])


PARTS = ("F", "A", "S", "G")


def state_averages(model: SlowFastModel, xs, settings: AveragingSettings = AveragingSettings(), parts=PARTS, cloud=None):
    """Frozen-law integrals of the slow coefficients for every switching state.

    Returns a dict with, for ``K`` slow points, ``n`` states and ``k`` atoms:
    ``F`` drift ``(n, K, dx)``, ``A`` = ``sigma sigma`` ``(n, K, dx, dx)``,
    ``S`` mean jump ``(n, K, k, dx)`` and ``G`` mean squared jump
    (diagonal) ``(n, K, k, dx)``.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    K, dx = xs.shape
    cl, w = _clouds(model, xs, settings) if cloud is None else cloud
    M = w.size
    xr = np.repeat(xs, M, axis=0)
    xif = cl.reshape(K * M, model.dxi)
    n = model.n_regimes
    atoms = model.jumps.atoms
    out = {}
    if "F" in parts:
        out["F"] = np.zeros((n, K, dx))
    if "A" in parts:
        out["A"] = np.zeros((n, K, dx, dx))
    if "S" in parts:
        out["S"] = np.zeros((n, K, atoms.shape[0], dx))
    if "G" in parts:
        out["G"] = np.zeros((n, K, atoms.shape[0], dx))

    def avg(vals):
        return np.einsum("km...,m->k...", vals.reshape((K, M) + vals.shape[1:]), w)

    for m in range(n):
        r = np.full(K * M, m)
        if "F" in parts and model.drift is not None:
            out["F"][m] = avg(model.drift(xr, r, xif))
        if "A" in parts and model.diffusion is not None:
            out["A"][m] = avg(index_square(model.diffusion(xr, r, xif)))
        if model.jump is not None and ("S" in parts or "G" in parts):
            for i, z in enumerate(atoms):
                g = model.jump(xr, r, xif, np.broadcast_to(z, (K * M, z.size)))
                if "S" in parts:
                    out["S"][m, :, i] = avg(g)
                if "G" in parts:
                    out["G"][m, :, i] = avg(g * g)
    return out


def _class_weights(qsd: QuasiStationaryDistribution, t) -> np.ndarray:
    seg = 0 if t is None else segment_index(qsd.breakpoints, t)
    return qsd.weight_matrix(seg)


def average_coefficient(
    model: SlowFastModel,
    which: str,
    x,
    qsd: Optional[QuasiStationaryDistribution] = None,
    settings: AveragingSettings = AveragingSettings(),
    gamma: int = 0,
    t: Optional[float] = None,
) -> np.ndarray:
    """Averaged coefficient of class ``gamma`` at one slow point.

    ``which`` selects ``"f"`` (drift, ``(dx,)``), ``"a"`` (``sigma sigma``,
    ``(dx, dx)``), ``"G"`` (the jump integral ``sum_i w_i Gbar(x, z_i)``,
    ``(dx, dx)``) or ``"g"`` (per-atom averaged jump sizes, ``(k, dx)``).
    """
    qsd = quasi_stationary_schedule(model.switching) if qsd is None else qsd
    W = _class_weights(qsd, t)[gamma]  # (n,)
    parts = {"f": ("F",), "a": ("A",), "G": ("G",), "g": ("S", "G")}
    if which not in parts:
        raise ValueError(f"unknown coefficient {which!r}")
    avg = state_averages(model, x, settings, parts[which])
    if which == "f":
        return np.einsum("m,mkd->kd", W, avg["F"])[0]
    if which == "a":
        return np.einsum("m,mkij->kij", W, avg["A"])[0]
    G = np.einsum("m,mkid->kid", W, avg["G"])[0]
    if which == "G":
        return np.diag(model.jumps.weights @ G) if G.size else np.zeros((model.dx, model.dx))
    S = np.einsum("m,mkid->kid", W, avg["S"])[0]
    return _signed_root(S, G)


def _encode_times(bp) -> list:
    # unbounded schedules use +-inf, which strict JSON cannot carry
    return [v if np.isfinite(v) else ("inf" if v > 0 else "-inf") for v in map(float, bp)]


def _decode_times(values) -> np.ndarray:
    return np.array([float(v) for v in values])


def _signed_root(S, G):
    return np.where(S < 0, -1.0, 1.0) * np.sqrt(np.maximum(G, 0.0))


# ---------------------------------------------------------------------------
# averaged model


@dataclass(eq=False)
class AveragedModel:
    """Averaged slow dynamics with one regime per class.

    In ``"closed-form"`` mode per-state frozen integrals are evaluated on
    demand; in ``"grid"`` mode they are read from tables on a tensor grid
    of slow points and interpolated linearly, and queries outside the box
    raise :class:`GridExtrapolation`.
    """

    dx: int
    x0: np.ndarray
    initial_class: int
    qsd: QuasiStationaryDistribution
    aggregated: GeneratorSchedule
    measure: JumpMeasure
    mode: str
    evaluator: Optional[Callable] = None  # closed-form: xs -> state_averages dict
    nodes: Optional[list] = None  # grid: per-dimension node arrays
    tables: Optional[dict] = None  # grid: part -> (n, *shape, ...)
    provenance: dict = field(default_factory=dict)
    _interp: dict = field(default_factory=dict, repr=False)

    @property
    def n_classes(self) -> int:
        return self.aggregated.n_states

    def generator(self, t: float = 0.0) -> np.ndarray:
        return self.aggregated.at(t)

    # per-state values -------------------------------------------------
    def _interpolator(self, part):
        if part not in self._interp:
            tab = self.tables[part]
            n = tab.shape[0]
            shape = tab.shape[1:1 + self.dx]
            tail = tab.shape[1 + self.dx:]
            values = np.moveaxis(tab, 0, self.dx).reshape(shape + (n * int(np.prod(tail, dtype=int)),))
            self._interp[part] = (RegularGridInterpolator(self.nodes, values, bounds_error=True), n, tail)
        return self._interp[part]

    def state_values(self, x, parts=PARTS) -> dict:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.mode == "closed-form":
            return self.evaluator(x, parts)
        self._check_box(x)
        out = {}
        for p in parts:
            interp, n, tail = self._interpolator(p)
            vals = interp(x).reshape((x.shape[0], n) + tail)
            out[p] = np.moveaxis(vals, 1, 0)
        return out

    def _check_box(self, x):
        for d, nd in enumerate(self.nodes):
            lo, hi = nd[0], nd[-1]
            bad = (x[:, d] < lo) | (x[:, d] > hi) | ~np.isfinite(x[:, d])
            if bad.any():
                v = float(x[np.flatnonzero(bad)[0], d])
                raise GridExtrapolation(f"x_{d + 1}={v} outside the tabulated box [{lo}, {hi}]")

    def _weights(self, gamma, t, P):
        W = _class_weights(self.qsd, t)  # (l, n)
        g = np.broadcast_to(np.asarray(gamma, dtype=int), (P,))
        return W[g]  # (P, n)

    # averaged coefficients -------------------------------------------
    def drift(self, x, gamma=0, t=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        F = self.state_values(x, ("F",))["F"]
        return np.einsum("pm,mpd->pd", self._weights(gamma, t, x.shape[0]), F)

    def diffusion_matrix(self, x, gamma=0, t=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        A = self.state_values(x, ("A",))["A"]
        return np.einsum("pm,mpij->pij", self._weights(gamma, t, x.shape[0]), A)

    def sigma(self, x, gamma=0, t=None) -> np.ndarray:
        return psd_root(self.diffusion_matrix(x, gamma, t))

    def jump_sizes(self, x, gamma=0, t=None) -> np.ndarray:
        """Per-atom averaged jump sizes ``(P, k, dx)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v = self.state_values(x, ("S", "G"))
        W = self._weights(gamma, t, x.shape[0])
        S = np.einsum("pm,mpid->pid", W, v["S"])
        G = np.einsum("pm,mpid->pid", W, v["G"])
        return _signed_root(S, G)

    def jump_integral(self, x, gamma=0, t=None) -> np.ndarray:
        """``sum_i w_i Gbar(x, z_i)`` as a diagonal ``(P, dx, dx)`` matrix."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        G = self.state_values(x, ("G",))["G"]
        W = self._weights(gamma, t, x.shape[0])
        gi = np.einsum("pm,mpid,i->pd", W, G, self.measure.weights)
        return gi[..., :, None] * np.eye(self.dx)

    def coefficients(self, x, gamma=0, t=None):
        """Drift ``(P, dx)``, diffusion root ``(P, dx, dx)`` and per-atom jumps ``(P, k, dx)`` in one pass."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        parts = ("F", "A") if self.measure.is_empty else PARTS
        v = self.state_values(x, parts)
        W = self._weights(gamma, t, x.shape[0])
        f = np.einsum("pm,mpd->pd", W, v["F"])
        s = psd_root(np.einsum("pm,mpij->pij", W, v["A"]))
        if self.measure.is_empty:
            return f, s, np.zeros((x.shape[0], 0, self.dx))
        S = np.einsum("pm,mpid->pid", W, v["S"])
        G = np.einsum("pm,mpid->pid", W, v["G"])
        return f, s, _signed_root(S, G)

    def as_system(self) -> System:
        """Coefficient adapter for the stepper; class labels play the role of regimes."""
        w = self.measure.weights
        local = threading.local()

        def coeffs(x, r, t):
            # the stepper never mutates a state array once it is passed in,
            # so holding a reference makes identity a safe per-step cache key
            hit = getattr(local, "entry", None)
            if hit is None or hit[0] is not x or hit[1] is not r or hit[2] != t:
                hit = (x, r, t, self.coefficients(x, r, t))
                local.entry = hit
            return hit[3]

        sys = System(
            self.dx,
            0,
            self.measure,
            drift=lambda x, r, xi, t: coeffs(x, r, t)[0],
            diffusion=lambda x, r, xi, t: coeffs(x, r, t)[1],
        )
        if not self.measure.is_empty:
            sys.jump = lambda x, r, xi, t, idx: coeffs(x, r, t)[2][np.arange(x.shape[0]), idx]
            sys.jump_comp = lambda x, r, xi, t: np.einsum("pid,i->pd", coeffs(x, r, t)[2], w)
        return sys

    # serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        if self.mode != "grid":
            raise TypeError("only grid-mode averaged models can be serialized")
        return {
            "format": "slowfast-averaged-model/1",
            "dx": self.dx,
            "x0": self.x0.tolist(),
            "initial_class": self.initial_class,
            "class_sizes": list(self.qsd.partition.sizes),
            "qsd_breakpoints": _encode_times(self.qsd.breakpoints),
            "qsd_vectors": [[v.tolist() for v in seg] for seg in self.qsd.vectors],
            "aggregated_breakpoints": _encode_times(self.aggregated.breakpoints),
            "aggregated_matrices": self.aggregated.matrices.tolist(),
            "jump_atoms": self.measure.atoms.tolist(),
            "jump_weights": self.measure.weights.tolist(),
            "jump_radius": self.measure.radius,
            "nodes": [nd.tolist() for nd in self.nodes],
            "tables": {k: v.tolist() for k, v in self.tables.items()},
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AveragedModel":
        partition = ClassPartition(tuple(d["class_sizes"]))
        qsd = QuasiStationaryDistribution(
            _decode_times(d["qsd_breakpoints"]),
            [[np.array(v, dtype=float) for v in seg] for seg in d["qsd_vectors"]],
            partition,
        )
        agg = GeneratorSchedule(_decode_times(d["aggregated_breakpoints"]), np.array(d["aggregated_matrices"]))
        atoms = np.array(d["jump_atoms"], dtype=float)
        measure = JumpMeasure(atoms.reshape(len(d["jump_weights"]), -1), d["jump_weights"], d["jump_radius"])
        return cls(
            dx=int(d["dx"]),
            x0=np.array(d["x0"], dtype=float),
            initial_class=int(d["initial_class"]),
            qsd=qsd,
            aggregated=agg,
            measure=measure,
            mode="grid",
            nodes=[np.array(nd, dtype=float) for nd in d["nodes"]],
            tables={k: np.array(v, dtype=float) for k, v in d["tables"].items()},
            provenance=dict(d.get("provenance", {})),
        )

    def save(self, directory) -> list:
        """Write ``averaged_model.json`` (reloadable) and ``averaged_model.csv`` (segment 0 view)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        jpath = directory / "averaged_model.json"
        jpath.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        cpath = directory / "averaged_model.csv"
        mesh = np.stack([g.ravel() for g in np.meshgrid(*self.nodes, indexing="ij")], axis=1)
        dx = self.dx
        with cpath.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                [f"x_{i + 1}" for i in range(dx)] + ["class"] + [f"f_bar_{i + 1}" for i in range(dx)]
                + [f"a_bar_{i + 1}{j + 1}" for i in range(dx) for j in range(dx)]
                + [f"jump_integral_{i + 1}" for i in range(dx)]
            )
            for gamma in range(self.n_classes):
                f = self.drift(mesh, gamma, self.qsd.breakpoints[0])
                a = self.diffusion_matrix(mesh, gamma, self.qsd.breakpoints[0])
                gi = self.jump_integral(mesh, gamma, self.qsd.breakpoints[0])
                for p in range(mesh.shape[0]):
                    w.writerow([repr(float(v)) for v in mesh[p]] + [gamma] + [repr(float(v)) for v in f[p]]
                               + [repr(float(v)) for v in a[p].ravel()] + [repr(float(v)) for v in np.diag(gi[p])])
        return [jpath, cpath]

    @classmethod
    def load(cls, path) -> "AveragedModel":
        path = Path(path)
        if path.is_dir():
            path = path / "averaged_model.json"
        return cls.from_dict(json.loads(path.read_text()))


def build_averaged_model(
    model: SlowFastModel,
    mode: str = "closed-form",
    box=None,
    resolution: int = 41,
    settings: AveragingSettings = AveragingSettings(),
    qsd: Optional[QuasiStationaryDistribution] = None,
) -> AveragedModel:
    """Assemble the averaged slow model of ``model``.

    ``mode="closed-form"`` needs the model's Gaussian ``frozen_law`` and
    integrates against it by quadrature at every query.  ``mode="grid"``
    tabulates per-state averages on ``resolution`` nodes per dimension of
    ``box`` (a ``(low, high)`` pair, or one pair per dimension) with the
    estimator chosen by ``settings``; Monte Carlo tables share noise
    across nodes.
    """
    qsd = quasi_stationary_schedule(model.switching) if qsd is None else qsd
    agg = aggregated_schedule(model.switching)
    partition = model.switching.partition
    common = dict(
        dx=model.dx,
        x0=model.x0.copy(),
        initial_class=int(partition.class_of[model.r0]),
        qsd=qsd,
        aggregated=agg,
        measure=model.jumps,
    )
    if mode == "closed-form":
        if model.frozen_law is None:
            raise ValueError("closed-form averaging needs a model with frozen_law; use mode='grid'")
        quad = replace(settings, estimator="quadrature")
        return AveragedModel(
            mode="closed-form",
            evaluator=lambda xs, parts: state_averages(model, xs, quad, parts),
            provenance={"estimator": "quadrature", "n_quad": settings.n_quad, "model": model.name},
            **common,
        )
    if mode != "grid":
        raise ValueError(f"unknown mode {mode!r}")
    if box is None:
        raise ValueError("grid mode needs a box")
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    if box.shape[0] == 1 and model.dx > 1:
        box = np.repeat(box, model.dx, axis=0)
    if box.shape[0] != model.dx or np.any(box[:, 1] <= box[:, 0]):
        raise ValueError("box must give low < high for every slow dimension")
    nodes = [np.linspace(lo, hi, resolution) for lo, hi in box]
    mesh = np.stack([g.ravel() for g in np.meshgrid(*nodes, indexing="ij")], axis=1)
    vals = state_averages(model, mesh, settings)
    shape = tuple(len(nd) for nd in nodes)
    tables = {k: v.reshape((v.shape[0],) + shape + v.shape[2:]) for k, v in vals.items()}
    estimator = settings.resolve(model)
    prov = {"estimator": estimator, "model": model.name, "resolution": resolution, "box": box.tolist()}
    if estimator == "monte-carlo":
        prov.update(seed=settings.seed, n_paths=settings.n_paths, samples_per_path=settings.samples_per_path,
                    dt=settings.dt)
    else:
        prov.update(n_quad=settings.n_quad)
    return AveragedModel(mode="grid", nodes=nodes, tables=tables, provenance=prov, **common)
