"""Slow-fast jump-diffusion with Markov switching.

Coefficient callbacks are vectorised over a leading batch axis ``P``:

=============  ==============================  ====================
callback       arguments                       returns
=============  ==============================  ====================
drift          x (P,dx), r (P,), xi (P,dxi)    (P, dx)
diffusion      x, r, xi                        (P, dx, dx)
jump           x, r, xi, z (P,dz)              (P, dx)
fast_drift     x, xi                           (P, dxi)
fast_diffusion x, xi                           (P, dxi, dxi)
fast_jump      x, xi, z                        (P, dxi)
=============  ==============================  ====================

``r`` carries 0-based regime indices.  A callback left as ``None`` is
identically zero.  Callbacks must be pure; they are called concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .switching import TwoScaleGenerator


@dataclass(frozen=True, eq=False)
class JumpMeasure:
    """Finite atomic Levy measure on the ball ``|z| < radius``."""

    atoms: np.ndarray
    weights: np.ndarray
    radius: float = 1.0

    def __post_init__(self):
        atoms = np.array(self.atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        weights = np.array(self.weights, dtype=float).ravel()
        if atoms.shape[0] != weights.size:
            raise ValueError("one weight per atom required")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise ValueError("atom weights must be positive and finite")
        if atoms.size and np.any(np.linalg.norm(atoms, axis=1) >= self.radius):
            raise ValueError(f"atoms must lie strictly inside radius {self.radius}")
        atoms.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empty(cls, dim: int = 1, radius: float = 1.0) -> "JumpMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0), radius)

    @property
    def total_rate(self) -> float:
        return float(self.weights.sum())

    @property
    def probabilities(self) -> np.ndarray:
        return self.weights / self.total_rate

    @property
    def is_empty(self) -> bool:
        return self.weights.size == 0

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]


@dataclass(frozen=True, eq=False)
class SlowFastModel:
    """Coefficients, jump measure, switching and initial data.

    ``frozen_law`` optionally gives the invariant law of the frozen fast
    process in closed form as a Gaussian: ``frozen_law(x) -> (mean, cov)``
    with shapes ``(P, dxi)`` and ``(P, dxi, dxi)``.
    """

    switching: TwoScaleGenerator
    x0: np.ndarray
    xi0: np.ndarray
    r0: int = 0
    drift: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    jump: Optional[Callable] = None
    fast_drift: Optional[Callable] = None
    fast_diffusion: Optional[Callable] = None
    fast_jump: Optional[Callable] = None
    jumps: JumpMeasure = field(default_factory=JumpMeasure.empty)
    frozen_law: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        x0 = np.atleast_1d(np.array(self.x0, dtype=float))
        xi0 = np.atleast_1d(np.array(self.xi0, dtype=float))
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "xi0", xi0)
        if not 0 <= self.r0 < self.switching.n_states:
            raise ValueError(f"initial regime {self.r0} outside the switching state space")

    @property
    def dx(self) -> int:
        return self.x0.size

    @property
    def dxi(self) -> int:
        return self.xi0.size

    @property
    def n_regimes(self) -> int:
        return self.switching.n_states

    @property
    def has_fast_dynamics(self) -> bool:
        return any(c is not None for c in (self.fast_drift, self.fast_diffusion, self.fast_jump))


def index_square(m) -> np.ndarray:
    """``sum_k m_ik m_kj`` over the last two axes (scalars are squared)."""
    m = np.asarray(m, dtype=float)
    if m.ndim == 0:
        return m * m
    return np.matmul(m, m)


def diag_square(v) -> np.ndarray:
    """:func:`index_square` of ``diag(v)`` for a batch of vectors ``v``."""
    v = np.asarray(v, dtype=float)
    return (v * v)[..., :, None] * np.eye(v.shape[-1])


def diffusion_matrix(model: SlowFastModel, x, r, xi) -> np.ndarray:
    """``a = sigma sigma`` (matrix product of sigma with itself).

    This equals ``sigma sigma^T`` only when sigma is symmetric.
    """
    x, r, xi = _batch(model, x, r, xi)
    if model.diffusion is None:
        return np.zeros((x.shape[0], model.dx, model.dx))
    return index_square(model.diffusion(x, r, xi))


def jump_matrix(model: SlowFastModel, x, r, xi, z) -> np.ndarray:
    """``G = g g`` with the jump vector ``g`` read as a diagonal matrix."""
    x, r, xi = _batch(model, x, r, xi)
    if model.jump is None:
        return np.zeros((x.shape[0], model.dx, model.dx))
    z = np.broadcast_to(np.atleast_2d(np.asarray(z, dtype=float)), (x.shape[0], model.jumps.dim))
    return diag_square(model.jump(x, r, xi, z))


def jump_compensator_drift(coef: Callable, measure: JumpMeasure, *args) -> np.ndarray:
    """``sum_i w_i coef(*args, z_i)``: the exact compensator of an atomic measure.

    ``args`` are the batched leading arguments of ``coef`` (``x, r, xi`` for
    the slow jump, ``x, xi`` for the fast jump).
    """
    P = np.shape(args[0])[0]
    total = None
    for z, w in zip(measure.atoms, measure.weights):
        val = w * np.asarray(coef(*args, np.broadcast_to(z, (P, z.size))), dtype=float)
        total = val if total is None else total + val
    if total is None:
        return 0.0
    return total


def _batch(model, x, r, xi):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    P = max(x.shape[0], xi.shape[0])
    x = np.broadcast_to(x, (P, model.dx))
    xi = np.broadcast_to(xi, (P, model.dxi))
    r = np.broadcast_to(np.asarray(r, dtype=int), (P,))
    return x, r, xi


@dataclass(frozen=True)
class SamplingSpec:
    """Box and pair count for the sampling-based assumption checks.

    With ``pair_scale`` set, the second point of each pair is the first one
    shifted by a uniform offset in ``[-pair_scale, pair_scale]`` per
    coordinate; otherwise both are uniform in the box.
    """

    x_low: float = -5.0
    x_high: float = 5.0
    xi_low: float = -5.0
    xi_high: float = 5.0
    n_pairs: int = 2000
    seed: int = 0
    pair_scale: Optional[float] = None

    def draw(self, dx: int, dxi: int):
        rng = np.random.default_rng(self.seed)
        # one block, row-major: the first n rows do not depend on n_pairs
        u = rng.random((self.n_pairs, 2 * (dx + dxi)))
        lo = np.concatenate([np.full(dx, self.x_low), np.full(dxi, self.xi_low)])
        hi = np.concatenate([np.full(dx, self.x_high), np.full(dxi, self.xi_high)])
        p1 = lo + (hi - lo) * u[:, : dx + dxi]
        if self.pair_scale is None:
            p2 = lo + (hi - lo) * u[:, dx + dxi:]
        else:
            p2 = p1 + self.pair_scale * (2.0 * u[:, dx + dxi:] - 1.0)
        return p1[:, :dx], p1[:, dx:], p2[:, :dx], p2[:, dx:]


@dataclass(frozen=True)
class LipschitzReport:
    ratios: np.ndarray  # per regime, max sampled squared-Lipschitz ratio
    declared: Optional[np.ndarray]
    n_pairs: int

    @property
    def passed(self) -> np.ndarray:
        if self.declared is None:
            return np.isfinite(self.ratios)
        return self.ratios <= self.declared

    @property
    def flagged(self) -> np.ndarray:
        return np.flatnonzero(~self.passed)


def _sq(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return (v * v).reshape(v.shape[0], -1).sum(axis=1)


def validate_lipschitz(model: SlowFastModel, spec: SamplingSpec = SamplingSpec(), declared=None) -> LipschitzReport:
    """Sampled estimate of the per-regime squared Lipschitz constant of (f, sigma, g).

    A falsifier, not a certificate: it reports the largest ratio seen on
    the sampled pairs.  Pairs with zero separation are skipped.
    """
    x1, xi1, x2, xi2 = spec.draw(model.dx, model.dxi)
    denom = _sq(x1 - x2) + _sq(xi1 - xi2)
    keep = denom > 0
    x1, xi1, x2, xi2, denom = x1[keep], xi1[keep], x2[keep], xi2[keep], denom[keep]
    ratios = np.zeros(model.n_regimes)
    for g in range(model.n_regimes):
        r = np.full(x1.shape[0], g)
        num = np.zeros(x1.shape[0])
        if model.drift is not None:
            num = np.maximum(num, _sq(model.drift(x1, r, xi1) - model.drift(x2, r, xi2)))
        if model.diffusion is not None:
            num = np.maximum(num, _sq(model.diffusion(x1, r, xi1) - model.diffusion(x2, r, xi2)))
        if model.jump is not None and not model.jumps.is_empty:
            jl = jump_compensator_drift(
                lambda a, b, c, d, e, z: _sq(model.jump(a, b, c, z) - model.jump(d, b, e, z)),
                model.jumps, x1, r, xi1, x2, xi2,
            )
            num = np.maximum(num, jl)
        ratios[g] = float(np.max(num / denom)) if num.size else 0.0
    if declared is not None:
        declared = np.broadcast_to(np.asarray(declared, dtype=float), ratios.shape)
    return LipschitzReport(ratios, declared, int(keep.sum()))


@dataclass(frozen=True)
class DissipativityConstants:
    """Sampled contraction and growth constants of the fast coefficients at a frozen slow state."""

    alpha1: float
    alpha2: float
    alpha3: float
    alpha1_growth: float
    alpha2_growth: float
    alpha3_growth: float
    alpha: float
    x_frozen: np.ndarray = None
    regime: int = 0

    @property
    def rate(self) -> float:
        """``2 alpha1 - alpha2 - alpha3``, the exponential mixing rate."""
        return 2 * self.alpha1 - self.alpha2 - self.alpha3

    @property
    def growth_rate(self) -> float:
        return 2 * self.alpha1_growth - self.alpha2_growth - self.alpha3_growth

    @property
    def passed(self) -> bool:
        return self.rate > 0 and self.growth_rate > 0


def validate_dissipativity(
    model: SlowFastModel,
    x_frozen,
    regime: int = 0,
    spec: SamplingSpec = SamplingSpec(),
    slack: float = 0.1,
) -> DissipativityConstants:
    """Estimate the monotonicity constants of the fast coefficients at ``x_frozen``.

    ``alpha1`` is the smallest sampled ``-<d xi, d kappa> / |d xi|^2``;
    ``alpha2`` and ``alpha3`` the largest squared Lipschitz ratios of the
    fast drift/diffusion and of the fast jump under the Levy measure.  The
    growth constants are taken as ``(1 -+ slack)`` times these, and ``alpha``
    is the smallest intercept making every sampled growth inequality hold.
    """
    xf = np.atleast_1d(np.asarray(x_frozen, dtype=float))
    _, xi1, _, xi2 = spec.draw(model.dx, model.dxi)
    d = xi1 - xi2
    dd = _sq(d)
    keep = dd > 0
    xi1, xi2, d, dd = xi1[keep], xi2[keep], d[keep], dd[keep]
    P = xi1.shape[0]
    x = np.broadcast_to(xf, (P, model.dx))

    def kappa(xi):
        return np.zeros((P, model.dxi)) if model.fast_drift is None else model.fast_drift(x, xi)

    def vsig(xi):
        if model.fast_diffusion is None:
            return np.zeros((P, model.dxi, model.dxi))
        return model.fast_diffusion(x, xi)

    k1, k2 = kappa(xi1), kappa(xi2)
    inner = np.sum(d * (k1 - k2), axis=1)
    alpha1 = float(np.min(-inner / dd))
    alpha2 = float(np.max(np.maximum(_sq(k1 - k2), _sq(vsig(xi1) - vsig(xi2))) / dd))
    dvt = np.zeros(P)
    gvt = np.zeros(P)
    if model.fast_jump is not None and not model.jumps.is_empty:
        for z, w in zip(model.jumps.atoms, model.jumps.weights):
            zb = np.broadcast_to(z, (P, z.size))
            j1 = model.fast_jump(x, xi1, zb)
            dvt += w * _sq(j1 - model.fast_jump(x, xi2, zb))
            gvt += w * _sq(j1)
    alpha3 = float(np.max(dvt / dd))

    a1g = (1 - slack) * alpha1
    a2g = (1 + slack) * alpha2
    a3g = (1 + slack) * alpha3
    base = 1.0 + float(xf @ xf)
    n1 = _sq(xi1)
    need = [
        (np.sum(xi1 * k1, axis=1) + a1g * n1) / base,
        (np.maximum(_sq(k1), _sq(vsig(xi1))) - a2g * n1) / base,
        (gvt - a3g * n1) / base,
    ]
    alpha = max(0.0, max(float(np.max(v)) for v in need))
    return DissipativityConstants(alpha1, alpha2, alpha3, a1g, a2g, a3g, alpha, xf, regime)
