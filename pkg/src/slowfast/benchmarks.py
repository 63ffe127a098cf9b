"""Named benchmark models used by the studies and the acceptance suite."""

from __future__ import annotations

import numpy as np

from .model import JumpMeasure, SlowFastModel
from .switching import ClassPartition, TwoScaleGenerator

SINGLE_CLASS_FAST = [[-1.0, 1.0], [2.0, -2.0]]
TWO_CLASS_FAST = [[-1.0, 1.0, 0.0], [2.0, -2.0, 0.0], [0.0, 0.0, 0.0]]
TWO_CLASS_SLOW = [[-1.0, 0.0, 1.0], [0.0, -2.0, 2.0], [1.0, 1.0, -2.0]]


def _scalar_diag(values):
    values = np.asarray(values, dtype=float)
    return lambda x, r, xi: values[r][:, None, None] * np.ones((x.shape[0], 1, 1))


def _ou_fast(mean_reversion=1.0, noise=1.0):
    def kappa(x, xi):
        return -mean_reversion * (xi - x)

    def vsig(x, xi):
        return np.full((xi.shape[0], 1, 1), noise)

    def law(x):
        P = x.shape[0]
        return x.copy(), np.full((P, 1, 1), noise**2 / (2 * mean_reversion))

    return kappa, vsig, law


def _symmetric_jumps(size=0.5, rate=1.0):
    return JumpMeasure([[size], [-size]], [rate / 2, rate / 2], radius=1.0)


def linear(c=(3.0, 6.0), sigma=(1.0, 2.0), x0=1.0, xi0=1.0, jump_size=0.5, jump_rate=1.0) -> SlowFastModel:
    """Single weakly irreducible class, drift ``c_r * xi`` with an OU fast process around ``x``.

    Quasi-stationary law (2/3, 1/3), frozen law N(x, 1/2); averaged drift
    4x and averaged diffusion sqrt(2) with the default parameters.  Slow
    jumps are additive, ``g = z``.
    """
    c = np.asarray(c, dtype=float)
    kappa, vsig, law = _ou_fast()
    return SlowFastModel(
        switching=TwoScaleGenerator(np.array(SINGLE_CLASS_FAST)),
        x0=[x0],
        xi0=[xi0],
        r0=0,
        drift=lambda x, r, xi: c[r][:, None] * xi,
        diffusion=_scalar_diag(sigma),
        jump=lambda x, r, xi, z: np.broadcast_to(z, x.shape).copy(),
        fast_drift=kappa,
        fast_diffusion=vsig,
        jumps=_symmetric_jumps(jump_size, jump_rate),
        frozen_law=law,
        name="linear",
    )


def linear_two_class(c=(3.0, 6.0, -2.0), sigma=(1.0, 2.0, 1.0), x0=1.0, xi0=1.0) -> SlowFastModel:
    """Classes {0, 1} and {2}; aggregated generator [[-4/3, 4/3], [2, -2]]."""
    c = np.asarray(c, dtype=float)
    kappa, vsig, law = _ou_fast()
    gen = TwoScaleGenerator(np.array(TWO_CLASS_FAST), np.array(TWO_CLASS_SLOW), ClassPartition((2, 1)))
    return SlowFastModel(
        switching=gen,
        x0=[x0],
        xi0=[xi0],
        r0=0,
        drift=lambda x, r, xi: c[r][:, None] * xi,
        diffusion=_scalar_diag(sigma),
        jump=lambda x, r, xi, z: np.broadcast_to(z, x.shape).copy(),
        fast_drift=kappa,
        fast_diffusion=vsig,
        jumps=_symmetric_jumps(),
        frozen_law=law,
        name="linear-2class",
    )


def ou_fast(x0=2.0, xi0=0.0, jump_size=None, jump_rate=1.0) -> SlowFastModel:
    """Only fast dynamics: ``d xi = -(xi - x) dt + dw``, optionally with additive jumps."""
    kappa, vsig, law = _ou_fast()
    jumps = JumpMeasure.empty() if jump_size is None else _symmetric_jumps(jump_size, jump_rate)
    fast_jump = None if jump_size is None else (lambda x, xi, z: np.broadcast_to(z, xi.shape).copy())
    return SlowFastModel(
        switching=TwoScaleGenerator(np.zeros((1, 1))),
        x0=[x0],
        xi0=[xi0],
        fast_drift=kappa,
        fast_diffusion=vsig,
        fast_jump=fast_jump,
        jumps=jumps,
        frozen_law=law if jump_size is None else None,
        name="ou-fast",
    )


def ou_slow(x0=0.0) -> SlowFastModel:
    """``dx = -x dt + dw`` with trivial fast part and a single regime."""
    return SlowFastModel(
        switching=TwoScaleGenerator(np.zeros((1, 1))),
        x0=[x0],
        xi0=[0.0],
        drift=lambda x, r, xi: -x,
        diffusion=lambda x, r, xi: np.ones((x.shape[0], 1, 1)),
        name="ou-slow",
    )


def diffusion_only(x0=0.0) -> SlowFastModel:
    return SlowFastModel(
        switching=TwoScaleGenerator(np.zeros((1, 1))),
        x0=[x0],
        xi0=[0.0],
        diffusion=lambda x, r, xi: np.ones((x.shape[0], 1, 1)),
        name="diffusion",
    )


def drift_only(x0=0.0, rate=1.0) -> SlowFastModel:
    return SlowFastModel(
        switching=TwoScaleGenerator(np.zeros((1, 1))),
        x0=[x0],
        xi0=[0.0],
        drift=lambda x, r, xi: np.full_like(x, rate),
        name="drift",
    )


def zero(x0=0.0, xi0=0.0) -> SlowFastModel:
    return SlowFastModel(switching=TwoScaleGenerator(np.zeros((1, 1))), x0=[x0], xi0=[xi0], name="zero")


def identical_law(x0=1.0) -> SlowFastModel:
    """Slow coefficients ignore both the regime and the fast state.

    The coupled and averaged slow laws coincide for every eps.
    """
    kappa, vsig, law = _ou_fast()
    return SlowFastModel(
        switching=TwoScaleGenerator(np.array(SINGLE_CLASS_FAST)),
        x0=[x0],
        xi0=[0.0],
        drift=lambda x, r, xi: -x,
        diffusion=lambda x, r, xi: np.ones((x.shape[0], 1, 1)),
        fast_drift=kappa,
        fast_diffusion=vsig,
        frozen_law=law,
        name="identical-law",
    )


def symmetric_chain() -> TwoScaleGenerator:
    """Two states swapping at unit rate; quasi-stationary law (1/2, 1/2)."""
    return TwoScaleGenerator(np.array([[-1.0, 1.0], [1.0, -1.0]]))


BENCHMARKS = {
    "linear": linear,
    "linear-2class": linear_two_class,
    "ou-fast": ou_fast,
    "ou-slow": ou_slow,
    "diffusion": diffusion_only,
    "drift": drift_only,
    "zero": zero,
    "identical-law": identical_law,
}


def get_benchmark(name: str, **params) -> SlowFastModel:
    try:
        factory = BENCHMARKS[name]
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}") from None
    return factory(**params)
