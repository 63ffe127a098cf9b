from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from slowfast import benchmarks
from slowfast.analysis import (
    BumpFunction,
    ZeroFunction,
    ks_statistic,
    ks_test,
    modulus_check,
    perturbation_magnitude,
    switching_ergodicity_study,
    terminal_ensemble,
    wasserstein1,
    weak_convergence_study,
)
from slowfast.averaging import build_averaged_model
from slowfast.errors import BudgetExceeded, StepTooCoarse
from slowfast.integrator import PathGrid, averaged_ensemble, coupled_ensemble
from slowfast.switching import TwoScaleGenerator

samples = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=30)


def test_wasserstein_examples():
    assert wasserstein1([0.0, 1.0], [1.0, 0.0]) == 0.0
    assert wasserstein1([0.0, 1.0], [1.0, 2.0]) == 1.0
    assert wasserstein1([0.0, 2.0], [1.0, 1.0]) == 1.0
    with pytest.raises(ValueError):
        wasserstein1([0.0, 1.0], [1.0])


def test_ks_examples():
    assert ks_statistic([0.0, 1.0], [1.0, 0.0]) == 0.0
    assert ks_statistic([0.0, 0.0], [1.0, 1.0]) == 1.0
    assert ks_statistic([0.0, 1.0], [0.0, 2.0]) == 0.5
    with pytest.raises(ValueError):
        ks_statistic([], [1.0])


@given(st.data(), st.integers(1, 30))
@settings(max_examples=100, deadline=None)
def test_wasserstein_matches_scipy_and_is_symmetric(data, n):
    a = data.draw(st.lists(st.floats(-100, 100), min_size=n, max_size=n))
    b = data.draw(st.lists(st.floats(-100, 100), min_size=n, max_size=n))
    w = wasserstein1(a, b)
    assert w >= 0
    assert w == wasserstein1(b, a)
    assert w == pytest.approx(stats.wasserstein_distance(a, b), abs=1e-9)


@given(st.data(), st.integers(1, 30))
@settings(max_examples=100, deadline=None)
def test_wasserstein_triangle(data, n):
    a, b, c = (data.draw(st.lists(st.floats(-100, 100), min_size=n, max_size=n)) for _ in range(3))
    assert wasserstein1(a, c) <= wasserstein1(a, b) + wasserstein1(b, c) + 1e-9


@given(samples, samples)
@settings(max_examples=100, deadline=None)
def test_ks_symmetric_and_bounded(a, b):
    d = ks_statistic(a, b)
    assert 0.0 <= d <= 1.0
    assert d == ks_statistic(b, a)


def test_terminal_ensemble_examples():
    grid = PathGrid(0, 1, 0.01)
    z = terminal_ensemble(benchmarks.zero(x0=1.0), 50, grid, seed=0)
    assert np.all(z.samples == 1.0) and z.variance[0] == 0.0 and z.n_paths == 50
    d = terminal_ensemble(benchmarks.drift_only(x0=0.5), 20, grid, seed=0)
    np.testing.assert_allclose(d.samples, 1.5, atol=1e-12)
    ou = terminal_ensemble(benchmarks.ou_slow(), 10_000, PathGrid(0, 1, 1e-3), seed=3)
    assert ou.variance[0] == pytest.approx((1 - math.exp(-2)) / 2, abs=0.02)
    assert np.all(np.diff(ou.samples[:, 0]) >= 0)
    with pytest.raises(ValueError):
        terminal_ensemble(benchmarks.zero(), 1, grid, seed=0)


def test_identical_law_within_floor():
    rep = weak_convergence_study(benchmarks.identical_law(), [0.1, 0.05, 0.02], n_paths=4000, seed=1, dt=0.01)
    assert np.all(rep.w1 >= 0) and np.all(rep.ks >= 0)
    assert np.all(rep.w1 <= 2 * rep.noise_floor_w1)
    assert rep.class_gap is None


def test_single_eps_has_no_slope():
    rep = weak_convergence_study(benchmarks.identical_law(), [0.1], n_paths=500, seed=1, dt=0.01)
    assert len(rep.rows()) == 1
    assert rep.slope is None
    assert rep.rows()[0]["slope"] is None


def test_eps_order_and_step_checks():
    m = benchmarks.identical_law()
    with pytest.raises(ValueError, match="descending"):
        weak_convergence_study(m, [0.01, 0.1], n_paths=10)
    with pytest.raises(StepTooCoarse):
        weak_convergence_study(m, [0.1, 0.001], n_paths=10, dt=0.01)


def test_noise_floor_stable_under_reseeding():
    m = benchmarks.identical_law()
    floors = [weak_convergence_study(m, [], n_paths=10_000, seed=s, dt=0.01).noise_floor_w1[0] for s in (0, 1)]
    assert floors[1] == pytest.approx(floors[0], rel=0.20)


def test_ks_calibration_on_identical_laws():
    m = benchmarks.identical_law()
    avg = build_averaged_model(m)
    grid = PathGrid(0, 1, 0.01)
    rejections = 0
    for k in range(100):
        a = coupled_ensemble(m, 0.1, grid, 200, seed=2 * k).x[-1, :, 0]
        b = averaged_ensemble(avg, grid, 200, seed=2 * k + 1).x[-1, :, 0]
        rejections += ks_test(a, b)[1] < 0.01
    assert rejections <= 3


def test_two_class_reports_occupation():
    rep = weak_convergence_study(benchmarks.linear_two_class(), [0.1, 0.05], n_paths=300, seed=2, dt=0.01)
    assert rep.class_gap.shape == (2,)
    assert rep.coupled_fractions.shape == (2, 2)
    np.testing.assert_allclose(rep.coupled_fractions.sum(axis=1), 1.0)
    assert "class_gap" in rep.rows()[0]


def test_switching_ergodicity_trivial_cases():
    single = switching_ergodicity_study(TwoScaleGenerator(np.zeros((1, 1))), [0.1, 0.01], n_paths=50)
    assert np.all(single.values == 0)
    zero = switching_ergodicity_study(benchmarks.symmetric_chain(), [0.1, 0.01], beta=0.0, n_paths=50)
    assert np.all(zero.values == 0)


def test_switching_ergodicity_scales_with_eps():
    rep = switching_ergodicity_study(benchmarks.symmetric_chain(), [0.1, 0.01], n_paths=1000, seed=3)
    assert 6 <= rep.values[0] / rep.values[1] <= 14
    assert rep.decreasing


def test_modulus_examples():
    zero = modulus_check(benchmarks.zero(), 1.0, n_paths=10)
    assert np.all(zero.moments == 0) and zero.slope is None
    drift = modulus_check(benchmarks.drift_only(), 1.0, n_paths=10)
    np.testing.assert_allclose(drift.moments, drift.taus**2, rtol=1e-9)
    assert drift.slope == pytest.approx(2.0, abs=1e-6)
    diff = modulus_check(benchmarks.diffusion_only(), 1.0, n_paths=10_000, seed=1)
    np.testing.assert_allclose(diff.moments, diff.taus, rtol=0.10)
    assert diff.slope == pytest.approx(1.0, abs=0.1)


def test_bump_gradient_matches_finite_difference():
    b = BumpFunction((0.5,), radius=2.0)
    x = np.array([[-1.0], [0.2], [1.9], [3.0]])
    h = 1e-6
    fd = (b(x + h) - b(x - h)) / (2 * h)
    np.testing.assert_allclose(b.gradient(x)[:, 0], fd, atol=1e-8)
    assert b(np.array([[3.0]]))[0] == 0.0


def test_perturbation_zero_test_function():
    rep = perturbation_magnitude(benchmarks.linear(), 0.1, ZeroFunction(), n_outer=10, n_inner=10)
    assert rep.estimate == 0.0


def test_perturbation_vanishes_without_fast_dependence():
    rep = perturbation_magnitude(benchmarks.identical_law(), 0.1, n_outer=20, n_inner=20, seed=1)
    assert rep.estimate <= 1e-12


def test_perturbation_budget():
    with pytest.raises(BudgetExceeded):
        perturbation_magnitude(benchmarks.linear(), 0.1, n_outer=1000, n_inner=1001, budget=1_000_000)
