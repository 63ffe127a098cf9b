from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import sqrtm

from slowfast import benchmarks
from slowfast.averaging import (
    AveragedModel,
    AveragingSettings,
    average_coefficient,
    build_averaged_model,
    estimate_invariant_measure,
    ergodicity_decay,
    psd_root,
)
from slowfast.errors import AllBelowNoiseFloor, GridExtrapolation, NotPSD
from slowfast.integrator import NoiseBundle, PathGrid, simulate_averaged
from slowfast.model import SlowFastModel
from slowfast.switching import TwoScaleGenerator

ONE = TwoScaleGenerator(np.zeros((1, 1)))


# ---------------------------------------------------------------------------
# psd_root


def test_psd_root_examples():
    np.testing.assert_array_equal(psd_root(np.eye(2)), np.eye(2))
    np.testing.assert_allclose(psd_root(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)
    s3 = math.sqrt(3)
    expected = [[(s3 + 1) / 2, (s3 - 1) / 2], [(s3 - 1) / 2, (s3 + 1) / 2]]
    np.testing.assert_allclose(psd_root([[2.0, 1.0], [1.0, 2.0]]), expected, atol=1e-14)


def test_psd_root_rejects():
    with pytest.raises(NotPSD):
        psd_root([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NotPSD):
        psd_root([[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(NotPSD):
        psd_root([[-0.01]])
    # tiny negative eigenvalues are clamped
    assert psd_root([[-1e-9]])[0, 0] == 0.0


@st.composite
def psd_matrices(draw):
    n = draw(st.integers(1, 4))
    b = np.array(draw(st.lists(st.floats(-3, 3), min_size=n * n, max_size=n * n))).reshape(n, n)
    return b @ b.T


@given(psd_matrices())
@settings(max_examples=100, deadline=None)
def test_psd_root_squares_back(a):
    root = psd_root(a)
    assert np.max(np.abs(root - root.T)) <= 1e-10
    assert np.linalg.norm(root @ root - a) <= 1e-8 * max(1.0, np.linalg.norm(a))
    assert np.min(np.linalg.eigvalsh(root)) >= -1e-7
    if np.min(np.linalg.eigvalsh(a)) > 1e-3:
        np.testing.assert_allclose(root, np.real(sqrtm(a)), atol=1e-8)


# ---------------------------------------------------------------------------
# invariant measure


def test_invariant_point_mass():
    m = SlowFastModel(ONE, [0.0], [1.0], fast_drift=lambda x, xi: -xi)
    est = estimate_invariant_measure(m, [0.0], burn_in=20, horizon=25, n_paths=10)
    assert np.max(np.abs(est.cloud)) < 1e-6


def test_invariant_ou():
    est = estimate_invariant_measure(benchmarks.ou_fast(), [2.0], burn_in=5, horizon=20, n_paths=2000, seed=3)
    assert est.mean[0] == pytest.approx(2.0, abs=0.03)
    assert est.variance[0] == pytest.approx(0.5, abs=0.03)
    assert est.cloud.shape == (20_000, 1)
    # moments are those of the cloud
    assert abs(est.mean[0] - est.cloud.mean()) <= 1e-12
    assert abs(est.cov[0, 0] - est.variance[0]) <= 1e-12


def test_invariant_ou_with_jumps():
    z, lam = 0.5, 1.0
    est = estimate_invariant_measure(benchmarks.ou_fast(jump_size=z, jump_rate=lam), [2.0],
                                     burn_in=5, horizon=20, n_paths=2000, seed=4)
    assert est.mean[0] == pytest.approx(2.0, abs=0.05)
    assert est.variance[0] == pytest.approx(0.5 + lam * z * z / 2, rel=0.10)


def test_default_burn_in_from_rate():
    est = estimate_invariant_measure(benchmarks.ou_fast(), [2.0], n_paths=4, samples_per_path=3)
    assert est.burn_in == pytest.approx(10.0)
    assert est.horizon == pytest.approx(50.0)


def test_standard_error_scales_with_paths():
    m = benchmarks.ou_fast()
    n, groups = 25, 1024
    est = estimate_invariant_measure(m, [2.0], burn_in=5, horizon=5, n_paths=n * groups, seed=8,
                                     samples_per_path=1)
    v = est.cloud[:, 0]
    small = v.reshape(groups, n).mean(axis=1).std(ddof=1)
    large = v.reshape(groups // 2, 2 * n).mean(axis=1).std(ddof=1)
    assert small / large == pytest.approx(math.sqrt(2), rel=0.25)


# ---------------------------------------------------------------------------
# ergodic decay


def test_ergodicity_constant_observable():
    with pytest.warns(AllBelowNoiseFloor):
        rep = ergodicity_decay(benchmarks.ou_fast(), [2.0], observable=lambda xi: np.ones(xi.shape[0]),
                               eta=[5.0], n_paths=500)
    assert np.all(rep.deviations == 0)
    assert not rep.used.any()


def test_ergodicity_from_stationary_mean():
    with pytest.warns(AllBelowNoiseFloor):
        rep = ergodicity_decay(benchmarks.ou_fast(), [2.0], eta=[2.0], n_paths=4000, seed=2, reference=2.0)
    assert np.all(rep.deviations <= rep.noise_floor)


def test_ergodicity_rate_on_small_ensemble():
    rep = ergodicity_decay(benchmarks.ou_fast(), [2.0], eta=[5.0], n_paths=20_000, seed=1,
                           times=[0.5, 1.0, 1.5, 2.0, 2.5, 3.0])
    assert np.all(rep.deviations >= 0)
    assert rep.rate == pytest.approx(1.0, abs=0.2)
    assert rep.theoretical_rate == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# averaged coefficients


def test_average_drift_linear():
    m = benchmarks.linear()
    for x in (0.5, 1.0, -2.0):
        assert average_coefficient(m, "f", [x])[0] == pytest.approx(4 * x, rel=0.02)


def test_average_drift_monte_carlo():
    s = AveragingSettings(estimator="monte-carlo", n_paths=2000, burn_in=5, horizon=20, seed=1)
    assert average_coefficient(benchmarks.linear(), "f", [1.0], settings=s)[0] == pytest.approx(4.0, rel=0.02)


def test_average_diffusion_weighted():
    assert average_coefficient(benchmarks.linear(), "a", [0.3])[0, 0] == pytest.approx(2.0, rel=0.02)


def test_average_of_state_free_coefficient_is_exact():
    m = SlowFastModel(TwoScaleGenerator(np.array(benchmarks.SINGLE_CLASS_FAST)), [0.0], [0.0],
                      drift=lambda x, r, xi: np.sin(x), diffusion=lambda x, r, xi: np.cos(x)[:, :, None],
                      fast_drift=lambda x, xi: -xi, fast_diffusion=lambda x, xi: np.ones((xi.shape[0], 1, 1)),
                      frozen_law=lambda x: (np.zeros_like(x), np.full((x.shape[0], 1, 1), 0.5)))
    s = AveragingSettings(estimator="monte-carlo", n_paths=50, burn_in=1, horizon=2)
    for est in (AveragingSettings(), s):
        assert average_coefficient(m, "f", [0.7], settings=est)[0] == pytest.approx(math.sin(0.7), abs=1e-12)
        assert average_coefficient(m, "a", [0.7], settings=est)[0, 0] == pytest.approx(math.cos(0.7) ** 2,
                                                                                        abs=1e-12)


def test_average_jump_sizes():
    m = benchmarks.linear()
    g = average_coefficient(m, "g", [1.0])
    np.testing.assert_allclose(g[:, 0], [0.5, -0.5], atol=1e-12)
    assert average_coefficient(m, "G", [1.0])[0, 0] == pytest.approx(0.25, abs=1e-12)


@st.composite
def generators(draw):
    n = draw(st.integers(1, 4))
    rates = draw(st.lists(st.floats(0.1, 5), min_size=n * n, max_size=n * n))
    q = np.array(rates).reshape(n, n)
    np.fill_diagonal(q, 0.0)
    np.fill_diagonal(q, -q.sum(axis=1))
    return q


@given(generators(), st.floats(0.1, 10), st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(-5, 5))
@settings(max_examples=40, deadline=None)
def test_average_respects_bound(q, M, c, x):
    c = np.array(c)
    kappa, vsig, law = benchmarks._ou_fast()
    m = SlowFastModel(TwoScaleGenerator(q), [0.0], [0.0],
                      drift=lambda x, r, xi: M * np.sin(c[r][:, None] * xi + x),
                      fast_drift=kappa, fast_diffusion=vsig, frozen_law=law)
    assert abs(average_coefficient(m, "f", [x])[0]) <= M * (1 + 1e-12)


# ---------------------------------------------------------------------------
# averaged model


def test_linear_averaged_model():
    avg = build_averaged_model(benchmarks.linear())
    assert avg.n_classes == 1
    np.testing.assert_allclose(avg.drift([[1.0], [2.0]])[:, 0], [4.0, 8.0], rtol=1e-12)
    np.testing.assert_allclose(avg.sigma([[1.0]])[0, 0, 0], math.sqrt(2), rtol=1e-12)
    s = avg.sigma([[0.0], [1.5]])
    np.testing.assert_allclose(s @ s, avg.diffusion_matrix([[0.0], [1.5]]), atol=1e-8)
    g = avg.jump_sizes([[1.0]])[0, :, 0]
    assert np.dot(avg.measure.weights, g**2) == pytest.approx(avg.jump_integral([[1.0]])[0, 0, 0], abs=1e-12)
    np.testing.assert_array_equal(avg.generator(), [[0.0]])


def test_state_free_coefficients_reproduced():
    m = SlowFastModel(TwoScaleGenerator(np.array(benchmarks.SINGLE_CLASS_FAST)), [0.0], [0.0],
                      drift=lambda x, r, xi: -x, diffusion=lambda x, r, xi: np.ones((x.shape[0], 1, 1)) * 0.3,
                      fast_drift=lambda x, xi: -xi,
                      frozen_law=lambda x: (np.zeros_like(x), np.full((x.shape[0], 1, 1), 0.5)))
    avg = build_averaged_model(m)
    xs = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(avg.drift(xs), -xs, atol=1e-14)
    np.testing.assert_allclose(avg.sigma(xs)[:, 0, 0], 0.3, atol=1e-14)


def test_two_class_carries_aggregated_generator():
    avg = build_averaged_model(benchmarks.linear_two_class())
    np.testing.assert_allclose(avg.generator(), [[-4 / 3, 4 / 3], [2.0, -2.0]], atol=1e-12)
    # class 1 is the single state 2 with c = -2
    assert avg.drift([[1.0]], gamma=1)[0, 0] == pytest.approx(-2.0, abs=1e-12)
    assert avg.drift([[1.0]], gamma=0)[0, 0] == pytest.approx(4.0, abs=1e-12)


def test_grid_matches_closed_form():
    m = benchmarks.linear()
    closed = build_averaged_model(m)
    grid = build_averaged_model(m, mode="grid", box=(-3.0, 3.0), resolution=41)
    xs = np.array([[-2.71], [-0.33], [0.5], [1.234], [2.9]])
    np.testing.assert_allclose(grid.drift(xs), closed.drift(xs), rtol=1e-3)
    np.testing.assert_allclose(grid.sigma(xs), closed.sigma(xs), rtol=1e-3)
    np.testing.assert_allclose(grid.jump_sizes(xs), closed.jump_sizes(xs), rtol=1e-3)


def test_grid_refuses_extrapolation():
    avg = build_averaged_model(benchmarks.linear(), mode="grid", box=(-1.0, 2.0), resolution=5)
    with pytest.raises(GridExtrapolation):
        avg.drift([[2.5]])
    with pytest.raises(GridExtrapolation):
        simulate_averaged(avg, PathGrid(0, 1, 0.01), NoiseBundle(0))


def test_grid_model_round_trip(tmp_path):
    avg = build_averaged_model(benchmarks.linear_two_class(), mode="grid", box=(-3.0, 3.0), resolution=11)
    files = avg.save(tmp_path)
    assert [f.name for f in files] == ["averaged_model.json", "averaged_model.csv"]
    back = AveragedModel.load(tmp_path)
    xs = np.array([[-1.1], [0.2], [2.4]])
    for gamma in (0, 1):
        assert back.drift(xs, gamma).tobytes() == avg.drift(xs, gamma).tobytes()
        assert back.sigma(xs, gamma).tobytes() == avg.sigma(xs, gamma).tobytes()
    np.testing.assert_array_equal(back.generator(), avg.generator())
    assert back.provenance == avg.provenance
    header = files[1].read_text().splitlines()[0]
    assert header == "x_1,class,f_bar_1,a_bar_11,jump_integral_1"


def test_monte_carlo_build_is_deterministic():
    s = AveragingSettings(estimator="monte-carlo", n_paths=50, burn_in=2, horizon=4, seed=6)
    a = build_averaged_model(benchmarks.linear(), mode="grid", box=(0.0, 1.0), resolution=3, settings=s)
    b = build_averaged_model(benchmarks.linear(), mode="grid", box=(0.0, 1.0), resolution=3, settings=s)
    for k in a.tables:
        assert a.tables[k].tobytes() == b.tables[k].tobytes()
    assert a.provenance["seed"] == 6
