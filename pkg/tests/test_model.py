from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slowfast.model import (
    JumpMeasure,
    SamplingSpec,
    SlowFastModel,
    diffusion_matrix,
    jump_compensator_drift,
    jump_matrix,
    validate_dissipativity,
    validate_lipschitz,
)
from slowfast.switching import TwoScaleGenerator

ONE = TwoScaleGenerator(np.zeros((1, 1)))
TWO = TwoScaleGenerator(np.array([[-1.0, 1.0], [1.0, -1.0]]))


def index_sum(s):
    """a_ij = sum_k s_ik s_kj written out as loops."""
    n = len(s)
    return [[sum(s[i][k] * s[k][j] for k in range(n)) for j in range(n)] for i in range(n)]


def constant_sigma(s):
    s = np.asarray(s, dtype=float)
    return SlowFastModel(ONE, x0=np.zeros(s.shape[0]), xi0=[0.0],
                         diffusion=lambda x, r, xi: np.broadcast_to(s, (x.shape[0],) + s.shape).copy())


@pytest.mark.parametrize("s", [np.eye(2), np.diag([2.0, 3.0]), [[1.0, 1.0], [0.0, 1.0]], [[0.5, -2.0], [1.5, 0.25]]])
def test_diffusion_matrix_matches_index_sum(s):
    a = diffusion_matrix(constant_sigma(s), np.zeros(2), 0, [0.0])[0]
    np.testing.assert_allclose(a, index_sum(np.asarray(s).tolist()), rtol=0, atol=1e-15)


def test_diffusion_matrix_known_values():
    assert diffusion_matrix(constant_sigma(np.eye(2)), np.zeros(2), 0, [0.0])[0].tolist() == [[1, 0], [0, 1]]
    assert diffusion_matrix(constant_sigma(np.diag([2.0, 3.0])), np.zeros(2), 0, [0.0])[0].tolist() == [[4, 0], [0, 9]]
    # sigma times sigma, not sigma sigma^T
    upper = diffusion_matrix(constant_sigma([[1.0, 1.0], [0.0, 1.0]]), np.zeros(2), 0, [0.0])[0]
    assert upper.tolist() == [[1.0, 2.0], [0.0, 1.0]]


@given(st.floats(-10, 10, allow_nan=False))
def test_scalar_diffusion_matrix_is_square(s):
    m = SlowFastModel(ONE, [0.0], [0.0], diffusion=lambda x, r, xi: np.full((x.shape[0], 1, 1), s))
    assert diffusion_matrix(m, [0.0], 0, [0.0])[0, 0, 0] == s * s


def test_jump_matrix_examples():
    atoms = JumpMeasure([[0.5]], [1.0])
    zero = SlowFastModel(ONE, [0.0], [0.0], jumps=atoms)
    assert jump_matrix(zero, [0.0], 0, [0.0], [0.5]).tolist() == [[[0.0]]]
    two = SlowFastModel(ONE, [0.0], [0.0], jump=lambda x, r, xi, z: np.full_like(x, 2.0), jumps=atoms)
    assert jump_matrix(two, [0.0], 0, [0.0], [0.5]).tolist() == [[[4.0]]]
    diag = SlowFastModel(ONE, [0.0, 0.0], [0.0], jump=lambda x, r, xi, z: np.tile([1.0, 3.0], (x.shape[0], 1)),
                         jumps=atoms)
    assert jump_matrix(diag, np.zeros(2), 0, [0.0], [0.5])[0].tolist() == [[1.0, 0.0], [0.0, 9.0]]


def test_compensator_examples():
    x, r, xi = np.zeros((1, 1)), np.zeros(1, dtype=int), np.zeros((1, 1))
    sym = JumpMeasure([[0.9], [-0.9]], [0.5, 0.5], radius=1.0)
    assert jump_compensator_drift(lambda x, r, xi, z: np.zeros_like(x), sym, x, r, xi)[0, 0] == 0.0
    assert jump_compensator_drift(lambda x, r, xi, z: z, sym, x, r, xi)[0, 0] == 0.0
    sq = JumpMeasure([[1.0], [0.5]], [2.0, 1.0], radius=2.0)
    assert jump_compensator_drift(lambda x, r, xi, z: z**2, sq, x, r, xi)[0, 0] == 2.25
    assert jump_compensator_drift(lambda x, r, xi, z: z, JumpMeasure.empty(), x, r, xi) == 0.0


@given(
    st.lists(st.floats(-0.9, 0.9), min_size=1, max_size=4),
    st.data(),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
@settings(max_examples=50, deadline=None)
def test_compensator_is_linear(atoms, data, alpha, beta):
    w = data.draw(st.lists(st.floats(0.1, 5), min_size=len(atoms), max_size=len(atoms)))
    w2 = data.draw(st.lists(st.floats(0.1, 5), min_size=len(atoms), max_size=len(atoms)))
    m1 = JumpMeasure(np.array(atoms)[:, None], w)
    m2 = JumpMeasure(np.array(atoms)[:, None], w2)
    m12 = JumpMeasure(np.array(atoms)[:, None], np.add(w, w2))
    x = np.array([[0.3], [-1.2]])
    r = np.zeros(2, dtype=int)
    xi = np.array([[1.0], [2.0]])

    def g(x, r, xi, z):
        return z * x + xi

    def h(x, r, xi, z):
        return np.sin(z) - x

    def combo(x, r, xi, z):
        return alpha * g(x, r, xi, z) + beta * h(x, r, xi, z)

    lhs = jump_compensator_drift(combo, m1, x, r, xi)
    rhs = alpha * jump_compensator_drift(g, m1, x, r, xi) + beta * jump_compensator_drift(h, m1, x, r, xi)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    both = jump_compensator_drift(g, m12, x, r, xi)
    np.testing.assert_allclose(both, jump_compensator_drift(g, m1, x, r, xi) + jump_compensator_drift(g, m2, x, r, xi),
                               atol=1e-12)


def test_jump_measure_validation():
    with pytest.raises(ValueError, match="radius"):
        JumpMeasure([[1.0]], [1.0], radius=1.0)
    with pytest.raises(ValueError):
        JumpMeasure([[0.1]], [0.0])
    with pytest.raises(ValueError):
        JumpMeasure([[0.1], [0.2]], [1.0])
    m = JumpMeasure([[0.1], [-0.2]], [1.0, 3.0])
    assert m.total_rate == 4.0 and m.probabilities.tolist() == [0.25, 0.75]
    assert JumpMeasure.empty().is_empty


def test_lipschitz_linear_drift_bound():
    c = np.array([1.0, 2.0])
    m = SlowFastModel(TWO, [0.0], [0.0], drift=lambda x, r, xi: c[r][:, None] * (x + xi))
    rep = validate_lipschitz(m, SamplingSpec(n_pairs=3000, seed=4))
    assert np.all(rep.ratios <= 2 * c**2 + 1e-9)
    assert np.all(rep.ratios > 0.5 * c**2)


def test_lipschitz_constant_coefficients():
    m = SlowFastModel(TWO, [0.0], [0.0], drift=lambda x, r, xi: np.ones_like(x),
                      diffusion=lambda x, r, xi: np.ones((x.shape[0], 1, 1)))
    assert validate_lipschitz(m).ratios.tolist() == [0.0, 0.0]


def test_lipschitz_flags_square_root():
    m = SlowFastModel(ONE, [0.0], [0.0], drift=lambda x, r, xi: np.sqrt(np.abs(x)))
    wide = validate_lipschitz(m, SamplingSpec(-1, 1, 0, 0, n_pairs=2000, pair_scale=1e-1), declared=10.0)
    tight = validate_lipschitz(m, SamplingSpec(-1, 1, 0, 0, n_pairs=2000, pair_scale=1e-4), declared=10.0)
    assert tight.ratios[0] > 10 * wide.ratios[0]
    assert tight.flagged.tolist() == [0]


def test_lipschitz_more_samples_never_lower():
    m = SlowFastModel(ONE, [0.0], [0.0], drift=lambda x, r, xi: np.sin(3 * x) * xi)
    few = validate_lipschitz(m, SamplingSpec(n_pairs=200, seed=1)).ratios
    many = validate_lipschitz(m, SamplingSpec(n_pairs=2000, seed=1)).ratios
    assert np.all(many >= few)
    again = validate_lipschitz(m, SamplingSpec(n_pairs=2000, seed=1)).ratios
    assert again.tobytes() == many.tobytes()


def test_dissipativity_contracting_fast_drift():
    m = SlowFastModel(ONE, [0.0], [0.0], fast_drift=lambda x, xi: -xi,
                      fast_diffusion=lambda x, xi: np.full((xi.shape[0], 1, 1), 0.7))
    c = validate_dissipativity(m, [0.0])
    assert c.alpha1 == pytest.approx(1.0, abs=1e-12)
    assert c.alpha2 == pytest.approx(1.0, abs=1e-12)
    assert c.alpha3 == 0.0
    assert c.rate == pytest.approx(1.0, abs=1e-12) and c.passed


def test_dissipativity_expanding_fast_drift_fails():
    m = SlowFastModel(ONE, [0.0], [0.0], fast_drift=lambda x, xi: xi)
    c = validate_dissipativity(m, [0.0])
    assert c.alpha1 <= -1 + 1e-12
    assert not c.passed


def test_dissipativity_jump_constant():
    m = SlowFastModel(ONE, [0.0], [0.0], fast_drift=lambda x, xi: -2 * xi,
                      fast_jump=lambda x, xi, z: z * xi,
                      jumps=JumpMeasure([[0.999], [-0.999]], [0.5 / 0.999**2, 0.5 / 0.999**2]))
    c = validate_dissipativity(m, [0.0])
    assert c.alpha3 == pytest.approx(1.0, abs=1e-12)


def test_regime_must_exist():
    with pytest.raises(ValueError):
        SlowFastModel(ONE, [0.0], [0.0], r0=1)
