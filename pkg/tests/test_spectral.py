import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from sml.dataset import ImageStack, SynthParams, synth_stack
from sml.spectral import (
    DegenerateSpectrumWarning, DegenerateVectorError, EigenConvergenceError, SpikeBasis, curve_auc,
    gram_matrix, mean_image, normalize_sign, quantile_index, quantile_indices, quantile_position,
    select_quantile_images, spike_basis, top_eigenpairs,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_gram_hand_example():
    S = gram_matrix(np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]]))
    np.testing.assert_array_equal(S, [[2.0, 0.0], [0.0, 2.0]])


@given(m=st.integers(2, 8), p=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_gram_exactly_symmetric_and_psd(m, p, seed):
    X = np.random.default_rng(seed).uniform(size=(m, p, p))
    S = gram_matrix(X)
    assert np.array_equal(S, S.T)
    assert np.linalg.eigvalsh(S).min() >= -1e-9 * np.abs(S).max()


def test_gram_duplicate_rows():
    X = np.random.default_rng(1).uniform(size=(5, 3, 3))
    X[3] = X[1]
    S = gram_matrix(X)
    np.testing.assert_array_equal(S[1], S[3])


def test_top_eigenpairs_two_by_two():
    w, V = top_eigenpairs(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(w, [3.0, 1.0], atol=1e-12)
    v1 = V[:, 0] * np.sign(V[0, 0])
    np.testing.assert_allclose(v1, np.array([1.0, 1.0]) / math.sqrt(2), atol=1e-10)


def test_top_eigenpairs_identity_residual_contract():
    S = np.eye(6)
    w, V = top_eigenpairs(S)
    np.testing.assert_allclose(w, [1.0, 1.0])
    np.testing.assert_allclose(V.T @ V, np.eye(2), atol=1e-12)
    for j in range(2):
        assert np.linalg.norm(S @ V[:, j] - w[j] * V[:, j]) <= 1e-8 * np.linalg.norm(S)


def test_gram_trick_matches_scatter_oracle():
    rng = np.random.default_rng(3)
    X = rng.uniform(size=(10, 8, 8))
    w, _ = top_eigenpairs(gram_matrix(X))
    V = X.transpose(0, 2, 1).reshape(10, -1)
    oracle = np.sort(np.linalg.eigvalsh(V.T @ V))[::-1][:2]
    np.testing.assert_allclose(w, oracle, rtol=1e-8)


def test_eigensolver_gives_up_with_residual():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((40, 40)))
    lam = np.r_[1.0, 1.0 - 1e-9, 1.0 - 2e-9, np.linspace(0.99, 0.1, 37)]
    S = (Q * lam) @ Q.T
    with pytest.raises(EigenConvergenceError) as info:
        top_eigenpairs(S, extra=0, max_iter=2)
    assert info.value.residual > 0


@given(arrays(np.float64, st.integers(2, 12), elements=finite))
def test_eigvector_residuals_on_random_psd(v):
    m = v.size
    A = np.outer(v, v) + np.diag(np.arange(1, m + 1, dtype=float))
    w, V = top_eigenpairs(A)
    norm = np.linalg.norm(A)
    for j in range(2):
        assert np.linalg.norm(A @ V[:, j] - w[j] * V[:, j]) <= 1e-8 * norm
    assert w[0] >= w[1]


def test_normalize_sign_worked_example():
    v = np.array([0.9, 0.1, 0.2])
    # hand trapezoid on x=(0,.5,1), y=(1,0,.125)
    assert curve_auc(v) == 0.28125
    out, sign = normalize_sign(v)
    assert sign == -1
    np.testing.assert_array_equal(out, -v)


def test_increasing_ramp_gets_minus():
    v = np.arange(1.0, 8.0)
    assert curve_auc(v) == 0.5
    assert normalize_sign(v)[1] == -1


def test_constant_vector_rejected():
    with pytest.raises(DegenerateVectorError):
        normalize_sign(np.full(4, 0.3))


@given(arrays(np.float64, st.integers(2, 30), elements=finite))
def test_sign_invariance(v):
    assume(v.max() > v.min())
    a, _ = normalize_sign(v)
    b, _ = normalize_sign(-v)
    assert np.array_equal(a, b)


@given(arrays(np.float64, st.integers(1, 15), elements=st.integers(-5, 5).map(float)), st.booleans())
def test_sign_invariance_on_symmetric_vectors(half, odd):
    # palindromes and anti-palindromes sit exactly on the 1/2 boundary or near it
    v = np.r_[half, [0.0] if odd else [], half[::-1]]
    for w in (v, np.r_[half, [0.0] if odd else [], -half[::-1]]):
        assume(w.max() > w.min())
        assert np.array_equal(normalize_sign(w)[0], normalize_sign(-w)[0])


@given(arrays(np.float64, st.integers(2, 30), elements=finite))
def test_oriented_auc_not_below_half(v):
    assume(v.max() > v.min())
    out, _ = normalize_sign(v)
    assert curve_auc(out) >= 0.5


def _stack(seed, m=15, p=5):
    return ImageStack("s", np.random.default_rng(seed).uniform(size=(m, p, p)))


@pytest.mark.parametrize("seed", range(5))
def test_spike_basis_invariants(seed):
    b = spike_basis(_stack(seed))
    np.testing.assert_allclose(np.linalg.norm(b.eigenvectors, axis=1), 1.0, atol=1e-9)
    assert b.eigenvalues[0] >= b.eigenvalues[1] >= -1e-9
    assert abs(b.eigenvectors[0] @ b.eigenvectors[1]) <= 1e-8
    for ell in (1, 2):
        assert curve_auc(b.eigenvectors[ell - 1]) >= 0.5
        assert np.all(np.diff(b.sorted_vector(ell)) >= 0)


def test_noiseless_two_cluster_gap():
    params = SynthParams(n_normal=1, n_abnormal=0, m_range=(30, 30), p=12, noise_sd=1e-12, mean_shift=0.4)
    b = spike_basis(synth_stack(params, 0, 0, abnormal=False))
    ratios = []
    for ell in (1, 2):
        d = np.diff(b.sorted_vector(ell))
        gap = d.max()
        within = np.delete(d, d.argmax()).max()
        ratios.append(gap / max(within, 1e-300))
    assert max(ratios) > 10


def test_identical_slices_fall_back_to_first():
    s = np.random.default_rng(0).uniform(size=(3, 3))
    stack = ImageStack("same", np.stack([s] * 6))
    b = spike_basis(stack)
    assert b.rank_deficient
    with pytest.warns(DegenerateSpectrumWarning):
        i2 = quantile_index(b, 2, 0.3)
    assert i2 == quantile_index(b, 1, 0.3)


def test_permutation_equivariance():
    stack = _stack(7, m=12)
    perm = np.random.default_rng(1).permutation(12)
    b = spike_basis(stack)
    bp = spike_basis(ImageStack("s", stack.slices[perm]))
    np.testing.assert_allclose(bp.eigenvalues, b.eigenvalues, rtol=1e-10)
    for ell in range(2):
        v, vp = b.eigenvectors[ell], bp.eigenvectors[ell]
        # entries follow the slices; orientation depends on slice order so compare up to sign
        s = np.sign(vp @ v[perm])
        np.testing.assert_allclose(s * vp, v[perm], atol=1e-8)
        np.testing.assert_allclose(np.sort(s * vp), np.sort(v), atol=1e-8)


@pytest.mark.parametrize("seed", range(4))
def test_scaling_invariance(seed):
    X = np.random.default_rng(seed).uniform(size=(10, 4, 4))
    b, bc = spike_basis(X), spike_basis(0.37 * X)
    np.testing.assert_allclose(bc.eigenvalues, 0.37**2 * b.eigenvalues, rtol=1e-9)
    np.testing.assert_allclose(bc.eigenvectors, b.eigenvectors, atol=1e-8)
    np.testing.assert_array_equal(bc.sort_orders, b.sort_orders)


def _basis_from(values):
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    return SpikeBasis(np.array([2.0, 1.0]), np.vstack([v, v]), np.array([1, 1]), np.vstack([order, order]), False)


def test_quantile_examples():
    vals = [0.7, 0.1, 0.9, 0.4, 0.2]  # sorted: .1 .2 .4 .7 .9
    b = _basis_from(vals)
    assert quantile_index(b, 1, 0.0) == 1
    assert quantile_index(b, 1, 1.0) == 2
    assert quantile_position(5, 0.5) == 2  # 0-based, i.e. position 3
    assert quantile_index(b, 1, 0.5) == 3


def test_quantile_ties_smallest_index():
    b = _basis_from([0.5, 0.2, 0.2, 0.9])
    assert quantile_index(b, 1, 0.0) == 1


def test_m2_rounding():
    stack = ImageStack("m2", np.stack([np.zeros((2, 2)), np.ones((2, 2))]))
    b = _basis_from([0.3, 0.8])
    np.testing.assert_array_equal(quantile_indices(b, 1, [0, 0.5, 1]), [0, 1, 1])
    imgs = select_quantile_images(stack, b, 1, [0, 0.5, 1])
    np.testing.assert_array_equal(imgs[:, 0, 0], [0.0, 1.0, 1.0])


def test_select_quantile_images_counts():
    stack = _stack(2, m=30)
    b = spike_basis(stack)
    imgs = select_quantile_images(stack, b, 2, [0, 0.005, 0.01, 0.015, 0.02])
    assert imgs.shape == (5, 5, 5)
    single = select_quantile_images(stack, b, 1, [0])
    np.testing.assert_array_equal(single[0], stack.slices[b.sort_orders[0][0]])
    with pytest.raises(ValueError):
        select_quantile_images(stack, b, 1, [])


@given(seed=st.integers(0, 10**6), m=st.integers(2, 40))
def test_quantile_monotone(seed, m):
    b = _basis_from(np.random.default_rng(seed).standard_normal(m))
    rank = np.empty(m, dtype=int)
    rank[b.sort_orders[0]] = np.arange(m)
    v = b.eigenvectors[0]
    pos = [np.searchsorted(np.sort(v), v[quantile_index(b, 1, a)]) for a in np.linspace(0, 1, 101)]
    assert all(x <= y for x, y in zip(pos, pos[1:]))


def test_mean_image_examples():
    s = np.random.default_rng(0).uniform(size=(3, 3))
    np.testing.assert_allclose(mean_image([s, s, s]), s, rtol=0, atol=1e-15)
    np.testing.assert_array_equal(mean_image([[[0.0]], [[1.0]]]), [[0.5]])
    with pytest.raises(ValueError):
        mean_image(np.empty((0, 2, 2)))
