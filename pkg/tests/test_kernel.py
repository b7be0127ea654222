import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuralkem.kernel import (FeatureSet, KernelError, apply_K, apply_Kt, build_kernel, combined_weight,
                              extract_features, identity_kernel, kernel_from_composites, knn_search)
from neuralkem.tomo import SparseMatrix


def raw_features(f):
    f = np.asarray(f, dtype=float).reshape(len(f), -1)
    return FeatureSet(f, np.zeros(f.shape[1]), np.ones(f.shape[1]), tuple(range(f.shape[1])))


def brute_knn(f, k, allowed=None):
    """Loop oracle: sort (distance, index) pairs over the allowed candidates."""
    J = f.shape[0]
    out = []
    for j in range(J):
        cands = [l for l in range(J) if l != j and (allowed is None or allowed(j, l))]
        d = [(float(((f[j] - f[l]) ** 2).sum()), l) for l in cands]
        out.append([l for _, l in sorted(d)[:k]])
    return np.array(out, dtype=np.int64).reshape(J, k)


def test_standardise_two_values():
    fs = extract_features([[0.0, 2.0]])
    np.testing.assert_array_equal(fs.features[:, 0], [-1.0, 1.0])
    assert fs.mean.tolist() == [1.0] and fs.std.tolist() == [1.0]


def test_constant_channels():
    with pytest.warns(UserWarning), pytest.raises(KernelError):
        extract_features([[3.0, 3.0, 3.0]])
    with pytest.warns(UserWarning):
        fs = extract_features([[3.0, 3.0, 3.0], [1.0, 2.0, 3.0]])
    assert fs.channels == (1,) and fs.features.shape == (3, 1)


def test_three_channels_give_length_three_features():
    z = np.random.default_rng(0).normal(size=(3, 50))
    fs = extract_features(z)
    assert fs.features.shape == (50, 3)
    np.testing.assert_allclose(fs.features.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(fs.features.std(axis=0), 1, atol=1e-12)


def test_knn_hand_examples():
    assert knn_search(raw_features([0.0, 0.1, 5.0]), 1)[0].tolist() == [1]
    same = knn_search(raw_features(np.zeros(5)), 2)
    assert same.tolist() == [[1, 2], [0, 2], [0, 1], [0, 1], [0, 1]]
    full = knn_search(raw_features(np.arange(4.0)), 3)
    for j in range(4):
        assert sorted(full[j]) == [l for l in range(4) if l != j]
    with pytest.raises(KernelError):
        knn_search(raw_features(np.arange(4.0)), 4)
    assert knn_search(raw_features(np.arange(4.0)), 0).shape == (4, 0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.integers(1, 6), levels=st.integers(2, 6))
def test_knn_matches_brute_force(seed, k, levels):
    # few distinct levels force many exact ties
    rng = np.random.default_rng(seed)
    f = rng.integers(0, levels, size=(30, 2)).astype(float)
    np.testing.assert_array_equal(knn_search(raw_features(f), k, chunk=7), brute_knn(f, k))


@pytest.mark.parametrize("shape,window,k", [((9, 11), (3, 5), 4), ((8, 8), (5, 5), 8), ((2, 3, 4), (3, 3, 3), 5)])
def test_windowed_knn_matches_brute_force(shape, window, k):
    rng = np.random.default_rng(1)
    J = int(np.prod(shape))
    f = rng.integers(0, 4, size=(J, 2)).astype(float)
    coords = np.stack(np.unravel_index(np.arange(J), shape), axis=-1)
    half = np.array(window) // 2

    def allowed(j, l):
        return np.all(np.abs(coords[j] - coords[l]) <= half)

    np.testing.assert_array_equal(knn_search(raw_features(f), k, window, shape, chunk=5), brute_knn(f, k, allowed))


def test_full_window_equals_unwindowed_on_32x32():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(1024, 2)).round(1)
    fs = raw_features(f)
    np.testing.assert_array_equal(knn_search(fs, 8, (63, 63), (32, 32)), knn_search(fs, 8))


def test_window_too_small_raises():
    fs = raw_features(np.arange(16.0))
    with pytest.raises(KernelError):
        knn_search(fs, 9, (3, 3), (4, 4))
    with pytest.raises(KernelError):
        knn_search(fs, 2, (2, 3), (4, 4))


def test_kernel_values():
    fs = raw_features([0.0, 1.0, 1.0, 3.0])
    nb = np.array([[1], [2], [1], [2]])
    K = build_kernel(fs, nb, sigma=1.0).K.to_dense()
    np.testing.assert_allclose(np.diag(K), 1.0)
    assert K[0, 1] == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert K[1, 2] == 1.0
    assert K[3, 2] == pytest.approx(np.exp(-2.0))
    assert K[0, 2] == 0.0
    assert np.exp(-0.5) == pytest.approx(0.606531, abs=1e-6)


def test_kernel_structure_on_random_features():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(2, 200))
    model = kernel_from_composites(z, k=12, sigma=0.7)
    K = model.K
    assert K.nnz <= 200 * 13
    dense = K.to_dense()
    np.testing.assert_array_equal(np.diag(dense), 1.0)
    assert np.all(dense[dense > 0] <= 1.0)
    assert np.all(np.diff(K.row_offsets) == 13)
    # within each row, larger feature distance means smaller value
    f = extract_features(z).features
    for j in range(0, 200, 17):
        cols = K.col_indices[K.row_offsets[j]:K.row_offsets[j + 1]]
        d = ((f[cols] - f[j]) ** 2).sum(axis=1)
        v = dense[j, cols]
        order = np.argsort(d)
        assert np.all(np.diff(v[order]) <= 0)


def test_row_normalised_rows_sum_to_one():
    z = np.random.default_rng(6).normal(size=(1, 100))
    K = kernel_from_composites(z, k=5, row_normalize=True).K
    np.testing.assert_allclose(K.row_sums(), 1.0, atol=1e-12)


def test_apply_and_weight_against_dense():
    fs = raw_features([0.0, 0.5, 2.0])
    model = build_kernel(fs, np.array([[1], [0], [1]]), sigma=1.0)
    Kd = model.K.to_dense()
    expected = np.array([[1, np.exp(-0.125), 0], [np.exp(-0.125), 1, 0], [0, np.exp(-1.125), 1]])
    np.testing.assert_allclose(Kd, expected, rtol=1e-15)
    v = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(apply_K(model, v), expected @ v, rtol=1e-15)
    np.testing.assert_allclose(apply_Kt(model, v), expected.T @ v, rtol=1e-15)
    s = np.array([0.5, 1.0, 2.0])
    np.testing.assert_allclose(combined_weight(model, s), expected.T @ s, rtol=1e-15)
    np.testing.assert_array_equal(combined_weight(model, np.zeros(3)), 0)
    with pytest.raises(ValueError):
        apply_K(model, np.ones(4))


def test_identity_path():
    model = identity_kernel(5)
    v = np.arange(5.0)
    np.testing.assert_array_equal(apply_K(model, v), v)
    np.testing.assert_array_equal(combined_weight(model, v), v)
    assert model.K == SparseMatrix.identity(5)


def test_kernel_adjoint():
    z = np.random.default_rng(7).normal(size=(2, 64))
    model = kernel_from_composites(z, k=6)
    rng = np.random.default_rng(8)
    for _ in range(20):
        u, v = rng.normal(size=64), rng.normal(size=64)
        assert abs(apply_K(model, v) @ u - v @ apply_Kt(model, u)) < 1e-12 * (1 + np.abs(u).sum() * np.abs(v).sum())
