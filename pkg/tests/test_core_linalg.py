import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from shortpanel.core_linalg import (
    commutation_matrix,
    congruence_rep,
    duplication_matrix,
    random_orthogonal,
    rotation_rep,
    sym_eig,
    unvech,
    vech,
    vech_outer,
)


def brute_vech(S):
    # enumerate pairs directly: diagonal first, then (i, j) with i < j row by row
    m = S.shape[0]
    out = [S[i, i] / np.sqrt(2) for i in range(m)]
    for i in range(m):
        for j in range(i + 1, m):
            out.append(S[i, j])
    return np.array(out)


def rand_sym(m, rng):
    A = rng.standard_normal((m, m))
    return A + A.T


def test_vech_identity_2x2():
    assert_allclose(vech(np.eye(2)), [1 / np.sqrt(2), 1 / np.sqrt(2), 0.0])


def test_vech_matches_brute_force_ordering():
    i, j = np.indices((3, 3)) + 1
    S = (i + j).astype(float)
    assert_allclose(vech(S), brute_vech(S))
    assert_allclose(vech(S), [2 / np.sqrt(2), 4 / np.sqrt(2), 6 / np.sqrt(2), 3, 4, 5])


def test_unvech_examples():
    assert_allclose(unvech([1 / np.sqrt(2), 1 / np.sqrt(2), 0.0], 2), np.eye(2))
    assert_array_equal(unvech(np.zeros(6), 3), np.zeros((3, 3)))


def test_unvech_length_mismatch():
    with pytest.raises(ValueError):
        unvech(np.zeros(5), 3)
    with pytest.raises(ValueError):
        unvech(np.zeros(5))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_vech_norm_is_half_frobenius(m, seed):
    S = rand_sym(m, np.random.default_rng(seed))
    v = vech(S)
    assert_allclose(v @ v, 0.5 * np.sum(S * S), rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_round_trips(m, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(m * (m + 1) // 2)
    assert_allclose(vech(unvech(v, m)), v, rtol=0, atol=1e-14)
    S = rand_sym(m, rng)
    assert_allclose(unvech(vech(S)), S, rtol=0, atol=1e-14)


def test_vech_outer_matches_vech_of_outer():
    rng = np.random.default_rng(0)
    E = rng.standard_normal((7, 4))
    expected = np.array([vech(np.outer(e, e)) for e in E])
    assert_allclose(vech_outer(E), expected, atol=1e-14)


@pytest.mark.parametrize("m", [1, 2, 3, 5, 8])
def test_duplication_identities(m):
    A = duplication_matrix(m)
    p = m * (m + 1) // 2
    K = commutation_matrix(m)
    assert_allclose(A.T @ A, 2 * np.eye(p), atol=1e-14)
    assert_allclose(K @ A, A, atol=1e-14)
    assert_allclose(A @ A.T, np.eye(m * m) + K, atol=1e-14)
    # entries are 0, 1 or sqrt2 only
    vals = np.unique(np.round(A, 12))
    assert set(vals).issubset({0.0, 1.0, np.round(np.sqrt(2), 12)})
    S = rand_sym(m, np.random.default_rng(m))
    assert_allclose(A @ vech(S), S.reshape(-1, order="F"), atol=1e-14)


def test_commutation_transposes():
    rng = np.random.default_rng(1)
    B = rng.standard_normal((3, 4))
    K = commutation_matrix(3, 4)
    assert_allclose(K @ B.reshape(-1, order="F"), B.T.reshape(-1, order="F"))


def kron_rotation(O):
    A = duplication_matrix(O.shape[0])
    return 0.5 * A.T @ np.kron(O.T, O.T) @ A


def test_rotation_rep_identity():
    assert_allclose(rotation_rep(np.eye(3)), np.eye(6), atol=1e-15)


def test_rotation_rep_group_laws():
    rng = np.random.default_rng(2)
    for _ in range(100):
        m = rng.integers(2, 7)
        O1 = random_orthogonal(m, rng)
        O2 = random_orthogonal(m, rng)
        R1 = rotation_rep(O1)
        S = rand_sym(m, rng)
        assert_allclose(R1, kron_rotation(O1), atol=1e-12)
        assert_allclose(vech(O1.T @ S @ O1), R1 @ vech(S), atol=1e-10)
        assert_allclose(R1 @ rotation_rep(O2), rotation_rep(O2 @ O1), atol=1e-10)
        assert_allclose(R1 @ rotation_rep(O1.T), np.eye(len(R1)), atol=1e-10)
        assert_allclose(R1.T @ R1, np.eye(len(R1)), atol=1e-10)


def test_rotation_rep_rejects_non_orthogonal():
    with pytest.raises(ValueError):
        rotation_rep(np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_congruence_rep_rectangular():
    rng = np.random.default_rng(3)
    Q = np.linalg.qr(rng.standard_normal((6, 4)))[0]
    A6, A4 = duplication_matrix(6), duplication_matrix(4)
    R = 0.5 * A6.T @ np.kron(Q, Q) @ A4
    assert_allclose(congruence_rep(Q).T, R, atol=1e-13)
    assert_allclose(R.T @ R, np.eye(10), atol=1e-12)


def test_sym_eig_examples():
    w, V = sym_eig(np.diag([3.0, 1.0, 2.0]))
    assert_allclose(w, [3, 2, 1])
    u = np.array([1.0, -2.0, 2.0])
    w, V = sym_eig(np.outer(u, u))
    assert_allclose(w, [9, 0, 0], atol=1e-12)
    # sign convention: largest magnitude entry positive
    assert V[np.argmax(np.abs(V[:, 0])), 0] > 0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_sym_eig_reconstruction(m, seed):
    S = rand_sym(m, np.random.default_rng(seed))
    w, V = sym_eig(S)
    assert np.all(np.diff(w) <= 0)
    assert_allclose(V @ np.diag(w) @ V.T, S, atol=1e-10 * max(1, np.abs(S).max()))
    assert_allclose(S @ V, V * w, atol=1e-9 * np.linalg.norm(S))
    idx = np.argmax(np.abs(V), axis=0)
    assert np.all(V[idx, np.arange(m)] > 0)


def test_sym_eig_deterministic():
    S = rand_sym(6, np.random.default_rng(5))
    a = sym_eig(S)
    b = sym_eig(S.copy())
    assert_array_equal(a[0], b[0])
    assert_array_equal(a[1], b[1])
