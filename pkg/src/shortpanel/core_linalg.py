"""Half-vectorization, duplication matrices and small symmetric eigenproblems.

The half-vectorization used throughout the package stores the diagonal
first, scaled by ``1/sqrt(2)``, followed by the strict upper triangle in
row-major order::

    vech(Z) = (z11/sqrt2, ..., zmm/sqrt2, z12, z13, ..., z1m, z23, ..., z(m-1)m)

With this scaling ``vech(A) @ vech(B) == 0.5 * trace(A @ B)`` for symmetric
``A`` and ``B``.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

SQRT2 = np.sqrt(2.0)


def vech_dim(m: int) -> int:
    """Length of the half-vectorization of an ``m x m`` matrix."""
    return m * (m + 1) // 2


def vech_order(m: int) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices of the vech entries, in storage order."""
    return _vech_order(int(m))


@lru_cache(maxsize=64)
def _vech_order(m):
    diag = np.arange(m)
    iu, ju = np.triu_indices(m, 1)
    rows = np.concatenate([diag, iu])
    cols = np.concatenate([diag, ju])
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def dim_from_vech(p: int) -> int:
    """Recover ``m`` from ``p = m(m+1)/2``; raise if ``p`` is not triangular."""
    m = int(round((np.sqrt(8 * p + 1) - 1) / 2))
    if vech_dim(m) != p:
        raise ValueError(f"length {p} is not of the form m(m+1)/2")
    return m


def vech(S) -> np.ndarray:
    """Half-vectorize a symmetric matrix (or a stack of them).

    Parameters
    ----------
    S : array_like, shape (..., m, m)
        Symmetric matrix. Only the upper triangle and diagonal are read.

    Returns
    -------
    ndarray, shape (..., m(m+1)/2)
    """
    S = np.asarray(S, dtype=float)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise ValueError("vech expects square matrices")
    m = S.shape[-1]
    rows, cols = vech_order(m)
    out = S[..., rows, cols].copy()
    out[..., :m] /= SQRT2
    return out


def unvech(v, m: int | None = None) -> np.ndarray:
    """Inverse of :func:`vech`.

    Parameters
    ----------
    v : array_like, shape (..., p)
    m : int, optional
        Matrix dimension. Inferred from ``p`` when omitted.

    Returns
    -------
    ndarray, shape (..., m, m)
    """
    v = np.asarray(v, dtype=float)
    p = v.shape[-1]
    if m is None:
        m = dim_from_vech(p)
    elif vech_dim(m) != p:
        raise ValueError(f"vech length {p} does not match dimension m={m}")
    rows, cols = vech_order(m)
    vals = v.copy()
    vals[..., :m] *= SQRT2
    out = np.zeros(v.shape[:-1] + (m, m))
    out[..., rows, cols] = vals
    out[..., cols, rows] = vals
    return out


def vech_outer(E) -> np.ndarray:
    """Rows ``vech(e_i e_i')`` for the rows ``e_i`` of ``E``.

    Cheaper than forming the outer products explicitly.

    Parameters
    ----------
    E : array_like, shape (n, m)

    Returns
    -------
    ndarray, shape (n, m(m+1)/2)
    """
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[None, :]
    m = E.shape[1]
    rows, cols = vech_order(m)
    out = E[:, rows] * E[:, cols]
    out[:, :m] /= SQRT2
    return out


def vech_sym_outer(E, H) -> np.ndarray:
    """Rows ``vech(e_i h_i' + h_i e_i')`` for matching rows of ``E`` and ``H``."""
    E = np.asarray(E, dtype=float)
    H = np.asarray(H, dtype=float)
    m = E.shape[1]
    rows, cols = vech_order(m)
    out = E[:, rows] * H[:, cols] + H[:, rows] * E[:, cols]
    out[:, :m] /= SQRT2
    return out


def duplication_matrix(m: int) -> np.ndarray:
    """Matrix ``A_m`` with ``vec(S) = A_m vech(S)`` for symmetric ``S``.

    Columns are ``sqrt2 * (e_i kron e_i)`` for the diagonal entries and
    ``e_i kron e_j + e_j kron e_i`` for ``i < j``, so that ``A'A = 2I`` and
    ``A A' = I + K`` with ``K`` the commutation matrix.
    """
    rows, cols = vech_order(m)
    p = vech_dim(m)
    A = np.zeros((m * m, p))
    idx = np.arange(p)
    A[rows * m + cols, idx] = 1.0
    A[cols * m + rows, idx] = 1.0
    A[rows[:m] * m + cols[:m], idx[:m]] = SQRT2
    return A


def commutation_matrix(m: int, n: int | None = None) -> np.ndarray:
    """Commutation matrix ``K`` with ``K vec(A) = vec(A')`` for ``A`` of shape (m, n)."""
    n = m if n is None else n
    K = np.zeros((m * n, m * n))
    i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
    # vec is column-major: A[i, j] sits at j*m + i, A'[j, i] at i*n + j
    K[(i * n + j).ravel(), (j * m + i).ravel()] = 1.0
    return K


def vec(A) -> np.ndarray:
    """Column-major vectorization."""
    return np.asarray(A, dtype=float).reshape(-1, order="F")


def rotation_rep(O, atol: float = 1e-10) -> np.ndarray:
    """Representation of an orthogonal matrix on half-vectorized matrices.

    Returns ``R(O) = 0.5 * A_m' (O' kron O') A_m`` so that
    ``vech(O^{-1} S O) = R(O) @ vech(S)``.

    Parameters
    ----------
    O : array_like, shape (m, m)
        Orthogonal matrix.
    atol : float
        Tolerance on ``O'O - I``.

    Returns
    -------
    ndarray, shape (p, p)
        Orthogonal with ``R(O1) R(O2) = R(O2 O1)``.
    """
    O = np.asarray(O, dtype=float)
    if O.ndim != 2 or O.shape[0] != O.shape[1]:
        raise ValueError("rotation_rep expects a square matrix")
    m = O.shape[0]
    if np.max(np.abs(O.T @ O - np.eye(m))) > atol:
        raise ValueError("rotation_rep expects an orthogonal matrix")
    return congruence_rep(O)


def congruence_rep(Q) -> np.ndarray:
    """Matrix ``C`` with ``vech(Q' S Q) = C @ vech(S)`` for any ``Q`` (m x r).

    For orthogonal ``Q`` this is :func:`rotation_rep`; for ``Q`` with
    orthonormal columns its transpose is the ``R`` matrix mapping
    ``vech`` coordinates of dimension ``r`` into dimension ``m``.
    Built column by column from the symmetric basis, which avoids
    forming ``Q kron Q``.
    """
    Q = np.asarray(Q, dtype=float)
    m = Q.shape[0]
    rows, cols = vech_order(m)
    # image of the basis matrix unvech(e_a): sqrt2*q_t q_t' on the diagonal,
    # q_t q_s' + q_s q_t' off it
    Qr = Q[rows]
    Qc = Q[cols]
    img = vech_sym_outer(Qr, Qc)
    img[:m] /= SQRT2
    return img.T


def sym_eig(S, descending: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition with a reproducible sign convention.

    Each eigenvector is flipped so that its entry of largest magnitude is
    positive (the first such entry on ties).

    Parameters
    ----------
    S : array_like, shape (m, m)
    descending : bool
        Sort eigenvalues from largest to smallest (default).

    Returns
    -------
    w : ndarray, shape (m,)
    V : ndarray, shape (m, m)
        Orthonormal eigenvectors in columns.
    """
    S = np.asarray(S, dtype=float)
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if descending:
        w = w[::-1]
        V = V[:, ::-1]
    return w, fix_signs(V)


def fix_signs(V) -> np.ndarray:
    """Flip columns so that the largest-magnitude entry of each is positive."""
    V = np.array(V, dtype=float, copy=True)
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def random_orthogonal(m: int, rng=None) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    from scipy.stats import ortho_group

    if m == 1:
        rng = np.random.default_rng(rng)
        return np.array([[rng.choice([-1.0, 1.0])]])
    return ortho_group.rvs(m, random_state=rng)
