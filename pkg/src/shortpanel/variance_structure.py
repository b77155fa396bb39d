"""ARCH-restricted parametric variance of the error moments and SEs of diag(V).

Under serially uncorrelated (martingale difference) errors with a common
ARCH-type volatility pattern, the variance of ``vech(Z)`` with
``Z = sqrt(n)(ee'/n - E)`` is

    Omega = (psi(0) - 2q) D(0) + sum_h psi(h) D(h) + (q + kappa) I,

where ``D(0)``, ``D(h) = Dtilde(h) + Dbar(h)`` are fixed 0/1 patterns,
``psi(h)`` is the autocovariance of squared standardized errors and
``q + kappa`` the cross-sectional second-moment level. Projected on the
test directions only the ``Dbar(h)`` terms survive, which gives a
``T - 1`` coefficient regression.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .core_linalg import congruence_rep, vech, vech_dim, vech_order
from .fa_estimator import FaEstimate

# ------------------------------------------------------------- basis


@dataclass(frozen=True)
class OmegaBasis:
    """``D(0)``, ``Dtilde(h)`` and ``Dbar(h)`` (h = 1..T-1) on ``vech`` space.

    ``D_tilde[h - 1]`` and ``D_bar[h - 1]`` hold lag ``h``.
    """

    T: int
    D0: np.ndarray
    D_tilde: np.ndarray
    D_bar: np.ndarray

    def D(self, h: int) -> np.ndarray:
        return self.D0 if h == 0 else self.D_tilde[h - 1] + self.D_bar[h - 1]

    @property
    def vech_identity(self) -> np.ndarray:
        return vech(np.eye(self.T))


def _unit_vech(T, t, s):
    """``vech(E_ts + E_st)`` for t != s, ``vech(E_tt)`` for t == s."""
    E = np.zeros((T, T))
    E[t, s] = 1.0
    E[s, t] = 1.0
    return vech(E)


@lru_cache(maxsize=8)
def omega_basis(T: int) -> OmegaBasis:
    """Pattern matrices for the ARCH-restricted variance (cached, read-only).

    Satisfies ``3 D(0) + sum_h D(h) - vech(I)vech(I)' = I`` exactly.
    """
    if T < 2:
        raise ValueError("T must be at least 2")
    p0 = vech_dim(T)
    diag = [_unit_vech(T, t, t) for t in range(T)]
    D0 = sum(np.outer(a, a) for a in diag)
    Dt = np.zeros((T - 1, p0, p0))
    Db = np.zeros((T - 1, p0, p0))
    for h in range(1, T):
        for t in range(T - h):
            a, b = diag[t], diag[t + h]
            Dt[h - 1] += np.outer(a, b) + np.outer(b, a)
            c = _unit_vech(T, t, t + h)
            Db[h - 1] += np.outer(c, c)
    for a in (D0, Dt, Db):
        a.setflags(write=False)
    return OmegaBasis(T, D0, Dt, Db)


def r_matrix(est: FaEstimate, check: bool = True) -> np.ndarray:
    """``R`` (p0 x p) with ``R'vech(S) = vech(Q'SQ)`` and ``Q = V^{-1/2} G``.

    ``R'R = I_p`` because ``Q'Q = I``.
    """
    Q = est.G_hat / np.sqrt(est.V_eps_hat)[:, None]
    R = congruence_rep(Q).T
    if check:
        err = np.max(np.abs(R.T @ R - np.eye(R.shape[1])))
        if err > 1e-10:
            raise ValueError(f"R'R deviates from the identity by {err:.2e}; G is not V-orthonormal")
    return R


# ------------------------------------------------------- parameters


@dataclass(frozen=True)
class ArchParams:
    """Identified combinations of the variance parameters.

    Attributes
    ----------
    psi : ndarray (T,)
        ``psi[0] = psi(0) - 2q`` and ``psi[h] = psi(h)`` for ``h >= 1``;
        ``psi[T - 1]`` is zero by the identifying restriction.
    q_plus_kappa : float
    xi_minus_kappa : float
        Within-block cross-product term of the uncentered moments.
    level : ndarray (T - 1,)
        Projected-regression coefficients ``psi(h) + q + kappa``, h = 1..T-1.
    coeffs : ndarray (T + 1,)
        Raw coefficients of the full regression on ``D(0)``, ``D(1..T-1)``
        and ``vech(I)vech(I)'``.
    psi_Tminus1_zero : bool
        Whether the identifying restriction was imposed.
    rank : int
        Numerical rank of the projected regression (``T - 1`` when all
        levels are separately identified).
    negative : bool
        Some fitted ``psi(h) + q + kappa`` are negative.
    """

    psi: np.ndarray
    q_plus_kappa: float
    xi_minus_kappa: float
    level: np.ndarray
    coeffs: np.ndarray
    psi_Tminus1_zero: bool = True
    rank: int = 0
    negative: bool = False


def identify_theta(coeffs, assume_psi_last_zero: bool = True, level=None, rank: int = 0) -> ArchParams:
    """Recover identified parameters from full-regression coefficients.

    With ``coeffs = (c_0, c_1, ..., c_{T-1}, c_T)`` on
    ``[D(0), D(1), ..., D(T-1), vech(I)vech(I)']`` and the restriction
    ``psi(T-1) = 0``: ``q + kappa = c_{T-1}``, ``psi(h) = c_h - c_{T-1}``,
    ``psi(0) - 2q = c_0 - 3 c_{T-1}`` and ``xi - kappa = c_T``.

    Raises
    ------
    ValueError
        If the restriction is not assumed: the system is then rank deficient.
    """
    if not assume_psi_last_zero:
        raise ValueError("psi(h) and q + kappa are not identified without psi(T-1) = 0")
    c = np.asarray(coeffs, dtype=float)
    T = c.size - 1
    if T < 2:
        raise ValueError("need at least T + 1 = 3 coefficients")
    qk = c[T - 1]
    psi = np.empty(T)
    psi[0] = c[0] - 3 * qk
    psi[1:] = c[1:T] - qk
    level = c[1:T].copy() if level is None else np.asarray(level, dtype=float)
    neg = bool(np.any(level < 0))
    if neg:
        warnings.warn("negative fitted psi(h) + q + kappa", stacklevel=2)
    return ArchParams(psi=psi, q_plus_kappa=float(qk), xi_minus_kappa=float(c[T]),
                      level=level, coeffs=c, psi_Tminus1_zero=True, rank=rank, negative=neg)


def parametric_omega(params: ArchParams, basis: OmegaBasis | None = None) -> np.ndarray:
    """Centered ``Omega`` (p0 x p0) implied by identified parameters."""
    T = params.psi.size
    basis = omega_basis(T) if basis is None else basis
    Om = params.psi[0] * basis.D0 + params.q_plus_kappa * np.eye(basis.D0.shape[0])
    for h in range(1, T):
        Om += params.psi[h] * basis.D(h)
    return Om


# ------------------------------------------------------- regressions


def _lstsq(design, y):
    coef, _, rank, sv = np.linalg.lstsq(design, y, rcond=None)
    return coef, int(rank), sv


def parametric_mxomega(est: FaEstimate, omega_hat, xmat=None, basis: OmegaBasis | None = None):
    """Fit the ARCH-restricted structure to a nonparametric estimate.

    Parameters
    ----------
    est : FaEstimate
    omega_hat : ndarray (p, p)
        Nonparametric variance of ``vech(Z*)``.
    xmat : XMat, optional
        Design for ``est``; built from ``est.G_hat`` if omitted.

    Returns
    -------
    fitted : ndarray (p, p)
        ``sum_h c_h M_X R'Dbar(h)R M_X`` with least-squares ``c_h``.
    params : ArchParams
        From the unprojected regression of ``omega_hat`` on
        ``R'D(0)R``, ``R'D(h)R`` and ``vech(I)vech(I)'``.

    Notes
    -----
    For small ``T - k`` the projected regressors can be collinear; the
    minimum-norm solution is used and its fitted matrix is still unique.
    ``params.rank`` reports the numerical rank.
    """
    from .lr_inference import build_xmat

    T = est.T
    basis = omega_basis(T) if basis is None else basis
    xmat = build_xmat(est.G_hat) if xmat is None else xmat
    R = r_matrix(est)
    M = xmat.M_X
    omega_hat = np.asarray(omega_hat, dtype=float)
    if omega_hat.shape != M.shape:
        raise ValueError("omega_hat does not match the test dimension")

    RM = R @ M
    proj = np.stack([RM.T @ basis.D_bar[h] @ RM for h in range(T - 1)])
    A = np.stack([vech(B) for B in proj], axis=1)
    if not np.all(np.isfinite(A)) or np.linalg.norm(A) == 0:
        raise ValueError("degenerate basis: projected regressors vanish")
    y = vech(M @ omega_hat @ M)
    level, rank, _ = _lstsq(A, y)
    fitted = np.tensordot(level, proj, axes=1)

    full = [R.T @ basis.D0 @ R] + [R.T @ basis.D(h) @ R for h in range(1, T)]
    v = vech(np.eye(T - est.k))
    full.append(np.outer(v, v))
    Af = np.stack([vech(B) for B in full], axis=1)
    coeffs, _, _ = _lstsq(Af, vech(omega_hat))
    # projected levels equal the full-regression D(h) coefficients in population;
    # report the projected fit as the level sequence
    params = identify_theta(coeffs, True, level=level, rank=rank)
    return 0.5 * (fitted + fitted.T), params


def omega_zstar_parametric(est: FaEstimate, params: ArchParams, basis=None) -> np.ndarray:
    """Centered ``R' Omega R`` (p x p) from identified parameters."""
    R = r_matrix(est)
    return R.T @ parametric_omega(params, basis) @ R


# ------------------------------------------------------------- SEs


def veps_standard_errors(est: FaEstimate, p=None, omega_hat=None, omega_source: str = "parametric",
                         n: int | None = None) -> np.ndarray:
    """Standard errors of the idiosyncratic variances ``diag(V)``.

    ``avar = V^2 (X'X)^{-1} X' Omega X (X'X)^{-1} V^2 / n`` with ``X`` the
    ``vech(G'E_tt G)`` design and ``Omega`` the centered variance of
    ``vech(Z*)``.

    Parameters
    ----------
    est : FaEstimate
    p : Panel or ndarray, optional
        Needed when ``omega_hat`` is not given.
    omega_hat : ndarray (p, p), optional
        Nonparametric (uncentered) block estimate.
    omega_source : {'parametric', 'nonparametric'}
        'parametric' uses the ARCH-restricted centered variance;
        'nonparametric' subtracts the fitted mean term
        ``(q + xi) vech(I)vech(I)'`` from ``omega_hat``.
    """
    from .lr_inference import omega_zstar_nonparametric

    n = est.n if n is None else n
    if n <= 0:
        raise ValueError("cross-section size unknown")
    if omega_hat is None:
        if p is None:
            raise ValueError("either the panel or omega_hat is required")
        omega_hat = omega_zstar_nonparametric(est, p)
    X = _vech_x(est.G_hat)
    XtX = X.T @ X
    if np.linalg.cond(XtX) > 1e12:
        raise ValueError("X is rank deficient: diag(V) is not locally identified")
    _, params = parametric_mxomega(est, omega_hat)
    if omega_source == "parametric":
        Om = omega_zstar_parametric(est, params)
    elif omega_source == "nonparametric":
        v = vech(np.eye(est.T - est.k))
        Om = omega_hat - (params.q_plus_kappa + params.xi_minus_kappa) * np.outer(v, v)
    else:
        raise ValueError("omega_source must be 'parametric' or 'nonparametric'")
    B = np.linalg.solve(XtX, X.T)
    cov = B @ Om @ B.T
    var = est.V_eps_hat ** 4 * np.diag(cov) / n
    return np.sqrt(np.maximum(var, 0.0))


def _vech_x(G):
    rows, cols = vech_order(G.shape[1])
    X = G[:, rows] * G[:, cols]
    X[:, : G.shape[1]] /= np.sqrt(2.0)
    return X.T
