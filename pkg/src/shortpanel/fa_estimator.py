"""Gaussian pseudo-ML factor analysis for short panels.

The estimator solves the first-order conditions of the Gaussian
pseudo likelihood

    L(F, V) = -0.5 log|FF' + V| - 0.5 tr(Vy (FF' + V)^{-1}),  V diagonal,

which are: (a) the diagonal of ``Vy`` equals the diagonal of ``FF' + V``;
(b) the columns of ``F`` are eigenvectors of ``Vy V^{-1}`` for its ``k``
largest eigenvalues ``1 + gamma_j``, normalized so that
``F' V^{-1} F = diag(gamma_1, ..., gamma_k)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core_linalg import sym_eig
from .panel_io import Panel, demean


HEYWOOD_RTOL = 1e-5
# positivity floor for the idiosyncratic variances, relative to mean diag(Vy)
FLOOR_RTOL = 1e-8


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FaEstimate:
    """Fitted ``k``-factor model.

    Attributes
    ----------
    k : int
    mu_hat : ndarray (T,)
    F_hat : ndarray (T, k)
    V_eps_hat : ndarray (T,)
        Diagonal of the idiosyncratic variance matrix.
    gamma_hat : ndarray (T,)
        Eigenvalues of ``Vy V^{-1}`` minus one, descending. The first ``k``
        are replaced by their positive part.
    G_hat : ndarray (T, T-k)
        ``V^{1/2} Q`` with ``Q`` the eigenvectors of ``V^{-1/2} Vy V^{-1/2}``
        for the ``T-k`` smallest eigenvalues.
    loglik : float
    iterations : int
    converged : bool
    heywood : bool
        Some idiosyncratic variance sits at the positivity floor.
    boundary : bool
        Some of the first ``k`` eigenvalues fell below one.
    Vy : ndarray (T, T)
    n : int
    spherical : bool
    """

    k: int
    mu_hat: np.ndarray
    F_hat: np.ndarray
    V_eps_hat: np.ndarray
    gamma_hat: np.ndarray
    G_hat: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    heywood: bool = False
    boundary: bool = False
    Vy: np.ndarray = field(default=None, repr=False)
    n: int = 0
    spherical: bool = False
    method: str = "alternating"

    @property
    def T(self) -> int:
        return len(self.V_eps_hat)

    @property
    def df(self) -> int:
        return df(self.T, self.k)

    def sigma(self) -> np.ndarray:
        """Fitted covariance ``F F' + V``."""
        return self.F_hat @ self.F_hat.T + np.diag(self.V_eps_hat)

    def loadings(self, Y) -> np.ndarray:
        """GLS loadings ``(F'V^{-1}F)^{-1} F'V^{-1}(y_i - mu)`` as rows (n x k)."""
        Y = np.asarray(Y, dtype=float)
        Fw = self.F_hat / self.V_eps_hat[:, None]
        A = self.F_hat.T @ Fw
        return np.linalg.lstsq(A, Fw.T @ (Y - self.mu_hat[:, None]), rcond=None)[0].T


def df(T: int, k: int) -> int:
    """Degrees of freedom ``((T-k)^2 - T - k) / 2`` of the ``k``-factor restriction."""
    if not 0 <= k < T:
        raise ValueError(f"need 0 <= k < T, got T={T}, k={k}")
    return ((T - k) ** 2 - T - k) // 2


def max_factors(T: int, strict: bool = True) -> int:
    """Largest ``k`` with ``df(T, k) > 0`` (``>= 0`` when ``strict`` is False)."""
    best = -1
    for k in range(T):
        d = df(T, k)
        if d > 0 or (not strict and d >= 0):
            best = k
    return best


def df_table(T_values=range(1, 25)) -> dict:
    """Max admissible ``k`` per ``T`` for ``df >= 0`` and ``df > 0``."""
    return {T: {"df>=0": max_factors(T, strict=False), "df>0": max_factors(T, strict=True)}
            for T in T_values}


# --------------------------------------------------------------- FA solver


def _scaled_eig(Vy, psi):
    """Eigenpairs of ``V^{-1/2} Vy V^{-1/2}`` with factor columns.

    Returns ``(gamma, U, H)``: eigenvalues minus one in descending order,
    orthonormal eigenvectors, and ``H[:, j] = V^{1/2} U[:, j] sqrt(gamma_j)``
    (zero where ``gamma_j <= 0``). The work is done on ``C = L^{-1} V^{1/2}``
    (``Vy = LL'``), whose squared singular values are ``1 / (1 + gamma)``:
    ``gamma`` comes from the norm of ``C'u`` and ``H`` from ``L u``, so
    neither divides by a tiny variance and both keep their accuracy when the
    direct eigenproblem is badly conditioned.
    """
    L, Linv = _chol(Vy)
    b, U, u = _scaled_core(Linv, psi)
    sign = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])])
    sign[sign == 0] = 1.0
    H = (L @ u) * np.sqrt(np.maximum(1.0 - b, 0.0))
    return (1.0 - b) / b, U * sign, H * sign


def _chol(Vy):
    L = np.linalg.cholesky(Vy)
    return L, linalg.solve_triangular(L, np.eye(len(L)), lower=True)


def _scaled_core(Linv, psi):
    C = Linv * np.sqrt(psi)[None, :]
    _, u = np.linalg.eigh(C @ C.T)
    Q = C.T @ u
    b = np.einsum("ij,ij->j", Q, Q)
    order = np.argsort(b, kind="stable")
    b, u = b[order], u[:, order]
    return b, Q[:, order] / np.sqrt(b), u


def _factor_from_psi(Vy, psi, k, chol=None):
    L, Linv = _chol(Vy) if chol is None else chol
    b, U, u = _scaled_core(Linv, psi)
    F = (L @ u[:, :k]) * np.sqrt(np.maximum(1.0 - b[:k], 0.0))
    return F, 1.0 / b, U


def _profile_objective(x, Vy, k, floor):
    # -2 x profile log likelihood over log psi, with its gradient
    psi = np.maximum(np.exp(x), floor)
    F, w, _ = _factor_from_psi(Vy, psi, k)
    top = w[:k]
    val = np.sum(np.log(psi)) + np.sum(np.where(top > 1, np.log(np.maximum(top, 1e-300)) + 1, top)) \
        + np.sum(w[k:])
    Sig = F @ F.T + np.diag(psi)
    Si = np.linalg.inv(Sig)
    g = np.einsum("ij,jk,ki->i", Si, Sig - Vy, Si) * psi
    return val, g


def loglik_gaussian(Vy, Sigma) -> float:
    """``-0.5 log|Sigma| - 0.5 tr(Vy Sigma^{-1})``."""
    sign, logdet = np.linalg.slogdet(Sigma)
    if sign <= 0:
        return -np.inf
    return float(-0.5 * logdet - 0.5 * np.trace(np.linalg.solve(Sigma, Vy)))


def estimate_from_cov(Vy, k: int, n: int = 0, mu_hat=None, *, tol: float = 1e-11,
                      fa1_tol: float = 1e-11, max_iter: int = 10_000,
                      stall_iter: int = 300, psi0=None) -> FaEstimate:
    """Fit the ``k``-factor model to a sample covariance matrix.

    Parameters
    ----------
    Vy : ndarray (T, T)
        Sample covariance ``Ytilde Ytilde'/n``; must be positive definite.
    k : int
        Number of latent factors, ``df(T, k) >= 0``.
    n : int
        Cross-section size (stored for downstream statistics).
    tol : float
        Bound on the max relative change of the idiosyncratic variances.
    fa1_tol : float
        Bound on the relative residual of the diagonal-matching condition.
    max_iter : int
        Total budget of alternating steps.
    stall_iter : int
        Alternating steps before switching to quasi-Newton on the profile
        likelihood.

    Notes
    -----
    Alternates the eigen step given ``V`` with the diagonal update
    ``V = diag(Vy - FF')``, accelerated by squared extrapolation (SQUAREM)
    of pairs of steps. Fits still moving after ``stall_iter`` steps are
    handed to L-BFGS-B on ``log diag(V)`` and the alternation resumes from
    its output. A variance below ``1e-5`` times the average diagonal of
    ``Vy`` is reported as a Heywood case; one that is below that level and
    still decreasing is set to the positivity floor, ``1e-8`` times that
    average, and held there while its update stays below that level. The
    eigen step is computed so that it stays accurate with a variance at the
    floor (see ``_scaled_eig``).
    """
    Vy = np.asarray(Vy, dtype=float)
    Vy = 0.5 * (Vy + Vy.T)
    T = Vy.shape[0]
    if df(T, k) < 0:
        raise ValueError(f"k={k} leaves negative degrees of freedom for T={T}")
    dy = np.diag(Vy).copy()
    if np.any(dy <= 0) or np.linalg.eigvalsh(Vy)[0] <= 0:
        raise ValueError("sample covariance is not positive definite")
    floor = FLOOR_RTOL * dy.mean()
    mu_hat = np.zeros(T) if mu_hat is None else np.asarray(mu_hat, dtype=float)

    if k == 0:
        psi = dy.copy()
        it, converged, method = 0, True, "closed-form"
    else:
        psi = dy * (1.0 - k / T) if psi0 is None else np.maximum(np.asarray(psi0, float), floor)
        it, converged, method = 0, False, "alternating"
        switched = False

        sink_level = HEYWOOD_RTOL * dy.mean()
        chol = _chol(Vy)

        def step(v):
            F, _, _ = _factor_from_psi(Vy, v, k, chol)
            out = np.maximum(dy - np.sum(F * F, axis=1), floor)
            # a variance already below the Heywood level and still falling creeps to the
            # boundary sublinearly; send it there directly, and keep it there
            pinned = v <= floor * (1 + 1e-6)
            sink = (out < sink_level) & ((out < v) | pinned)
            out[sink] = floor
            return out

        while it < max_iter:
            p1 = step(psi)
            it += 1
            # p1 - psi is the diagonal-matching residual at psi
            r = p1 - psi
            interior = p1 > floor
            change = np.max(np.abs(r) / psi)
            resid = np.max(np.abs(r)[interior] / psi[interior], initial=0.0)
            if change < tol and resid < fa1_tol:
                psi = p1
                converged = True
                break
            if it >= stall_iter and not switched:
                switched = True
                method = "alternating+lbfgs"
                res = optimize.minimize(_profile_objective, np.log(psi), args=(Vy, k, floor),
                                        jac=True, method="L-BFGS-B",
                                        bounds=[(np.log(floor), None)] * T,
                                        options={"maxiter": 5000, "ftol": 1e-15, "gtol": 1e-12})
                psi = np.maximum(np.exp(res.x), floor)
                continue
            if switched:
                psi = p1
                continue
            # squared extrapolation of two alternating steps (SQUAREM)
            p2 = step(p1)
            it += 1
            v = p2 - p1 - r
            vv = v @ v
            a = min(-np.sqrt((r @ r) / vv), -1.0) if vv > 0 else -1.0
            cand = psi - 2 * a * r + a * a * v
            psi = p2 if a == -1.0 or np.any(cand <= 0) else step(np.maximum(cand, floor))
            it += a != -1.0
        if not converged:
            warnings.warn(f"factor analysis did not converge in {max_iter} iterations",
                          ConvergenceWarning, stacklevel=2)
    return _assemble(Vy, psi, k, n, mu_hat, it, converged, floor, method)


def _assemble(Vy, psi, k, n, mu_hat, it, converged, floor, method, spherical=False):
    T = Vy.shape[0]
    gamma, U, H = _scaled_eig(Vy, psi)
    boundary = bool(np.any(gamma[:k] < 0))
    gamma[:k] = np.maximum(gamma[:k], 0.0)
    F = H[:, :k]
    G = np.sqrt(psi)[:, None] * U[:, k:]
    Sig = F @ F.T + np.diag(psi)
    if k >= 2 and gamma[0] > 0:
        gaps = gamma[: k - 1] - gamma[1:k]
        if np.min(gaps) < 1e-6 * gamma[0]:
            warnings.warn("nearly tied factor eigenvalues; factor columns are poorly identified",
                          stacklevel=3)
    return FaEstimate(k=k, mu_hat=mu_hat, F_hat=F, V_eps_hat=psi.copy(), gamma_hat=gamma,
                      G_hat=G, loglik=loglik_gaussian(Vy, Sig), iterations=it,
                      converged=converged, heywood=bool(np.any(psi < HEYWOOD_RTOL * np.mean(np.diag(Vy)))),
                      boundary=boundary, Vy=Vy, n=int(n), spherical=spherical, method=method)


def estimate(p: Panel | np.ndarray, k: int, **kwargs) -> FaEstimate:
    """Pseudo-ML factor analysis of a panel (``T x n`` array or :class:`Panel`).

    See :func:`estimate_from_cov` for the keyword arguments.
    """
    ybar, Yt = demean(p)
    n = Yt.shape[1]
    return estimate_from_cov(Yt @ Yt.T / n, k, n=n, mu_hat=ybar, **kwargs)


def constrained_from_cov(Vy, k: int, n: int = 0, mu_hat=None) -> FaEstimate:
    """Factor analysis under ``V = sigma^2 I``: principal components of ``Vy``.

    ``sigma^2`` is the mean of the ``T-k`` smallest eigenvalues of ``Vy`` and
    ``F'F = diag(delta_j - sigma^2)``.
    """
    Vy = np.asarray(Vy, dtype=float)
    Vy = 0.5 * (Vy + Vy.T)
    T = Vy.shape[0]
    if df(T, k) < 0:
        raise ValueError(f"k={k} leaves negative degrees of freedom for T={T}")
    delta, _ = sym_eig(Vy)
    if delta[-1] <= 0:
        raise ValueError("sample covariance is not positive definite")
    sigma2 = float(np.mean(delta[k:]))
    mu_hat = np.zeros(T) if mu_hat is None else np.asarray(mu_hat, dtype=float)
    psi = np.full(T, sigma2)
    return _assemble(Vy, psi, k, n, mu_hat, 0, True, 0.0, "pca", spherical=True)


def constrained_estimate_spherical(p: Panel | np.ndarray, k: int) -> FaEstimate:
    """Spherical-constrained factor analysis (PCA) of a panel."""
    ybar, Yt = demean(p)
    n = Yt.shape[1]
    return constrained_from_cov(Yt @ Yt.T / n, k, n=n, mu_hat=ybar)


def refit_eigen(est: FaEstimate) -> tuple[np.ndarray, np.ndarray]:
    """Redo the eigen step at the converged ``V``; returns ``(F, gamma)``."""
    psi = est.V_eps_hat
    gamma, _, H = _scaled_eig(est.Vy, psi)
    return H[:, : est.k], gamma


# ----------------------------------------------------- scikit-learn wrapper


class ShortPanelFactorAnalysis(TransformerMixin, BaseEstimator):
    """Pseudo-ML factor analysis with units as samples.

    ``X`` has one row per unit and one column per period (the transpose of
    the ``T x n`` panel). ``transform`` returns GLS loadings.

    Parameters
    ----------
    n_factors : int, default=1
    spherical : bool, default=False
        Impose equal idiosyncratic variances (principal components).
    tol : float, default=1e-11
    fa1_tol : float, default=1e-11
    max_iter : int, default=10000

    Attributes
    ----------
    estimate_ : FaEstimate
    mean_ : ndarray (T,)
    factors_ : ndarray (T, n_factors)
    noise_variance_ : ndarray (T,)
    gamma_ : ndarray (T,)
    loglik_ : float
    n_iter_ : int
    converged_ : bool

    Examples
    --------
    >>> import numpy as np
    >>> rng = np.random.default_rng(0)
    >>> X = rng.standard_normal((500, 1)) @ rng.standard_normal((1, 6)) \\
    ...     + rng.standard_normal((500, 6))
    >>> fa = ShortPanelFactorAnalysis(n_factors=1).fit(X)
    >>> fa.transform(X).shape
    (500, 1)
    """

    def __init__(self, n_factors=1, spherical=False, tol=1e-11, fa1_tol=1e-11, max_iter=10_000):
        self.n_factors = n_factors
        self.spherical = spherical
        self.tol = tol
        self.fa1_tol = fa1_tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2, ensure_min_features=2)
        Y = X.T
        if self.spherical:
            est = constrained_estimate_spherical(Y, self.n_factors)
        else:
            est = estimate(Y, self.n_factors, tol=self.tol, fa1_tol=self.fa1_tol,
                           max_iter=self.max_iter)
        self.estimate_ = est
        self.mean_ = est.mu_hat
        self.factors_ = est.F_hat
        self.noise_variance_ = est.V_eps_hat
        self.gamma_ = est.gamma_hat
        self.loglik_ = est.loglik
        self.n_iter_ = est.iterations
        self.converged_ = est.converged
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "estimate_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} periods, expected {self.n_features_in_}")
        return self.estimate_.loadings(X.T)

    def get_covariance(self):
        check_is_fitted(self, "estimate_")
        return self.estimate_.sigma()

    def score(self, X, y=None):
        """Gaussian pseudo log likelihood per unit of ``X`` under the fit."""
        check_is_fitted(self, "estimate_")
        X = check_array(X)
        D = X - self.mean_[None, :]
        return loglik_gaussian(D.T @ D / X.shape[0], self.get_covariance())
