"""LR test for the number of latent factors and its weighted chi-square law.

Pipeline: fit ``k`` factors, form the residual-structure matrix ``S``, take
``LR(k) = -n sum_{j>k} log(1 + gamma_j)``, estimate the variance of the
half-vectorized error moments ``Z*`` from block sums of GLS residual
products, and read the null law ``sum_j mu_j chi2_j(1)`` off the nonzero
eigenvalues of ``M_X Omega M_X``.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, sparse, stats

from .core_linalg import sym_eig, vech, vech_dim, vech_outer
from .fa_estimator import (
    FaEstimate,
    constrained_from_cov,
    df as df_fn,
    estimate_from_cov,
    max_factors,
)
from .panel_io import Panel, demean


# ------------------------------------------------------------ S matrix


@dataclass(frozen=True)
class SHat:
    """``S`` (T x T) and its reduced form ``S* = diag(gamma_{k+1..T})``."""

    S: np.ndarray
    S_star: np.ndarray

    @property
    def frob2(self) -> float:
        return float(np.sum(self.S * self.S))


def gls_projector(est: FaEstimate) -> np.ndarray:
    """``M = I - F (F'V^{-1}F)^{-1} F'V^{-1}``."""
    T, k = est.F_hat.shape
    if k == 0:
        return np.eye(T)
    Fw = est.F_hat / est.V_eps_hat[:, None]
    A = est.F_hat.T @ Fw
    return np.eye(T) - est.F_hat @ np.linalg.pinv(A) @ Fw.T


def compute_shat(est: FaEstimate, p: Panel | np.ndarray | None = None) -> SHat:
    """``S = V^{-1/2} M (Vy - V) M' V^{-1/2}`` and ``S* = G'V^{-1}(Vy - V)V^{-1}G``."""
    if np.any(est.V_eps_hat <= 0):
        raise ValueError("idiosyncratic variances must be positive")
    Vy = est.Vy if p is None else _cov(p)
    M = gls_projector(est)
    s = 1.0 / np.sqrt(est.V_eps_hat)
    D = M @ (Vy - np.diag(est.V_eps_hat)) @ M.T
    S = s[:, None] * D * s[None, :]
    Gw = est.G_hat / est.V_eps_hat[:, None]
    S_star = Gw.T @ (Vy - np.diag(est.V_eps_hat)) @ Gw
    return SHat(0.5 * (S + S.T), 0.5 * (S_star + S_star.T))


def shat_residual_form(est: FaEstimate, p: Panel | np.ndarray) -> np.ndarray:
    """``V^{-1/2}(e e'/n)V^{-1/2} - V^{-1/2} M V^{1/2}`` with GLS residuals ``e = M Ytilde``."""
    E = gls_residuals(est, p)
    n = E.shape[1]
    s = 1.0 / np.sqrt(est.V_eps_hat)
    M = gls_projector(est)
    return s[:, None] * (E @ E.T / n) * s[None, :] - s[:, None] * M * np.sqrt(est.V_eps_hat)[None, :]


def _cov(p):
    _, Yt = demean(p)
    return Yt @ Yt.T / Yt.shape[1]


def gls_residuals(est: FaEstimate, p: Panel | np.ndarray) -> np.ndarray:
    _, Yt = demean(p)
    return gls_projector(est) @ Yt


# ----------------------------------------------------------- statistics


def lr_statistic(est: FaEstimate, n: int | None = None) -> float:
    """``LR(k) = -n sum_{j>k} log(1 + gamma_j)``."""
    n = est.n if n is None else n
    g = est.gamma_hat[est.k:]
    if np.any(1 + g <= 0):
        raise ValueError("degenerate fit: some 1 + gamma_j <= 0")
    return float(-n * np.sum(np.log1p(g)))


def constrained_lr_statistic(est_c: FaEstimate, n: int | None = None) -> float:
    """``LR_c(k) = -n sum_{j>k} log(delta_j / sigma^2)`` for a spherical fit."""
    if not est_c.spherical:
        raise ValueError("expected a spherical (PCA) estimate")
    return lr_statistic(est_c, n)


# ----------------------------------------------------------- X and Omega


@dataclass(frozen=True)
class XMat:
    """Design ``X`` (p x T) with columns ``vech(G'E_tt G)`` and ``M_X``."""

    X: np.ndarray
    M_X: np.ndarray

    @property
    def df(self) -> int:
        return self.X.shape[0] - self.X.shape[1]


def build_xmat(G, cond_max: float = 1e12) -> XMat:
    """``X = [vech(g_t g_t')]_t`` from the rows ``g_t`` of ``G``.

    Raises
    ------
    ValueError
        If ``X`` does not have full column rank (local identification fails).
    """
    G = np.asarray(G, dtype=float)
    X = vech_outer(G).T
    return _xmat_from(X, cond_max)


def _xmat_from(X, cond_max=1e12):
    # M_X is invariant to column scaling; normalizing keeps near-boundary
    # variances (tiny columns) from masquerading as rank deficiency
    norms = np.linalg.norm(X, axis=0)
    if X.shape[0] < X.shape[1] or np.any(norms == 0):
        raise ValueError("X is rank deficient: the k-factor model is not locally identified")
    Xn = X / norms
    XtX = Xn.T @ Xn
    if np.linalg.cond(XtX) > cond_max:
        raise ValueError("X is rank deficient: the k-factor model is not locally identified")
    M = np.eye(X.shape[0]) - Xn @ np.linalg.solve(XtX, Xn.T)
    return XMat(X, 0.5 * (M + M.T))


def spherical_xmat(m: int) -> XMat:
    """Single-column design ``x = vech(I_m)`` used under sphericity."""
    return _xmat_from(vech(np.eye(m))[:, None])


def block_matrix(blocks, n_blocks=None):
    """Sparse ``J x n`` indicator of block membership."""
    blocks = np.asarray(blocks)
    n = blocks.size
    J = int(blocks.max()) + 1 if n_blocks is None else n_blocks
    return sparse.csr_matrix((np.ones(n), (blocks, np.arange(n))), shape=(J, n))


def zstar_block_vech(est: FaEstimate, p: Panel | np.ndarray, G=None, blocks=None) -> np.ndarray:
    """Rows ``vech(z*_m)`` with ``z*_m = sum_{i in block m} G'V^{-1}e_i e_i'V^{-1}G``."""
    G = est.G_hat if G is None else np.asarray(G, dtype=float)
    if blocks is None and isinstance(p, Panel):
        blocks = p.blocks
    E = gls_residuals(est, p)
    W = vech_outer(((G / est.V_eps_hat[:, None]).T @ E).T)
    if blocks is None or len(np.unique(blocks)) == W.shape[0]:
        return W
    return np.asarray(block_matrix(blocks) @ W)


def omega_zstar_nonparametric(est: FaEstimate, p: Panel | np.ndarray, G=None,
                              blocks=None) -> np.ndarray:
    """``(1/n) sum_m vech(z*_m) vech(z*_m)'`` (p x p), PSD by construction."""
    Wb = zstar_block_vech(est, p, G=G, blocks=blocks)
    n = (p.n if isinstance(p, Panel) else np.asarray(p).shape[1])
    Om = Wb.T @ Wb / n
    return 0.5 * (Om + Om.T)


def lr_weights(omega, xmat: XMat, return_all: bool = False, rtol: float = 1e-6):
    """The ``df`` largest eigenvalues of ``M_X Omega M_X``.

    Parameters
    ----------
    omega : ndarray (p, p)
    xmat : XMat
    return_all : bool
        Also return all eigenvalues and the eigenvectors (for diagnostics
        and local-power calculations).
    """
    d = xmat.df
    if d <= 0:
        raise ValueError("no degrees of freedom left")
    M = xmat.M_X
    A = M @ np.asarray(omega, dtype=float) @ M
    w, V = sym_eig(A)
    mu = w[:d]
    if d < len(w) and w[d] > rtol * max(mu[0], 0):
        warnings.warn("M_X Omega M_X has more than df non-negligible eigenvalues", stacklevel=2)
    if np.any(mu <= 0):
        warnings.warn("non-positive weights in the null distribution", stacklevel=2)
    if return_all:
        return mu, w, V
    return mu


def local_noncentralities(omega, xmat: XMat, c: float, xi) -> tuple[np.ndarray, np.ndarray]:
    """Weights and noncentralities of the local-alternative law.

    With ``vech(Delta) = M_X vech(c xi xi')`` and eigenpairs ``(mu_j, v_j)``
    of ``M_X Omega M_X``, returns ``mu`` and ``lambda_j^2 = (v_j'vech(Delta))^2 / mu_j``.
    """
    xi = np.asarray(xi, dtype=float)
    mu, _, V = lr_weights(omega, xmat, return_all=True)
    dlt = xmat.M_X @ vech(c * np.outer(xi, xi))
    proj = V[:, : len(mu)].T @ dlt
    return mu, proj ** 2 / mu


# --------------------------------------------------- weighted chi-square


@dataclass(frozen=True)
class WeightedChiSq:
    """Law of ``sum_j w_j chi2(1, nc_j)``.

    ``noncentralities`` are the squared shifts ``lambda_j^2``.
    """

    weights: np.ndarray
    noncentralities: np.ndarray | None = None
    draws: int = 200_000
    seed: int = 0
    chunk: int = 50_000
    workers: int = 1

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if w.size == 0:
            raise ValueError("weighted chi-square needs at least one term")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be positive and finite")
        nc = np.zeros_like(w) if self.noncentralities is None else \
            np.atleast_1d(np.asarray(self.noncentralities, dtype=float))
        if nc.shape != w.shape or np.any(nc < 0):
            raise ValueError("noncentralities must be non-negative, one per weight")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noncentralities", nc)

    def sample(self) -> np.ndarray:
        """All ``draws`` simulated values, reproducible for a given seed.

        Each chunk of draws has its own RNG stream spawned from the seed,
        so results do not depend on ``workers``.
        """
        n_chunks = -(-self.draws // self.chunk)
        seqs = np.random.SeedSequence(self.seed).spawn(n_chunks)
        sizes = [min(self.chunk, self.draws - c * self.chunk) for c in range(n_chunks)]
        shift = np.sqrt(self.noncentralities)

        def run(c):
            rng = np.random.Generator(np.random.Philox(seqs[c]))
            X = rng.standard_normal((sizes[c], self.weights.size)) + shift
            return (X * X) @ self.weights

        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as ex:
                parts = list(ex.map(run, range(n_chunks)))
        else:
            parts = [run(c) for c in range(n_chunks)]
        return np.concatenate(parts)


def wchisq_pvalue(dist: WeightedChiSq, x: float) -> float:
    """Simulated ``P(sum_j w_j chi2(1, nc_j) > x)``."""
    if not np.isfinite(x):
        raise ValueError("statistic must be finite")
    return float(np.mean(dist.sample() > x))


def wchisq_quantile(dist: WeightedChiSq, q) -> np.ndarray:
    """Simulated quantiles at probabilities ``q``."""
    return np.quantile(dist.sample(), q)


def wchisq_sf(weights, x: float, noncentralities=None, epsabs: float = 1e-11) -> float:
    """Exact tail ``P(sum_j w_j chi2(1, nc_j) > x)`` by Imhof's inversion formula.

    The oscillating integrand ``sin(theta(u) - x u / 2) / (u rho(u))`` is
    split into sine and cosine Fourier integrals over ``[0, inf)`` handled
    by QUADPACK's QAWF routine. Its absolute accuracy is about ``epsabs``,
    so when the dominating tail ``P(max(w) chi2(df, sum nc) > x)`` is
    already below ``1e-12`` that upper bound is returned instead.
    """
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    nc = np.zeros_like(w) if noncentralities is None else np.atleast_1d(np.asarray(noncentralities, float))
    if w.size == 0 or np.any(w <= 0):
        raise ValueError("weights must be positive")
    if x <= 0:
        return 1.0
    if w.size == 1:
        return float(stats.ncx2.sf(x / w[0], 1, nc[0]) if nc[0] > 0 else stats.chi2.sf(x / w[0], 1))
    if np.ptp(w) <= 1e-14 * w.max() and not np.any(nc):
        return float(stats.chi2.sf(x / w[0], w.size))
    bound = stats.ncx2.sf(x / w.max(), w.size, nc.sum()) if np.any(nc) else stats.chi2.sf(x / w.max(), w.size)
    if bound < 1e-12:
        return float(bound)

    def theta_rho(u):
        wu = w * u
        a = 0.5 * np.sum(np.arctan(wu) + nc * wu / (1 + wu * wu))
        logrho = 0.25 * np.sum(np.log1p(wu * wu)) + 0.5 * np.sum(nc * wu * wu / (1 + wu * wu))
        return a, np.exp(-logrho) / u

    def f_sin(u):
        if u == 0.0:
            return 0.5 * np.sum(w * (1 + nc))
        a, r = theta_rho(u)
        return np.sin(a) * r

    def f_cos(u):
        if u == 0.0:
            return 0.0
        a, r = theta_rho(u)
        return np.cos(a) * r

    om = 0.5 * x
    # integrand near 0 is smooth; QAWF on [u0, inf) plus plain quad on [0, u0]
    u0 = 2 * np.pi / om
    head = integrate.quad(lambda u: (f_sin(u) * np.cos(om * u) - f_cos(u) * np.sin(om * u)),
                          0, u0, epsabs=epsabs, limit=200)[0]
    t1 = integrate.quad(f_sin, u0, np.inf, weight="cos", wvar=om, epsabs=epsabs, limlst=200)[0]
    t2 = integrate.quad(f_cos, u0, np.inf, weight="sin", wvar=om, epsabs=epsabs, limlst=200)[0]
    p = 0.5 + (head + t1 - t2) / np.pi
    return float(min(max(p, 0.0), 1.0))


# ------------------------------------------------------------ the test


@dataclass(frozen=True)
class LrTestResult:
    k: int
    lr: float
    df: int
    mu_hat: np.ndarray
    pvalue: float
    omega_source: str
    n: int = 0
    T: int = 0
    draws: int = 0
    seed: int = 0
    pvalue_method: str = "simulate"
    converged: bool = True
    heywood: bool = False
    spherical: bool = False


OMEGA_SOURCES = ("nonparametric", "parametric")


def _null_weights(est, p, omega_source, blocks=None):
    omega = omega_zstar_nonparametric(est, p, blocks=blocks)
    if est.spherical:
        xm = spherical_xmat(est.T - est.k)
    else:
        xm = build_xmat(est.G_hat)
    if omega_source == "nonparametric":
        return lr_weights(omega, xm)
    if omega_source == "parametric":
        from .variance_structure import parametric_mxomega

        fitted, _ = parametric_mxomega(est, omega, xmat=xm)
        mu, _, _ = lr_weights(fitted, xm, return_all=True)
        return mu
    raise ValueError(f"omega_source must be one of {OMEGA_SOURCES}")


def pvalue(weights, x, method="simulate", draws=200_000, seed=0, workers=1) -> float:
    if method == "simulate":
        return wchisq_pvalue(WeightedChiSq(weights, draws=draws, seed=seed, workers=workers), x)
    if method == "imhof":
        return wchisq_sf(weights, x)
    raise ValueError("method must be 'simulate' or 'imhof'")


def test_k(p: Panel | np.ndarray, k: int, omega_source: str = "nonparametric", *,
           draws: int = 200_000, seed: int = 0, pvalue_method: str = "simulate",
           spherical: bool = False, blocks=None, est: FaEstimate | None = None,
           workers: int = 1) -> LrTestResult:
    """Test ``H0: k`` latent factors.

    Parameters
    ----------
    p : Panel or ndarray (T, n)
    k : int
        Hypothesized number of factors, with ``df(T, k) > 0``.
    omega_source : {'nonparametric', 'parametric'}
        Block outer-product estimator, or its projection on the ARCH-type
        parametric structure.
    draws, seed : int
        Simulation budget and seed for the p-value.
    pvalue_method : {'simulate', 'imhof'}
    spherical : bool
        Use the spherical (PCA) fit and the constrained statistic.
    est : FaEstimate, optional
        Reuse an existing fit.
    """
    Y = p.Y if isinstance(p, Panel) else np.asarray(p, dtype=float)
    T, n = Y.shape
    d = df_fn(T, k)
    if d <= 0:
        raise ValueError(f"df(T={T}, k={k}) = {d}: nothing to test")
    if est is None:
        ybar, Yt = demean(Y)
        Vy = Yt @ Yt.T / n
        est = constrained_from_cov(Vy, k, n, ybar) if spherical else estimate_from_cov(Vy, k, n, ybar)
    lr = lr_statistic(est, n)
    mu = _null_weights(est, p, omega_source, blocks=blocks)
    pv = pvalue(mu, lr, pvalue_method, draws, seed, workers)
    return LrTestResult(k=k, lr=lr, df=len(mu), mu_hat=mu, pvalue=pv, omega_source=omega_source,
                        n=n, T=T, draws=draws if pvalue_method == "simulate" else 0, seed=seed,
                        pvalue_method=pvalue_method, converged=est.converged,
                        heywood=est.heywood, spherical=est.spherical)


@dataclass(frozen=True)
class Selection:
    k_hat: int
    alpha_n: float
    k_max: int
    trail: list = field(default_factory=list)


def select_k(p: Panel | np.ndarray, alpha_n: float | None = None, k_max: int | None = None,
             omega_source: str = "nonparametric", **kwargs) -> Selection:
    """Smallest ``k`` whose test does not reject at level ``alpha_n``.

    ``alpha_n`` defaults to ``10 / n``; ``k_max`` to the largest ``k`` with
    positive degrees of freedom. Returns ``k_max + 1`` when every test rejects.
    """
    Y = p.Y if isinstance(p, Panel) else np.asarray(p, dtype=float)
    T, n = Y.shape
    alpha_n = 10.0 / n if alpha_n is None else float(alpha_n)
    if not 0 < alpha_n <= 1:
        raise ValueError("alpha_n must lie in (0, 1]")
    top = max_factors(T)
    k_max = top if k_max is None else int(k_max)
    if not 0 <= k_max <= top:
        raise ValueError(f"k_max must be between 0 and {top} for T={T}")
    trail = []
    for k in range(k_max + 1):
        res = test_k(p, k, omega_source, **kwargs)
        trail.append(res)
        if res.pvalue > alpha_n:
            return Selection(k, alpha_n, k_max, trail)
    return Selection(k_max + 1, alpha_n, k_max, trail)


# ------------------------------------------------------ decomposition


@dataclass(frozen=True)
class VarianceDecomposition:
    total: np.ndarray
    systematic: np.ndarray
    idiosyncratic: np.ndarray
    avg_total: float
    avg_systematic: float
    avg_idiosyncratic: float
    r2: float
    r2_single: float | None
    vol_total: np.ndarray
    vol_systematic: np.ndarray
    vol_idiosyncratic: np.ndarray


def decompose(est: FaEstimate, single_factor: bool = True) -> VarianceDecomposition:
    """Split ``diag(Vy)`` into ``F_t'F_t`` and ``V_tt`` per period.

    ``r2`` is ``avg(F_t'F_t) / avg(Vy_tt)``; ``r2_single`` repeats it with a
    one-factor refit.
    """
    total = np.diag(est.Vy).copy()
    sysv = np.sum(est.F_hat ** 2, axis=1)
    idio = est.V_eps_hat.copy()
    r2 = float(np.clip(sysv.mean() / total.mean(), 0.0, 1.0))
    r2_single = None
    if single_factor and df_fn(est.T, 1) >= 0:
        one = est if est.k == 1 else estimate_from_cov(est.Vy, 1, est.n)
        r2_single = float(np.clip(np.sum(one.F_hat ** 2) / np.sum(total), 0.0, 1.0))
    return VarianceDecomposition(total, sysv, idio, float(total.mean()), float(sysv.mean()),
                                 float(idio.mean()), r2, r2_single, np.sqrt(total),
                                 np.sqrt(sysv), np.sqrt(idio))
