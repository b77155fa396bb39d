"""Numerical checks of the monotone likelihood ratio (MLR) property.

Under local alternatives the LR statistic converges to
``sum_j mu_j chi2(1, lambda_j^2)``. The test is uniformly most powerful
among invariant tests when the density ratio of this law to its central
version increases in ``z``. With weights normalized so that ``min mu = 1``
and ``nu_j = 1 - mu_1 / mu_j`` (ascending), the ratio is a power series in
``z`` whose coefficients ``kappa_m`` are built from
``c_l(lambda) = E[Q^l] / l!``, ``Q = (1/2) sum_j (sqrt(nu_j) X_j + sqrt(1 - nu_j) lambda_j)^2``.
Nonnegative ``kappa_m`` for all ``m`` is sufficient for MLR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

KAPPA_RTOL = 1e-12


@dataclass(frozen=True)
class MlrProblem:
    """Weights ``nu`` (sorted ascending, ``nu[0] = 0``) and shifts ``lam``.

    Parameters
    ----------
    nu : array-like
        Values in ``[0, 1)``; sorted on construction, with ``lam``
        permuted accordingly.
    lam : array-like
        Nonnegative shifts ``lambda_j`` (not squared).
    M : int
        Highest order of the ``kappa_m`` checks.
    series_len : int or None
        Truncation of the density series; chosen adaptively when None.
    """

    nu: np.ndarray
    lam: np.ndarray
    M: int = 16
    series_len: int | None = None

    def __post_init__(self):
        nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if nu.shape != lam.shape or nu.ndim != 1 or nu.size == 0:
            raise ValueError("nu and lam must be non-empty vectors of equal length")
        if np.any(nu < 0) or np.any(nu >= 1):
            raise ValueError("nu must lie in [0, 1)")
        if np.any(lam < 0):
            raise ValueError("lam must be nonnegative")
        order = np.argsort(nu, kind="stable")
        nu, lam = nu[order], lam[order]
        if nu[0] != 0.0:
            raise ValueError("the smallest nu must be 0 (weights normalized by their minimum)")
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "lam", lam)

    @property
    def df(self) -> int:
        return self.nu.size

    @classmethod
    def from_weights(cls, mu, lam, **kw) -> "MlrProblem":
        """Build from raw weights ``mu_j > 0``; ``lam`` follows the order of ``mu``."""
        mu = np.asarray(mu, dtype=float)
        if np.any(mu <= 0):
            raise ValueError("weights must be positive")
        return cls(1.0 - mu.min() / mu, lam, **kw)

    def at_null(self) -> "MlrProblem":
        return MlrProblem(self.nu, np.zeros_like(self.lam), self.M, self.series_len)


# ---------------------------------------------------------- c-coefficients


def _a_coeffs(nu, lam2, L):
    """``a_i = (1/2) sum_j nu_j^i [nu_j + (i+1)(1-nu_j) lam2_j]`` for i < L, batched on axis 0."""
    i = np.arange(L)
    with np.errstate(divide="ignore", invalid="ignore"):
        pw = np.where(i == 0, 1.0, nu[..., None] ** i)  # (..., df, L)
    return 0.5 * np.sum(pw * (nu[..., None] + (i + 1) * (1 - nu[..., None]) * lam2[..., None]), axis=-2)


def c_coeffs(problem: MlrProblem, L: int, lam=None) -> np.ndarray:
    """``c_0..c_L`` from the convolution recursion.

    ``c_{l+1} = (1/(l+1)) sum_{i<=l} a_i c_{l-i}``; all terms are
    nonnegative. Use :func:`log_c_coeffs` when ``c_L`` may overflow.
    """
    return np.exp(log_c_coeffs(problem, L, lam))


def log_c_coeffs(problem: MlrProblem, L: int, lam=None) -> np.ndarray:
    """``log c_0..log c_L``, accumulated with log-sum-exp."""
    if L < 0:
        raise ValueError("L must be nonnegative")
    lam = problem.lam if lam is None else np.asarray(lam, dtype=float)
    a = _a_coeffs(problem.nu, lam ** 2, max(L, 1))
    with np.errstate(divide="ignore"):
        la = np.log(a)
    lc = np.empty(L + 1)
    lc[0] = 0.0
    for l in range(L):
        lc[l + 1] = logsumexp(la[: l + 1] + lc[l::-1]) - math.log(l + 1)
    return lc


def _c_batch(nu, lam2, L):
    """Batched ``c_0..c_L`` in linear scale, shape (n, L + 1)."""
    a = _a_coeffs(nu, lam2, L)
    c = np.zeros(nu.shape[:-1] + (L + 1,))
    c[..., 0] = 1.0
    for l in range(L):
        c[..., l + 1] = np.sum(a[..., : l + 1] * c[..., l::-1], axis=-1) / (l + 1)
    return c


# ------------------------------------------------------------------ kappa


def _gamma_weights(df, M):
    """``W[k, l] = Gamma(d/2)^2 / (Gamma(d/2 + k) Gamma(d/2 + l))``."""
    k = np.arange(M + 1)
    lg = gammaln(df / 2 + k) - gammaln(df / 2)
    return np.exp(-(lg[:, None] + lg[None, :]))


def _kappa_terms(cl, c0, df, m):
    W = _gamma_weights(df, m)
    ks = np.arange(m // 2 + 1, m + 1)
    ls = m - ks
    return (ks - ls) * W[ks, ls] * (cl[..., ks] * c0[..., ls] - cl[..., ls] * c0[..., ks])


def kappa_m(problem: MlrProblem, m: int) -> float:
    """``kappa_m = sum_{k>l>=0, k+l=m} (k-l) Gamma-ratio [c_k(lam) c_l(0) - c_l(lam) c_k(0)]``."""
    if m < 1:
        raise ValueError("m must be at least 1")
    cl = c_coeffs(problem, m)
    c0 = c_coeffs(problem, m, lam=np.zeros(problem.df))
    return float(np.sum(_kappa_terms(cl, c0, problem.df, m)))


def kappa_all(nu, lam, M: int = 16):
    """``kappa_1..kappa_M`` and the matching absolute-term scales, batched.

    ``nu`` and ``lam`` have shape (n, df) or (df,).
    """
    nu = np.asarray(nu, dtype=float)
    lam = np.asarray(lam, dtype=float)
    df = nu.shape[-1]
    cl = _c_batch(nu, lam ** 2, M)
    c0 = _c_batch(nu, np.zeros_like(lam), M)
    kap = np.empty(nu.shape[:-1] + (M,))
    scale = np.empty_like(kap)
    for m in range(1, M + 1):
        t = _kappa_terms(cl, c0, df, m)
        kap[..., m - 1] = t.sum(-1)
        W = _gamma_weights(df, m)
        ks = np.arange(m // 2 + 1, m + 1)
        ls = m - ks
        scale[..., m - 1] = np.sum((ks - ls) * W[ks, ls]
                                   * (cl[..., ks] * c0[..., ls] + cl[..., ls] * c0[..., ks]), -1)
    return kap, scale


def kappa_violations(kap, scale, m_min: int = 3):
    """Boolean mask of ``kappa_m < -1e-12 * scale`` for ``m >= m_min``."""
    return kap[..., m_min - 1:] < -KAPPA_RTOL * scale[..., m_min - 1:]


# ------------------------------------------------------ sufficient condition


def sufficient_condition(problem: MlrProblem, i_max: int = 200) -> bool:
    """Closed-form sufficient condition for ``kappa_m >= 0``, all ``m >= 3``.

    For ``df = 2``: ``lam_1^2 + (1-nu_2) lam_2^2 >= nu_2`` and
    ``(1-nu_2) lam_2^2 >= nu_2 / 2``. For ``df >= 3`` the family of
    linear inequalities indexed by ``i >= 0`` is checked up to
    ``max(i_max, i*)``, where beyond ``i*`` a bound on both sides
    guarantees the remaining inequalities.
    """
    nu, lam2 = problem.nu, problem.lam ** 2
    d = problem.df
    if d == 1:
        return True
    if d == 2:
        a = (1 - nu[1]) * lam2[1]
        return bool(lam2[0] + a >= nu[1] and a >= 0.5 * nu[1])
    nmax = nu[-1]
    if nmax == 0.0:
        return True
    rho = nu[1:-1] / nmax
    w = (1 - nu[1:-1]) * lam2[1:-1]
    last = (1 - nmax) * lam2[-1]
    ones = rho >= 1.0
    tail_lhs = last + np.sum(w[ones])
    deficit = d - 2 - np.count_nonzero(ones)
    if deficit == 0:
        return True  # right-hand side vanishes identically
    if tail_lhs <= 0:
        return False  # left side decays geometrically, right side like 1/i
    i_star = int(math.ceil(nmax * deficit / tail_lhs))
    top = max(i_max, i_star)
    for start in range(0, top + 1, 100_000):
        i = np.arange(start, min(top, start + 99_999) + 1)[:, None]
        lhs = (i[:, 0] == 0) * lam2[0] + np.sum(rho ** i * w, axis=1) + last
        rhs = nmax / (i[:, 0] + 1) * (d - 2 - np.sum(rho ** (i + 1), axis=1))
        if np.any(lhs < rhs):
            return False
    return True


# ---------------------------------------------------------- density ratio


@dataclass(frozen=True)
class Monotonicity:
    monotone: bool
    first_decrease: float | None
    series_len: int
    log_ratio: np.ndarray = field(repr=False)


def _log_series(lc, df, z):
    k = np.arange(lc.size)
    lw = lc + gammaln(df / 2) - k * math.log(2.0) - gammaln(df / 2 + k)
    with np.errstate(divide="ignore", invalid="ignore"):
        lz = np.log(z)
        terms = lw[None, :] + np.where(k[None, :] == 0, 0.0, k[None, :] * lz[:, None])
    return logsumexp(terms, axis=1), terms


def _tail_ok(tot, terms, tail_tol):
    """Last terms decay and a geometric bound on the remainder is below ``tail_tol``."""
    last, prev = terms[:, -1], terms[:, -2]
    with np.errstate(invalid="ignore"):
        ratio = np.where(np.isneginf(last), 0.0, np.exp(last - prev))
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = last - np.log1p(-np.minimum(ratio, 1 - 1e-16)) - tot
    return not (np.any(ratio >= 1) or np.any(bound > math.log(tail_tol)))


def _adaptive(evaluate, fixed, start, max_len):
    L = fixed if fixed is not None else start
    while True:
        out = evaluate(L)
        if out is not None:
            return L, out
        if fixed is not None or L >= max_len:
            raise ValueError(f"series truncated at {L} terms is not accurate on the grid; "
                             "increase series_len")
        L = min(2 * L, max_len)


def density_ratio_monotone(problem: MlrProblem, z_grid=None, rtol: float = 1e-10,
                           tail_tol: float = 1e-12, max_len: int = 20_000) -> Monotonicity:
    """Scan ``Psi(z) = sum c_k(lam) psi_k(z) / sum c_k(0) psi_k(z)`` on a grid.

    ``psi_k(z) = Gamma(d/2) z^k / (2^k Gamma(d/2 + k))``. The truncation
    length doubles until the last terms are below ``tail_tol`` of the sum
    at every grid point and decay geometrically. The true density ratio
    is ``exp(-sum lam^2 / 2) Psi(z)``.

    Raises
    ------
    ValueError
        If a user-fixed ``series_len`` (or ``max_len``) is insufficient.
    """
    z = np.arange(0.0, 60.0 + 1e-9, 0.05) if z_grid is None else np.asarray(z_grid, dtype=float)
    d = problem.df
    zeros = np.zeros(d)
    pos = z > 0

    def evaluate(L):
        num, tn = _log_series(log_c_coeffs(problem, L), d, z)
        den, td = _log_series(log_c_coeffs(problem, L, lam=zeros), d, z)
        if _tail_ok(num[pos], tn[pos], tail_tol) and _tail_ok(den[pos], td[pos], tail_tol):
            return num - den
        return None

    L, lr = _adaptive(evaluate, problem.series_len, 200, max_len)
    dec = np.flatnonzero(np.diff(lr) < -rtol * np.maximum(1.0, np.abs(lr[1:])))
    first = float(z[dec[0] + 1]) if dec.size else None
    return Monotonicity(dec.size == 0, first, L, lr)


def series_density(problem: MlrProblem, z, tail_tol: float = 1e-14, max_len: int = 50_000) -> np.ndarray:
    """Density of ``sum_j chi2(1, lam_j^2) / (1 - nu_j)`` from the chi-square mixture series.

    ``f(z) = sum_k c_k g(z; df + 2k) / E[exp(Q)]`` with ``g`` the central
    chi-square density; the normalizer
    ``prod_j (1 - nu_j)^{-1/2} exp(sum_j lam_j^2 / 2)`` is exact, so the
    integral of the truncated series measures the truncation error.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    d = problem.df
    lognorm = -0.5 * np.sum(np.log1p(-problem.nu)) + 0.5 * np.sum(problem.lam ** 2)
    cache = {}

    def lc(L):
        if L not in cache:
            cache[L] = log_c_coeffs(problem, L)
        return cache[L]

    out = np.zeros_like(z)
    # at the origin only the k = 0 term can be nonzero
    out[z == 0] = {1: np.inf, 2: 0.5 * math.exp(-lognorm)}.get(d, 0.0)
    idx = np.flatnonzero(z > 0)
    start = 200
    for chunk in np.array_split(idx[np.argsort(z[idx])], max(1, idx.size // 512)):
        zc = z[chunk]
        lz = np.log(zc)[:, None]

        def evaluate(L):
            half = d / 2 + np.arange(L + 1)
            terms = lc(L) + (half - 1) * lz - zc[:, None] / 2 - half * math.log(2.0) - gammaln(half)
            tot = logsumexp(terms, axis=1)
            return tot if _tail_ok(tot, terms, tail_tol) else None

        start, tot = _adaptive(evaluate, problem.series_len, start, max_len)
        out[chunk] = np.exp(tot - lognorm)
    return out


# ----------------------------------------------------------------- report


@dataclass(frozen=True)
class MlrReport:
    kappa: np.ndarray
    first_violation: int | None
    sufficient_condition_holds: bool
    monotone: bool | None
    first_decrease: float | None


def check(problem: MlrProblem, scan_density: bool = True, z_grid=None) -> MlrReport:
    """All checks for one problem: ``kappa_1..kappa_M``, the sufficient
    condition and the density-ratio scan."""
    kap, scale = kappa_all(problem.nu, problem.lam, problem.M)
    viol = np.flatnonzero(kappa_violations(kap, scale))
    first = int(viol[0] + 3) if viol.size else None
    suff = sufficient_condition(problem)
    mono = density_ratio_monotone(problem, z_grid) if scan_density else None
    return MlrReport(kap, first, suff, None if mono is None else mono.monotone,
                     None if mono is None else mono.first_decrease)


# ------------------------------------------------------------------- scans


def draw_problems(df: int, nu_bar: float, lambda_lo: float, lambda_hi: float, n: int, rng,
                  lambda_draw: str = "squared"):
    """``nu_1 = 0`` and ``nu_j ~ U[0, nu_bar]`` for j >= 2.

    With ``lambda_draw='squared'`` the squared shifts are uniform on
    ``[lo^2, hi^2]``; with ``'linear'`` the shifts are uniform on ``[lo, hi]``.
    """
    nu = np.zeros((n, df))
    if df > 1:
        nu[:, 1:] = rng.uniform(0.0, nu_bar, (n, df - 1))
    if lambda_draw == "squared":
        lam = np.sqrt(rng.uniform(lambda_lo ** 2, lambda_hi ** 2, (n, df)))
    elif lambda_draw == "linear":
        lam = rng.uniform(lambda_lo, lambda_hi, (n, df))
    else:
        raise ValueError("lambda_draw must be 'squared' or 'linear'")
    return nu, lam


@dataclass(frozen=True)
class ScanResult:
    df: int
    nu_bar: float
    lambda_lo: float
    lambda_hi: float
    M: int
    n_draws: int
    violations: int
    seed: int
    lambda_draw: str = "squared"

    @property
    def per_mille(self) -> float:
        return 1000.0 * self.violations / self.n_draws

    def ci(self, level: float = 0.95) -> tuple[float, float]:
        """Clopper-Pearson interval for the violation frequency, in per mille."""
        from scipy.stats import binomtest

        ci = binomtest(self.violations, self.n_draws).proportion_ci(level, method="exact")
        return 1000.0 * ci.low, 1000.0 * ci.high


def violation_scan(df: int, nu_bar: float, lambda_lo: float, lambda_hi: float = 7.0, M: int = 16,
                   n_draws: int = 100_000, seed: int = 0, chunk: int = 20_000,
                   lambda_draw: str = "squared") -> ScanResult:
    """Count draws with some ``kappa_m < 0``, ``3 <= m <= M``.

    See :func:`draw_problems` for the sampling design. Violations
    concentrate at small shifts, so the frequency depends strongly on
    whether shifts or squared shifts are drawn uniformly.

    Draws are generated in chunks with independent spawned streams, so
    counts are reproducible for a given seed.
    """
    if df < 1 or not 0 <= nu_bar < 1 or not 0 <= lambda_lo <= lambda_hi:
        raise ValueError("invalid scan bounds")
    n_chunks = -(-n_draws // chunk)
    seqs = np.random.SeedSequence(seed).spawn(n_chunks)
    count = 0
    for c in range(n_chunks):
        size = min(chunk, n_draws - c * chunk)
        rng = np.random.Generator(np.random.Philox(seqs[c]))
        nu, lam = draw_problems(df, nu_bar, lambda_lo, lambda_hi, size, rng, lambda_draw)
        kap, scale = kappa_all(nu, lam, M)
        count += int(np.count_nonzero(kappa_violations(kap, scale).any(axis=1)))
    return ScanResult(df, nu_bar, lambda_lo, lambda_hi, M, n_draws, count, seed, lambda_draw)
