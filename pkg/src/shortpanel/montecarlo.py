"""Simulation study of the LR test and of sequential factor selection.

Panels follow a three-factor model whose third factor has signal-to-noise
ratio ``n^{-kappa_bar}`` (absent when ``kappa_bar = inf``). Idiosyncratic
errors combine a common ARCH volatility path with unit-specific ARCH
dynamics. Loadings and unit parameters are drawn once per study; factor
paths are the outer replication level and panels the inner one.

Every random stream is derived from ``(seed, role, T, [n], path, [rep])``
through ``numpy.random.SeedSequence``, so results do not depend on the
number of workers or on task order.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import lr_inference as lri
from .fa_estimator import max_factors
from .panel_io import make_panel

BURN_IN = 200
KMAX_DEFAULT = {6: 2, 12: 7, 24: 17}

_POP, _PATH, _REP = 0, 1, 2


def _rng(*key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class DgpConfig:
    """One design cell.

    Parameters
    ----------
    n, T : int
    kappa_bar : float
        Weak-factor exponent; ``inf`` removes the third factor (null of
        two factors), ``0`` gives a strong third factor.
    k : int
        Number of potential factors (3).
    seed : int
    paths : int
        Factor-path draws (outer replications).
    reps : int
        Panels per factor path (inner replications).
    n_max : int, optional
        Size of the study-level population of units; the first ``n`` are used.
    """

    n: int
    T: int
    kappa_bar: float = math.inf
    k: int = 3
    seed: int = 0
    paths: int = 20
    reps: int = 500
    n_max: int | None = None

    def __post_init__(self):
        if self.n < 1 or self.T < 2 or self.reps < 1 or self.paths < 1:
            raise ValueError("n, reps and paths must be positive and T at least 2")
        if self.k != 3:
            raise ValueError("the design has exactly three potential factors")
        if not (self.kappa_bar >= 0):
            raise ValueError("kappa_bar must be nonnegative or inf")
        if self.n_max is not None and self.n_max < self.n:
            raise ValueError("n_max must be at least n")

    @property
    def snr(self) -> np.ndarray:
        third = 0.0 if math.isinf(self.kappa_bar) else self.n ** (-self.kappa_bar)
        return np.array([3.0, 2.0, third])


@dataclass(frozen=True)
class Population:
    """Unit-level draws shared by every cell of a study."""

    beta: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray


def draw_population(n_max: int, seed: int, k: int = 3) -> Population:
    rng = _rng(seed, _POP, n_max)
    return Population(beta=rng.standard_normal((n_max, k)), sigma=rng.uniform(1.0, 4.0, n_max),
                      alpha=rng.uniform(0.2, 0.5, n_max))


@dataclass(frozen=True)
class DgpDraw:
    F: np.ndarray
    beta: np.ndarray
    h: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    Y: np.ndarray

    @property
    def V_eps(self) -> np.ndarray:
        return self.h


def common_arch(T: int, rng, burn: int = BURN_IN) -> np.ndarray:
    """``h_t = 0.6 + 0.5 h_{t-1} z_{t-1}^2`` started at its mean 1.2, burn-in discarded."""
    z2 = rng.standard_normal(burn + T) ** 2
    h = 1.2
    out = np.empty(burn + T)
    for t in range(burn + T):
        out[t] = h
        h = 0.6 + 0.5 * h * z2[t]
    return out[burn:]


def unit_arch_errors(T: int, sigma, alpha, rng, burn: int = BURN_IN) -> np.ndarray:
    """``sqrt(h_it) z_it`` with ``h_it = sigma_i (1 - alpha_i) + alpha_i h_{i,t-1} z_{i,t-1}^2``.

    Returns a ``T x n`` array; each unit starts at its unconditional
    variance ``sigma_i``.
    """
    n = sigma.size
    z = rng.standard_normal((burn + T, n))
    c = sigma * (1 - alpha)
    h = sigma.copy()
    out = np.empty((T, n))
    for t in range(burn + T):
        if t >= burn:
            out[t - burn] = np.sqrt(h) * z[t]
        h = c + alpha * h * z[t] ** 2
    return out


def factor_path(cfg: DgpConfig, path: int):
    """Common ARCH path ``h`` and factor values with exact signal-to-noise ratios.

    ``F = V^{1/2} U Gamma^{1/2}`` with ``U`` the orthonormalized Gaussian
    draw, so ``F' V^{-1} F / T = diag(snr)``. The draw depends on
    ``(seed, T, path)`` only, so cells differing in ``n`` or ``kappa_bar``
    share factor directions.
    """
    rng = _rng(cfg.seed, _PATH, cfg.T, path)
    h = common_arch(cfg.T, rng)
    Ft = rng.standard_normal((cfg.T, cfg.k))
    w, V = np.linalg.eigh(Ft.T @ Ft)
    U = Ft @ (V / np.sqrt(w)) @ V.T
    F = np.sqrt(h)[:, None] * U * np.sqrt(cfg.T * cfg.snr)
    return F, h


def generate(cfg: DgpConfig, path: int = 0, rep: int = 0, population: Population | None = None) -> DgpDraw:
    """Panel ``Y = F beta' + eps`` for one (path, rep) of a cell."""
    pop = draw_population(cfg.n_max or cfg.n, cfg.seed) if population is None else population
    if pop.beta.shape[0] < cfg.n:
        raise ValueError("population smaller than n")
    beta, sigma, alpha = pop.beta[: cfg.n], pop.sigma[: cfg.n], pop.alpha[: cfg.n]
    F, h = factor_path(cfg, path)
    rng = _rng(cfg.seed, _REP, cfg.T, cfg.n, path, rep)
    eps = np.sqrt(h)[:, None] * unit_arch_errors(cfg.T, sigma, alpha, rng)
    return DgpDraw(F=F, beta=beta, h=h, sigma=sigma, alpha=alpha, Y=F @ beta.T + eps)


# ----------------------------------------------------------------- tables


@dataclass(frozen=True)
class CellResult:
    """Replication outcomes of one cell.

    ``pvalues`` and ``k_hat`` are ``paths x reps`` (NaN / -1 where a
    replication failed).
    """

    n: int
    T: int
    kappa_bar: float
    k_test: int
    alpha: float
    pvalues: np.ndarray = field(repr=False)
    k_hat: np.ndarray = field(repr=False)
    errors: int

    def rejection(self, alpha: float | None = None) -> np.ndarray:
        """Per-path rejection frequencies."""
        a = self.alpha if alpha is None else alpha
        ok = np.isfinite(self.pvalues)
        return np.sum((self.pvalues <= a) & ok, axis=1) / np.maximum(ok.sum(axis=1), 1)

    @property
    def rate(self) -> float:
        ok = np.isfinite(self.pvalues)
        return float(np.sum((self.pvalues <= self.alpha) & ok) / max(ok.sum(), 1))

    @property
    def rate_sd(self) -> float:
        return float(np.std(self.rejection(), ddof=1)) if self.pvalues.shape[0] > 1 else 0.0

    @property
    def mean_k_hat(self) -> float | None:
        ok = self.k_hat >= 0
        return float(self.k_hat[ok].mean()) if ok.any() else None

    @property
    def k_hat_sd(self) -> float | None:
        ok = self.k_hat >= 0
        if not ok.any() or self.k_hat.shape[0] < 2:
            return None
        per = [row[m].mean() for row, m in zip(self.k_hat, ok) if m.any()]
        return float(np.std(per, ddof=1)) if len(per) > 1 else None

    def summary(self) -> dict:
        return {"n": self.n, "T": self.T,
                "kappa_bar": "inf" if math.isinf(self.kappa_bar) else self.kappa_bar,
                "k_test": self.k_test, "alpha": self.alpha,
                "paths": int(self.pvalues.shape[0]), "reps": int(self.pvalues.shape[1]),
                "rejection_pct": 100 * self.rate, "rejection_sd_pct": 100 * self.rate_sd,
                "mean_k_hat": self.mean_k_hat, "k_hat_sd": self.k_hat_sd, "errors": self.errors}


def _one_path(cfg: DgpConfig, path: int, k_test: int, selection: bool, k_max: int,
              pvalue_method: str, draws: int, omega_source: str):
    pop = draw_population(cfg.n_max or cfg.n, cfg.seed)
    pv = np.full(cfg.reps, np.nan)
    kh = np.full(cfg.reps, -1)
    errors = 0
    opts = dict(pvalue_method=pvalue_method, draws=draws)
    with warnings.catch_warnings():
        # per-replication convergence and sign warnings would flood a batch run
        warnings.simplefilter("ignore")
        for r in range(cfg.reps):
            errors += _one_rep(cfg, path, r, pop, pv, kh, k_test, selection, k_max, omega_source, opts)
    return pv, kh, errors


def _one_rep(cfg, path, r, pop, pv, kh, k_test, selection, k_max, omega_source, opts) -> int:
    """Fill ``pv[r]`` and ``kh[r]``; returns 1 on a failed replication."""
    p = make_panel(generate(cfg, path, r, pop).Y)
    try:
        res = None
        if selection:
            sel = lri.select_k(p, 10.0 / cfg.n, k_max, omega_source, seed=r, **opts)
            kh[r] = sel.k_hat
            res = next((t for t in sel.trail if t.k == k_test), None)
        if res is None:
            res = lri.test_k(p, k_test, omega_source, seed=r, **opts)
        pv[r] = res.pvalue
    except (ValueError, np.linalg.LinAlgError):
        return 1
    return 0


def run_cell(cfg: DgpConfig, k_test: int = 2, alpha: float = 0.05, selection: bool = True,
             k_max: int | None = None, pvalue_method: str = "imhof", draws: int = 5000,
             omega_source: str = "parametric", workers: int = 1) -> CellResult:
    """Rejection frequency of ``LR(k_test)`` and, optionally, selected ``k``."""
    return run_table([cfg], k_test, alpha, selection, k_max, pvalue_method, draws,
                     omega_source, workers)[0]


def run_table(cfgs, k_test: int = 2, alpha: float = 0.05, selection: bool = True,
              k_max: int | None = None, pvalue_method: str = "imhof", draws: int = 5000,
              omega_source: str = "parametric", workers: int = 1) -> list[CellResult]:
    """Run every cell; tasks are (cell, path) pairs spread over ``workers`` processes.

    ``k_max`` defaults to 2 / 7 / 17 for T = 6 / 12 / 24 and to the largest
    testable number of factors otherwise. Results are identical for any
    number of workers.
    """
    cfgs = list(cfgs)
    tasks = []
    for c in cfgs:
        km = k_max if k_max is not None else KMAX_DEFAULT.get(c.T, max_factors(c.T))
        for path in range(c.paths):
            tasks.append((c, path, k_test, selection, km, pvalue_method, draws, omega_source))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_star, tasks, chunksize=1))
    else:
        outs = [_one_path(*t) for t in tasks]
    results, i = [], 0
    for c in cfgs:
        chunk = outs[i: i + c.paths]
        i += c.paths
        results.append(CellResult(n=c.n, T=c.T, kappa_bar=c.kappa_bar, k_test=k_test, alpha=alpha,
                                  pvalues=np.stack([o[0] for o in chunk]),
                                  k_hat=np.stack([o[1] for o in chunk]),
                                  errors=sum(o[2] for o in chunk)))
    return results


def _star(args):
    return _one_path(*args)


PRESETS = {
    "appendix-c": dict(n_list=(500, 1000, 5000), t_list=(6, 12, 24), kappa_list=(math.inf, 0.0, 0.5)),
    "null-size": dict(n_list=(500, 1000, 5000), t_list=(6, 12), kappa_list=(math.inf,)),
    "local-power": dict(n_list=(500, 1000, 5000), t_list=(6, 12), kappa_list=(0.5,)),
}


def preset_grid(name: str, paths: int = 20, reps: int = 500, seed: int = 0, n_list=None,
                t_list=None, kappa_list=None) -> list[DgpConfig]:
    """Cells of a named design; explicit lists override the preset."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    ns = tuple(n_list or spec["n_list"])
    n_max = max(ns)
    return [DgpConfig(n=n, T=T, kappa_bar=kb, seed=seed, paths=paths, reps=reps, n_max=n_max)
            for kb in (kappa_list or spec["kappa_list"])
            for T in (t_list or spec["t_list"]) for n in ns]


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))


def with_reps(cfgs, paths: int, reps: int):
    return [replace(c, paths=paths, reps=reps) for c in cfgs]
