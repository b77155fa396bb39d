import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import optimize
from sklearn.utils.estimator_checks import check_get_params_invariance

from conftest import factor_panel
from shortpanel.fa_estimator import (
    FLOOR_RTOL,
    ShortPanelFactorAnalysis,
    constrained_estimate_spherical,
    constrained_from_cov,
    df,
    df_table,
    estimate,
    estimate_from_cov,
    loglik_gaussian,
    max_factors,
    refit_eigen,
)
from shortpanel.panel_io import make_panel, sample_cov


def direct_ml(Vy, k, start_psi):
    # oracle: BFGS on the unrestricted parameters (F, log V) of the likelihood
    T = Vy.shape[0]
    w, U = np.linalg.eigh(Vy)
    F0 = U[:, -k:] * np.sqrt(np.maximum(w[-k:] - start_psi.mean(), 1e-3))

    def nll(x):
        F = x[: T * k].reshape(T, k)
        psi = np.exp(x[T * k:])
        return -loglik_gaussian(Vy, F @ F.T + np.diag(psi))

    res = optimize.minimize(nll, np.concatenate([F0.ravel(), np.log(start_psi)]),
                            method="BFGS", options={"gtol": 1e-10, "maxiter": 20000})
    F = res.x[: T * k].reshape(T, k)
    return F @ F.T, np.exp(res.x[T * k:]), -res.fun


def test_df_examples():
    assert df(20, 7) == 71
    assert df(4, 1) == 2
    assert df(6, 2) == 4
    assert df(6, 3) == 0
    assert [df(20, k) for k in range(1, 8)] == [170, 151, 133, 116, 100, 85, 71]
    assert {T: max_factors(T) for T in (6, 12, 20, 24)} == {6: 2, 12: 7, 20: 14, 24: 17}


def test_df_table_max_factor_bounds():
    tab = df_table(range(1, 25))
    ge0 = [0, 0, 1, 1, 2, 3, 3, 4, 5, 6, 6, 7, 8, 9, 10, 10, 11, 12, 13, 14, 15, 15, 16, 17]
    gt0 = [0, 0, 1, 2, 2, 3, 4, 5, 5, 6, 7, 8, 9, 9, 10, 11, 12, 13, 14, 14, 15, 16, 17]
    assert [tab[T]["df>=0"] for T in range(1, 25)] == ge0
    assert [tab[T]["df>0"] for T in range(2, 25)] == gt0


def test_k_too_large_rejected():
    Y = np.random.default_rng(0).standard_normal((6, 100))
    with pytest.raises(ValueError):
        estimate(Y, 4)


def test_k0_closed_form(rng):
    Y, *_ = factor_panel(8, 400, 2, rng)
    est = estimate(Y, 0)
    Vy = sample_cov(Y)
    assert_allclose(est.V_eps_hat, np.diag(Vy))
    d = np.diag(Vy) ** -0.5
    expected = np.sort(np.linalg.eigvalsh(d[:, None] * Vy * d[None, :]))[::-1] - 1
    assert_allclose(est.gamma_hat, expected, atol=1e-12)
    assert est.F_hat.shape == (8, 0)


@pytest.mark.parametrize("T,n,k", [(6, 500, 1), (6, 800, 2), (12, 1000, 2), (10, 600, 3)])
def test_matches_direct_likelihood_maximization(T, n, k):
    rng = np.random.default_rng(T * 100 + k)
    Y, *_ = factor_panel(T, n, k, rng)
    est = estimate(Y, k)
    assert est.converged
    FF, psi, ll = direct_ml(est.Vy, k, np.diag(est.Vy) * 0.5)
    assert_allclose(est.V_eps_hat, psi, rtol=1e-5)
    assert_allclose(est.F_hat @ est.F_hat.T, FF, rtol=1e-5, atol=1e-6 * np.abs(FF).max())
    assert est.loglik >= ll - 1e-9


def test_first_order_conditions(rng):
    Y, *_ = factor_panel(12, 2000, 3, rng)
    est = estimate(Y, 3)
    Vinv = 1 / est.V_eps_hat
    # normalization and diagonal matching
    FtVF = est.F_hat.T @ (est.F_hat * Vinv[:, None])
    assert_allclose(FtVF, np.diag(est.gamma_hat[:3]), atol=1e-9 * est.gamma_hat[0])
    assert np.all(np.diff(est.gamma_hat[:3]) < 0)
    assert_allclose(np.diag(est.Vy), np.diag(est.sigma()), rtol=1e-8)
    # G orthogonality in the V^{-1} metric
    assert_allclose(est.F_hat.T @ (est.G_hat * Vinv[:, None]), 0, atol=1e-9)
    assert_allclose(est.G_hat.T @ (est.G_hat * Vinv[:, None]), np.eye(9), atol=1e-10)
    assert abs(np.sum(est.gamma_hat[3:])) < 1e-8
    # eigen step at the converged V reproduces F (signs fixed by convention)
    F2, _ = refit_eigen(est)
    assert_allclose(F2, est.F_hat, atol=1e-10)
    # F columns are eigenvectors of Vy V^{-1}
    M = est.Vy * Vinv[None, :]
    assert_allclose(M @ est.F_hat, est.F_hat * (1 + est.gamma_hat[:3]), rtol=1e-8, atol=1e-8)


def test_local_maximum(rng):
    Y, *_ = factor_panel(6, 1000, 2, rng)
    est = estimate(Y, 2)
    base = est.loglik
    for t in range(6):
        for s in (-1e-4, 1e-4):
            psi = est.V_eps_hat.copy()
            psi[t] *= 1 + s
            pert = est.F_hat @ est.F_hat.T + np.diag(psi)
            assert loglik_gaussian(est.Vy, pert) <= base + 1e-10
    for j in range(2):
        for s in (-1e-4, 1e-4):
            F = est.F_hat.copy()
            F[:, j] *= 1 + s
            assert loglik_gaussian(est.Vy, F @ F.T + np.diag(est.V_eps_hat)) <= base + 1e-10


def test_scale_equivariance(rng):
    Y, *_ = factor_panel(8, 700, 2, rng)
    a = estimate(Y, 2)
    b = estimate(3.0 * Y, 2)
    assert_allclose(b.V_eps_hat, 9 * a.V_eps_hat, rtol=1e-7)
    assert_allclose(b.F_hat, 3 * a.F_hat, rtol=1e-7, atol=1e-9)
    assert_allclose(b.gamma_hat, a.gamma_hat, rtol=1e-7, atol=1e-9)


def test_unit_permutation_invariance(rng):
    Y, *_ = factor_panel(8, 700, 2, rng)
    perm = rng.permutation(700)
    a = estimate(Y, 2)
    b = estimate(Y[:, perm], 2)
    assert_allclose(b.V_eps_hat, a.V_eps_hat, rtol=1e-9)
    assert_allclose(b.F_hat, a.F_hat, rtol=1e-8, atol=1e-10)
    assert_allclose(b.gamma_hat, a.gamma_hat, atol=1e-10)


def test_consistency_improves_with_n():
    errs = []
    for n in (500, 5000):
        rng = np.random.default_rng(7)
        Y, F, h, sigma = factor_panel(6, n, 2, rng, hetero=True)
        est = estimate(Y, 2)
        pop = F @ F.T + np.diag(h * sigma.mean())
        errs.append(np.max(np.abs(est.sigma() - pop)))
    assert errs[1] < errs[0]


def test_null_eigenvalues_shrink_at_root_n():
    rng = np.random.default_rng(3)
    Y, *_ = factor_panel(10, 5000, 2, rng, hetero=False)
    est = estimate(Y, 2)
    assert np.all(np.abs(est.gamma_hat[2:]) < 10 / np.sqrt(5000))


def test_heywood_case_flagged():
    # r12 * r13 / r23 > 1 forces a unit uniqueness for the first variable
    Vy = np.array([[1, 0.8, 0.8], [0.8, 1, 0.5], [0.8, 0.5, 1]])
    est = estimate_from_cov(Vy, 1)
    assert est.heywood and est.converged
    assert_allclose(est.V_eps_hat[0], FLOOR_RTOL * np.diag(Vy).mean())
    assert_allclose(est.V_eps_hat[1:], 0.36, rtol=1e-6)
    assert_allclose(np.abs(est.F_hat.ravel()), [1.0, 0.8, 0.8], rtol=1e-6)


def test_heywood_fit_of_underfitted_panel_converges_quickly():
    # two factors fitted to three: one variance runs to the boundary at a sublinear rate
    from shortpanel import montecarlo as mc

    cfg = mc.DgpConfig(n=5000, T=6, kappa_bar=0.0)
    Y = mc.generate(cfg, path=18, rep=0).Y
    est = estimate(Y, 2)
    assert est.heywood and est.converged
    assert est.iterations < 1000
    Vy = sample_cov(Y)
    assert est.V_eps_hat.min() == pytest.approx(FLOOR_RTOL * np.diag(Vy).mean())


def test_eigen_step_accurate_with_tiny_variance(rng):
    from shortpanel.fa_estimator import _scaled_eig

    A = rng.standard_normal((6, 40))
    Vy = A @ A.T / 40
    psi = np.diag(Vy) * 0.3
    psi[2] = 1e-9 * psi.mean()
    gamma, U, H = _scaled_eig(Vy, psi)
    assert_allclose(U.T @ U, np.eye(6), atol=1e-10)
    assert gamma[0] > 1e8
    # eigen relation in the form V Vy^{-1} h = h / (1 + gamma), free of division by V
    lhs = psi[:, None] * np.linalg.solve(Vy, H)
    for j in np.flatnonzero(gamma > 0):
        assert_allclose(lhs[:, j], H[:, j] / (1 + gamma[j]), atol=1e-13 * np.abs(H[:, j]).max())


def test_spherical_reduces_to_pca(rng):
    Y, *_ = factor_panel(8, 900, 1, rng, hetero=False)
    est = constrained_estimate_spherical(Y, 1)
    delta = np.sort(np.linalg.eigvalsh(est.Vy))[::-1]
    s2 = delta[1:].mean()
    assert_allclose(est.V_eps_hat, s2)
    assert_allclose(est.F_hat.T @ est.F_hat, [[delta[0] - s2]], rtol=1e-10)
    assert_allclose(est.gamma_hat, delta / s2 - 1, rtol=1e-10, atol=1e-12)


def test_spherical_identity_covariance():
    est = constrained_from_cov(np.eye(5), 1)
    assert_allclose(est.V_eps_hat, 1.0)
    assert_allclose(est.gamma_hat, 0.0, atol=1e-14)


def test_spherical_loglik_gap_is_bounded_under_sphericity():
    gaps = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        Y, *_ = factor_panel(6, 2000, 1, rng, hetero=False)
        a = estimate(Y, 1)
        c = constrained_estimate_spherical(Y, 1)
        gaps.append(2000 * (a.loglik - c.loglik))
    assert min(gaps) >= -1e-8
    assert max(gaps) < 30


def test_sklearn_wrapper(rng):
    Y, *_ = factor_panel(6, 400, 2, rng)
    X = Y.T
    fa = ShortPanelFactorAnalysis(n_factors=2).fit(X)
    est = estimate(Y, 2)
    assert_allclose(fa.noise_variance_, est.V_eps_hat)
    B = fa.transform(X)
    assert B.shape == (400, 2)
    # GLS loadings reproduce the systematic part projection
    Fw = est.F_hat / est.V_eps_hat[:, None]
    expected = np.linalg.solve(est.F_hat.T @ Fw, Fw.T @ (Y - Y.mean(1, keepdims=True))).T
    assert_allclose(B, expected, atol=1e-10)
    assert np.isfinite(fa.score(X))
    assert fa.get_params()["n_factors"] == 2
    check_get_params_invariance("ShortPanelFactorAnalysis", fa)
    with pytest.raises(Exception):
        ShortPanelFactorAnalysis().transform(X)


def test_estimate_accepts_panel(rng):
    Y, *_ = factor_panel(6, 300, 1, rng)
    a = estimate(make_panel(Y), 1)
    b = estimate_from_cov(sample_cov(Y), 1, n=300)
    assert_allclose(a.V_eps_hat, b.V_eps_hat)
    assert a.n == 300
