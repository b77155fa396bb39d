import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import arch_errors, factor_panel
from shortpanel import lr_inference as lri
from shortpanel import variance_structure as vs
from shortpanel.core_linalg import vech
from shortpanel.fa_estimator import estimate


@pytest.mark.parametrize("T", [2, 3, 6, 12])
def test_basis_identity(T):
    b = vs.omega_basis(T)
    v = b.vech_identity
    total = 3 * b.D0 + sum(b.D(h) for h in range(1, T)) - np.outer(v, v)
    assert_allclose(total, np.eye(T * (T + 1) // 2), atol=1e-15)


def test_basis_patterns():
    b = vs.omega_basis(5)
    for M in [b.D0, *b.D_tilde, *b.D_bar]:
        assert_allclose(M, M.T)
        assert set(np.round(np.unique(M), 12)) <= {0.0, 0.5, 1.0}
    for h in range(4):
        for g in range(h + 1, 4):
            assert not np.any((b.D_bar[h] != 0) & (b.D_bar[g] != 0))
    # Dbar(h) picks out the off-diagonal coordinates at lag h
    assert_allclose(sum(np.trace(B) for B in b.D_bar), 10)


def fitted(T=8, k=2, n=800, seed=0):
    rng = np.random.default_rng(seed)
    Y, *_ = factor_panel(T, n, k, rng)
    return Y, estimate(Y, k)


def test_r_matrix_and_kernel_structure():
    Y, est = fitted()
    R = vs.r_matrix(est)
    assert_allclose(R.T @ R, np.eye(R.shape[1]), atol=1e-10)
    Q = est.G_hat / np.sqrt(est.V_eps_hat)[:, None]
    S = np.random.default_rng(1).standard_normal((8, 8))
    S = S + S.T
    assert_allclose(R.T @ vech(S), vech(Q.T @ S @ Q), atol=1e-12)
    M = lri.build_xmat(est.G_hat).M_X
    b = vs.omega_basis(8)
    assert np.abs(M @ R.T @ b.D0).max() < 1e-8
    for h in range(7):
        assert np.abs(M @ R.T @ b.D_tilde[h] @ R @ M).max() < 1e-8


def test_regression_recovers_exact_parameters():
    Y, est = fitted(T=8)
    T = 8
    psi = np.array([0.4, 0.5, 0.25, 0.12, 0.06, 0.03, 0.01, 0.0])
    qk, xk = 1.3, 0.7
    b = vs.omega_basis(T)
    truth = vs.ArchParams(psi, qk, xk, psi[1:] + qk, np.zeros(T + 1))
    Om = vs.parametric_omega(truth, b)
    R = vs.r_matrix(est)
    v = vech(np.eye(T - 2))
    Omz = R.T @ Om @ R + (qk + xk) * np.outer(v, v)
    fit, par = vs.parametric_mxomega(est, Omz)
    assert_allclose(par.psi, psi, atol=1e-8)
    assert par.q_plus_kappa == pytest.approx(qk)
    assert par.xi_minus_kappa == pytest.approx(xk)
    assert_allclose(par.level, psi[1:] + qk, atol=1e-8)
    M = lri.build_xmat(est.G_hat).M_X
    assert_allclose(fit, M @ Omz @ M, atol=1e-10)


def test_identify_theta():
    par = vs.identify_theta(np.array([3.0, 1.0, 1.0, 1.0, 1.0, 0.0]))
    assert par.q_plus_kappa == 1.0
    assert_allclose(par.psi, 0.0)
    with pytest.raises(ValueError, match="identified"):
        vs.identify_theta(np.ones(6), assume_psi_last_zero=False)
    with pytest.warns(UserWarning):
        assert vs.identify_theta(np.array([0.0, -1.0, 0.0, 0.0])).negative


def test_gaussian_levels_flat():
    # the longest lag rests on one pair of periods; T = 12 keeps it informative
    rng = np.random.default_rng(3)
    Y, *_ = factor_panel(12, 5000, 2, rng, hetero=False)
    est = estimate(Y, 2)
    _, par = vs.parametric_mxomega(est, lri.omega_zstar_nonparametric(est, Y))
    assert np.ptp(par.level) < 0.2 * np.mean(par.level)


def test_arch_levels_decay_geometrically():
    rng = np.random.default_rng(4)
    T, n, alpha = 8, 20000, 0.3
    sigma = np.ones(n)
    F = np.linspace(1, 2, T)[:, None]
    Y = F @ rng.standard_normal((1, n)) + arch_errors(T, n, alpha, sigma, rng)
    est = estimate(Y, 1)
    _, par = vs.parametric_mxomega(est, lri.omega_zstar_nonparametric(est, Y))
    # psi(h) = 2 alpha^h / (1 - 3 alpha^2) with the identifying psi(T-1) = 0
    expect = 2 * alpha ** np.arange(1, 4) / (1 - 3 * alpha ** 2)
    assert_allclose(par.psi[1:4], expect, atol=0.12)
    slope = np.polyfit(np.arange(1, 4), np.log(par.psi[1:4]), 1)[0]
    assert abs(slope - np.log(alpha)) < 0.4
    assert par.q_plus_kappa == pytest.approx(1.0, rel=0.15)


def test_parametric_and_nonparametric_agree_under_structure():
    rng = np.random.default_rng(5)
    Y, *_ = factor_panel(8, 5000, 2, rng)
    est = estimate(Y, 2)
    Om = lri.omega_zstar_nonparametric(est, Y)
    fit, _ = vs.parametric_mxomega(est, Om)
    M = lri.build_xmat(est.G_hat).M_X
    gap = np.linalg.norm(fit - M @ Om @ M, 2)
    # sampling error of the nonparametric estimate, by resampling units
    W = lri.zstar_block_vech(est, Y)
    boot = []
    for _ in range(100):
        Wb = W[rng.integers(0, W.shape[0], W.shape[0])]
        boot.append(np.linalg.norm(M @ (Wb.T @ Wb / W.shape[0] - Om) @ M, 2))
    assert gap < 3 * np.sqrt(np.mean(np.square(boot)))


def test_se_homogeneity_and_rate():
    Y, est = fitted(T=8, n=2000, seed=6)
    se = vs.veps_standard_errors(est, Y)
    est3 = estimate(3 * Y, 2)
    assert_allclose(vs.veps_standard_errors(est3, 3 * Y), 9 * se, rtol=1e-6)
    rng = np.random.default_rng(7)
    ratios = []
    for _ in range(10):
        a, *_ = factor_panel(8, 500, 2, rng, hetero=False)
        b, *_ = factor_panel(8, 2000, 2, rng, hetero=False)
        ratios.append(np.mean(vs.veps_standard_errors(estimate(a, 2), a))
                      / np.mean(vs.veps_standard_errors(estimate(b, 2), b)))
    assert np.mean(ratios) == pytest.approx(2.0, rel=0.1)
    with pytest.raises(ValueError):
        vs.veps_standard_errors(est, Y, omega_source="bogus")


def test_se_coverage_gaussian_homoskedastic():
    rng = np.random.default_rng(8)
    T, n = 6, 1000
    F = np.array([[1.0, 0.2], [1.5, -0.5], [0.8, 1.0], [1.2, 0.4], [0.9, -1.0], [1.1, 0.7]]) * 1.5
    V = np.array([1.0, 0.5, 1.5, 0.8, 1.2, 1.0])
    cover = []
    for _ in range(500):
        Y = F @ rng.standard_normal((2, n)) + np.sqrt(V)[:, None] * rng.standard_normal((T, n))
        est = estimate(Y, 2)
        se = vs.veps_standard_errors(est, Y)
        cover.append(np.abs(est.V_eps_hat - V) <= 1.96 * se)
    rate = np.mean(cover)
    assert 0.90 <= rate <= 0.98
