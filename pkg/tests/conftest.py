import numpy as np
import pytest


def factor_panel(T, n, k, rng, snr=(3.0, 2.0, 1.5, 1.0), hetero=True, sigma=None):
    """Panel with k factors, time-varying idiosyncratic variances and
    cross-sectionally heterogeneous scale. Returns (Y, F, h, sigma)."""
    h = rng.uniform(0.5, 2.0, T) if hetero else np.ones(T)
    if k:
        Ft = rng.standard_normal((T, k))
        w, V = np.linalg.eigh(Ft.T @ Ft)
        U = Ft @ V @ np.diag(w ** -0.5) @ V.T
        F = np.sqrt(h)[:, None] * U * np.sqrt(T * np.asarray(snr[:k]))[None, :]
        B = rng.standard_normal((n, k))
    else:
        F = np.zeros((T, 0))
        B = np.zeros((n, 0))
    if sigma is None:
        sigma = rng.uniform(1.0, 4.0, n) if hetero else np.ones(n)
    eps = np.sqrt(h)[:, None] * rng.standard_normal((T, n)) * np.sqrt(sigma)[None, :]
    return F @ B.T + eps, F, h, sigma


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def arch_errors(T, n, alpha, sigma, rng, burn=200):
    """Individual ARCH(1) errors with unconditional variances ``sigma``."""
    alpha = np.broadcast_to(alpha, (n,))
    c = sigma * (1 - alpha)
    h = np.array(sigma, dtype=float)
    z = rng.standard_normal(n)
    out = np.empty((T, n))
    for s in range(burn + T):
        h = c + alpha * h * z ** 2
        z = rng.standard_normal(n)
        if s >= burn:
            out[s - burn] = np.sqrt(h) * z
    return out
