"""Numpy reference implementations of the hot kernels.

Signatures and results match the compiled ``_kernels`` module; the test suite
checks the two against each other.
"""
import numpy as np
from scipy.special import erfc

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def count_errors(a, b, labels, zeta0, zeta1, mu1, sigma1_sq, relu):
    """Number of misclassified rows for each realisation.

    a, b: (m, n) hidden pre-activation scale and mean; zeta0: (N, n) hidden
    noise; zeta1: (N, q) output noise; mu1, sigma1_sq: (q, n).
    """
    N = zeta0.shape[0]
    out = np.empty(N, dtype=np.int64)
    s1t = sigma1_sq.T
    m1t = mu1.T
    for h in range(N):
        y = a * zeta0[h] + b
        phi = np.maximum(y, 0.0) if relu else np.sin(y)
        mean = phi @ m1t
        var = (phi * phi) @ s1t
        F = mean + np.sqrt(var) * zeta1[h]
        out[h] = np.count_nonzero(np.argmax(F, axis=1) != labels)
    return out


def psi_max_stats(At, Mt, X):
    """Monte-Carlo statistics of psi(max_i (At X + Mt)_i) over rows of X.

    Returns ``(sum_psi, sum_psi_sq, grad_Mt, grad_At)`` where the gradients are
    those of ``sum_psi``; the argmax takes the lowest index on ties.
    """
    Xt = X @ At.T + Mt
    k = np.argmax(Xt, axis=1)
    u = Xt[np.arange(Xt.shape[0]), k]
    psi = 0.5 * erfc(u * _INV_SQRT2)
    w = -np.exp(-0.5 * u * u) * _INV_SQRT_2PI
    d = At.shape[0]
    gM = np.bincount(k, weights=w, minlength=d)
    onehot = np.zeros((X.shape[0], d))
    onehot[np.arange(X.shape[0]), k] = w
    gA = onehot.T @ X
    return float(psi.sum()), float(np.dot(psi, psi)), gM, gA
