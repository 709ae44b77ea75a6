"""Expected 0-1 loss of a Gaussian output law, with gradients in (M, Q).

Gradients with respect to Q are taken along symmetric perturbations: the
returned ``grad_Q`` is symmetric and ``dL = sum_ij grad_Q[i, j] dQ[i, j]``.
Labels are 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from . import kernels
from .errors import SingularCovarianceError
from .gaussnet import GaussianOutput, HyperParams, forward_batch, forward_grads_batch

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class LossValue:
    value: float
    grad_M: np.ndarray
    grad_Q: np.ndarray
    mc_stderr: float = 0.0


@dataclass(frozen=True)
class CholeskyFactor:
    A: np.ndarray
    jitter_used: float = 0.0


def _check_label(label, q):
    if not 0 <= int(label) < q:
        raise ValueError(f"label {label} out of range for {q} classes")
    return int(label)


def binary_terms(M, Q, labels):
    """Vectorised binary loss over a batch.

    M: (B, 2), Q: (B, 2, 2), labels: (B,). Returns (values, grad_M, grad_Q).
    Rows with zero difference variance get the hard step loss and zero gradient.
    """
    M = np.asarray(M, float)
    Q = np.asarray(Q, float)
    labels = np.asarray(labels, dtype=np.int64)
    B = M.shape[0]
    rows = np.arange(B)
    other = 1 - labels
    margin = M[rows, labels] - M[rows, other]
    v = Q[:, 0, 0] + Q[:, 1, 1] - 2.0 * Q[:, 0, 1]
    good = v > 0
    sd = np.sqrt(np.where(good, v, 1.0))
    z = margin / sd
    values = np.where(good, 0.5 * erfc(z / np.sqrt(2.0)), (margin <= 0).astype(float))
    dz = np.where(good, -np.exp(-0.5 * z * z) * _INV_SQRT_2PI, 0.0)
    grad_M = np.zeros((B, 2))
    grad_M[rows, labels] = dz / sd
    grad_M[rows, other] = -dz / sd
    dv = dz * (-0.5 * z / np.where(good, v, 1.0))
    grad_Q = np.empty((B, 2, 2))
    grad_Q[:, 0, 0] = dv
    grad_Q[:, 1, 1] = dv
    grad_Q[:, 0, 1] = -dv
    grad_Q[:, 1, 0] = -dv
    return values, grad_M, grad_Q


def binary_loss(out: GaussianOutput, label: int) -> LossValue:
    """Closed-form probability of misclassifying a two-class Gaussian output."""
    M = np.asarray(out.M, float)
    if M.shape != (2,):
        raise ValueError("binary_loss needs q = 2")
    label = _check_label(label, 2)
    v, gM, gQ = binary_terms(M[None], np.asarray(out.Q, float)[None], np.array([label]))
    return LossValue(value=float(v[0]), grad_M=gM[0], grad_Q=gQ[0], mc_stderr=0.0)


def cholesky_with_jitter(Q) -> CholeskyFactor:
    Q = np.asarray(Q, float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError("Q must be square")
    if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * (1 + np.abs(Q).max())):
        raise ValueError("Q must be symmetric")
    try:
        return CholeskyFactor(A=np.linalg.cholesky(Q), jitter_used=0.0)
    except np.linalg.LinAlgError:
        pass
    q = Q.shape[0]
    scale = np.trace(Q) / q
    if not scale > 0:
        raise SingularCovarianceError("covariance has non-positive trace")
    eye = np.eye(q)
    for exponent in range(-12, -5):
        jitter = scale * 10.0**exponent
        try:
            return CholeskyFactor(A=np.linalg.cholesky(Q + jitter * eye), jitter_used=float(jitter))
        except np.linalg.LinAlgError:
            continue
    raise SingularCovarianceError("covariance is not positive definite even with maximal jitter")


def cholesky_backward(A, grad_A):
    """Symmetric gradient on Q = A A^T given the gradient on the lower factor A."""
    P = np.tril(A.T @ grad_A)
    P[np.diag_indices_from(P)] *= 0.5
    Ainv = np.linalg.solve(A, np.eye(A.shape[0])) if A.shape[0] else A
    G = Ainv.T @ P @ Ainv
    return 0.5 * (G + G.T)


def _label_perm(q, label):
    perm = np.arange(q)
    perm[label], perm[q - 1] = q - 1, label
    return perm


def multiclass_loss(out: GaussianOutput, label: int, samples: int = 10_000, seed: int = 0, rng=None) -> LossValue:
    """Monte-Carlo estimate of the misclassification probability for any q >= 2.

    After moving the label to the last coordinate and factoring Q = A A^T, the
    success probability is E[psi(max_i Xt_i)] with ``Xt = At X + Mt`` and
    psi the standard normal survival function. The gradient is pathwise through
    the same draws, differentiating the max at its (lowest-index) argmax.
    """
    M = np.asarray(out.M, float)
    Q = np.asarray(out.Q, float)
    q = M.shape[0]
    if q < 2:
        raise ValueError("need at least two classes")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    label = _check_label(label, q)
    perm = _label_perm(q, label)
    Mp = M[perm]
    Qp = Q[np.ix_(perm, perm)]
    if not np.any(Qp):
        # point mass at M: same hard step rule as the binary case, ties count as errors
        wrong = float(not Mp[q - 1] > Mp[: q - 1].max())
        return LossValue(value=wrong, grad_M=np.zeros(q), grad_Q=np.zeros((q, q)), mc_stderr=0.0)
    chol = cholesky_with_jitter(Qp)
    A = chol.A
    d = q - 1
    aqq = A[d, d]
    At = np.ascontiguousarray((A[:d, :d] - A[d, :d][None, :]) / aqq)
    Mt = np.ascontiguousarray((Mp[:d] - Mp[d]) / aqq)

    rng = rng if rng is not None else np.random.default_rng(seed)
    X = rng.standard_normal((samples, d))
    s_psi, s_sq, gMt, gAt = kernels.psi_max_stats(At, Mt, X)
    mean_psi = s_psi / samples
    value = 1.0 - mean_psi
    var = max(s_sq / samples - mean_psi * mean_psi, 0.0) * samples / max(samples - 1, 1)
    stderr = float(np.sqrt(var / samples))

    # gradients of the loss (= -mean psi) with respect to Mt, At
    gMt = -np.asarray(gMt) / samples
    gAt = -np.asarray(gAt) / samples
    gMp = np.zeros(q)
    gMp[:d] = gMt / aqq
    gMp[d] = -gMt.sum() / aqq
    gA = np.zeros((q, q))
    gA[:d, :d] = gAt / aqq
    gA[d, :d] = -gAt.sum(axis=0) / aqq
    gA[d, d] = -(np.dot(gMt, Mt) + np.sum(gAt * At)) / aqq
    gQp = cholesky_backward(A, np.tril(gA))

    grad_M = np.empty(q)
    grad_M[perm] = gMp
    grad_Q = np.empty((q, q))
    grad_Q[np.ix_(perm, perm)] = gQp
    return LossValue(value=float(value), grad_M=grad_M, grad_Q=grad_Q, mc_stderr=stderr)


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one example of a batch."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def gaussian_losses(M, Q, labels, samples: int = 10_000, seed: int = 0, indices=None, workers: int = 1):
    """Per-example losses and gradients for a batch of Gaussian outputs.

    Uses the closed form for q = 2 and the seeded Monte-Carlo estimator otherwise;
    example ``i`` draws from the stream ``(seed, indices[i])``, so the result does
    not depend on ``workers``.
    """
    M = np.asarray(M, float)
    Q = np.asarray(Q, float)
    labels = np.asarray(labels, dtype=np.int64)
    B, q = M.shape
    if q == 2:
        v, gM, gQ = binary_terms(M, Q, labels)
        return v, gM, gQ, np.zeros(B)
    indices = np.arange(B) if indices is None else np.asarray(indices)
    values = np.empty(B)
    errs = np.empty(B)
    gM = np.empty((B, q))
    gQ = np.empty((B, q, q))

    def one(i):
        return multiclass_loss(GaussianOutput(M[i], Q[i]), labels[i], samples=samples,
                               rng=example_rng(seed, indices[i]))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(B)))
    else:
        results = [one(i) for i in range(B)]
    for i, lv in enumerate(results):
        values[i], errs[i], gM[i], gQ[i] = lv.value, lv.mc_stderr, lv.grad_M, lv.grad_Q
    return values, gM, gQ, errs


@dataclass(frozen=True)
class BatchLoss:
    value: float
    grad_mu0: np.ndarray
    grad_mu1: np.ndarray
    mc_stderr: float = 0.0


def batch_expected_loss(hp: HyperParams, X, labels, samples_per_example: int = 10_000, seed: int = 0,
                        indices=None, workers: int = 1) -> BatchLoss:
    """Mean Gaussian-limit 0-1 loss over a batch with gradients on the trainable means."""
    X = np.asarray(X, float)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-d array")
    B = X.shape[0]
    M, Q, cache = forward_batch(hp, X)
    v, gM, gQ, errs = gaussian_losses(M, Q, labels, samples_per_example, seed, indices, workers)
    g_mu0, g_mu1 = forward_grads_batch(hp, cache, gM / B, gQ / B)
    stderr = float(np.sqrt(np.sum(errs**2)) / B)
    return BatchLoss(value=float(v.mean()), grad_mu0=g_mu0, grad_mu1=g_mu1, mc_stderr=stderr)
