"""One-hidden-layer stochastic network and its infinite-width Gaussian limit.

Weights are independent Gaussians. Matrices are stored in absorbed scaling,
``mu0 = m0 / sqrt(p)``, ``sigma0 = s0 / sqrt(p)``, ``mu1 = m1 / sqrt(n)``,
``sigma1 = s1 / sqrt(n)``, so a realisation is simply ``W = mu + sigma * eps``.
The ``unscaled`` view recovers ``(m0, s0, m1, s1)``.
"""
from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .errors import CheckpointError
from .moments import ActivationKind, MomentSet, as_activation, mean_square_db, moments

CHECKPOINT_VERSION = 1
KAPPA = 4.0


@dataclass(frozen=True)
class HyperParams:
    mu0: np.ndarray
    sigma0: np.ndarray
    mu1: np.ndarray
    sigma1: np.ndarray
    activation: ActivationKind = ActivationKind.RELU
    lineage: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "activation", as_activation(self.activation))
        n, p = np.shape(self.mu0)
        q = np.shape(self.mu1)[0]
        if np.shape(self.sigma0) != (n, p) or np.shape(self.mu1) != (q, n) or np.shape(self.sigma1) != (q, n):
            raise ValueError("inconsistent hyper-parameter shapes")
        if n < 1 or p < 1 or q < 2:
            raise ValueError(f"need p, n >= 1 and q >= 2, got p={p}, n={n}, q={q}")
        if not (np.all(self.sigma0 > 0) and np.all(self.sigma1 > 0)):
            raise ValueError("standard deviations must be strictly positive")

    @property
    def dims(self) -> tuple[int, int, int]:
        n, p = self.mu0.shape
        return p, n, self.mu1.shape[0]

    def unscaled(self):
        """(m0, s0, m1, s1) with the 1/sqrt(p), 1/sqrt(n) factors removed."""
        p, n, _ = self.dims
        rp, rn = np.sqrt(p), np.sqrt(n)
        return self.mu0 * rp, self.sigma0 * rp, self.mu1 * rn, self.sigma1 * rn

    def with_means(self, mu0, mu1, note: str | None = None) -> "HyperParams":
        lineage = self.lineage + ((note,) if note else ())
        return replace(self, mu0=np.asarray(mu0, float), mu1=np.asarray(mu1, float), lineage=lineage)

    def sample_weights(self, rng: np.random.Generator):
        """One full realisation (W0, W1) of the stochastic parameters."""
        w0 = self.mu0 + self.sigma0 * rng.standard_normal(self.mu0.shape)
        w1 = self.mu1 + self.sigma1 * rng.standard_normal(self.mu1.shape)
        return w0, w1


def init_hyperparams(p: int, n: int, q: int, activation="relu", seed: int = 0) -> HyperParams:
    """Means iid N(0, 1) and standard deviations 1 before absorbing the width factors."""
    if p < 1 or n < 1 or q < 2:
        raise ValueError(f"invalid dims p={p}, n={n}, q={q}")
    rng = np.random.default_rng(seed)
    m0 = rng.standard_normal((n, p))
    m1 = rng.standard_normal((q, n))
    return HyperParams(
        mu0=m0 / np.sqrt(p),
        sigma0=np.full((n, p), 1.0 / np.sqrt(p)),
        mu1=m1 / np.sqrt(n),
        sigma1=np.full((q, n), 1.0 / np.sqrt(n)),
        activation=activation,
        lineage=(f"init:seed={seed}",),
    )


@dataclass(frozen=True)
class HiddenMoments:
    a: np.ndarray
    b: np.ndarray
    moments: MomentSet


@dataclass(frozen=True)
class GaussianOutput:
    M: np.ndarray
    Q: np.ndarray


@dataclass(frozen=True)
class ForwardCache:
    """Per-batch quantities reused by the backward pass."""

    X: np.ndarray
    a: np.ndarray
    b: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    dm1_db: np.ndarray
    dm2_db: np.ndarray


def _as_batch(hp: HyperParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != hp.dims[0]:
        raise ValueError(f"expected inputs with {hp.dims[0]} features, got shape {np.shape(X)}")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs must be finite")
    return X


def preactivations(hp: HyperParams, X):
    """Per-node (a, b) for a batch: a_j^2 = sum_k (sigma0_jk x_k)^2, b_j = sum_k mu0_jk x_k."""
    X = _as_batch(hp, X)
    a = np.sqrt((X * X) @ (hp.sigma0 * hp.sigma0).T)
    b = X @ hp.mu0.T
    return a, b


def hidden_moments(hp: HyperParams, x) -> HiddenMoments:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("hidden_moments takes a single input vector")
    a, b = preactivations(hp, x)
    return HiddenMoments(a=a[0], b=b[0], moments=moments(hp.activation, a[0], b[0]))


def forward_batch(hp: HyperParams, X):
    """Gaussian-limit output law for every row of X.

    Returns ``(M, Q, cache)`` with M of shape (B, q) and Q of shape (B, q, q).
    """
    X = _as_batch(hp, X)
    a, b = preactivations(hp, X)
    m1, m2, dm1, dm2 = mean_square_db(hp.activation, a, b)
    var = np.maximum(m2 - m1 * m1, 0.0)
    M = m1 @ hp.mu1.T
    s1sq = hp.sigma1 * hp.sigma1
    diag = m2 @ s1sq.T
    Q = np.einsum("bj,ij,kj->bik", var, hp.mu1, hp.mu1, optimize=True)
    idx = np.arange(hp.dims[2])
    Q[:, idx, idx] += diag
    Q = 0.5 * (Q + np.swapaxes(Q, 1, 2))
    return M, Q, ForwardCache(X=X, a=a, b=b, m1=m1, m2=m2, dm1_db=dm1, dm2_db=dm2)


def forward(hp: HyperParams, x) -> GaussianOutput:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward takes a single input vector; use forward_batch for batches")
    M, Q, _ = forward_batch(hp, x)
    return GaussianOutput(M=M[0], Q=Q[0])


def forward_grads_batch(hp: HyperParams, cache: ForwardCache, dM, dQ):
    """Reverse-mode pass from (dL/dM, dL/dQ) per row to summed (dL/dmu0, dL/dmu1).

    ``dQ`` must be symmetric per row; it is the gradient with respect to
    symmetric perturbations of Q. Standard deviations are frozen, so ``a`` is
    treated as a constant.
    """
    dM = np.asarray(dM, float)
    dQ = np.asarray(dQ, float)
    B = cache.X.shape[0]
    p, n, q = hp.dims
    if dM.shape != (B, q) or dQ.shape != (B, q, q):
        raise ValueError("gradient shapes do not match the cached batch")
    m1, m2 = cache.m1, cache.m2
    var = m2 - m1 * m1
    s1sq = hp.sigma1 * hp.sigma1
    mu1 = hp.mu1

    g_m1 = dM @ mu1
    g_mu1 = dM.T @ m1

    dQ_diag = np.diagonal(dQ, axis1=1, axis2=2)
    g_m2 = dQ_diag @ s1sq
    GQmu = dQ @ mu1  # (B, q, n)
    g_var = np.einsum("bin,in->bn", GQmu, mu1)
    g_mu1 += 2.0 * np.einsum("bin,bn->in", GQmu, var)

    g_m2 = g_m2 + g_var
    g_m1 = g_m1 - 2.0 * m1 * g_var
    g_b = g_m1 * cache.dm1_db + g_m2 * cache.dm2_db
    g_mu0 = g_b.T @ cache.X
    return g_mu0, g_mu1


def forward_grads(hp: HyperParams, x, dL_dM, dL_dQ):
    """Gradient of a scalar L(M(x), Q(x)) with respect to (mu0, mu1) for one input."""
    dL_dQ = np.asarray(dL_dQ, float)
    if dL_dQ.ndim != 2 or not np.allclose(dL_dQ, dL_dQ.T, rtol=0, atol=1e-12 * (1 + np.abs(dL_dQ).max())):
        raise ValueError("dL_dQ must be a symmetric q x q matrix")
    _, _, cache = forward_batch(hp, np.asarray(x, float))
    return forward_grads_batch(hp, cache, np.asarray(dL_dM, float)[None, :], dL_dQ[None, :, :])


def _zeta_streams(seed: int):
    hidden, output = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(hidden), np.random.default_rng(output)


def sample_outputs(hp: HyperParams, x, count: int, seed: int = 0, chunk: int = 4096) -> np.ndarray:
    """Exact draws of F(x) through the two-stage sampler.

    Stage one draws the n hidden pre-activations ``a_j z + b_j``; stage two draws
    each output from its conditional Gaussian with mean ``sum_j mu1_ij phi_j``
    and variance ``sum_j (sigma1_ij phi_j)^2``.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    x = np.asarray(x, float)
    a, b = preactivations(hp, x)
    a, b = a[0], b[0]
    p, n, q = hp.dims
    rng_h, rng_o = _zeta_streams(seed)
    s1sq = hp.sigma1 * hp.sigma1
    out = np.empty((count, q))
    for start in range(0, count, chunk):
        stop = min(start + chunk, count)
        z0 = rng_h.standard_normal((stop - start, n))
        z1 = rng_o.standard_normal((stop - start, q))
        phi = hp.activation(a * z0 + b)
        mean = phi @ hp.mu1.T
        var = (phi * phi) @ s1sq.T
        out[start:stop] = mean + np.sqrt(var) * z1
    return out


def sample_error_counts(hp: HyperParams, X, labels, count: int, seed: int = 0, chunk: int = 64, workers: int = 1):
    """Misclassification counts over the whole set X for each of ``count`` realisations.

    Every realisation shares its hidden-node and output noise across examples,
    so each example sees an exact draw of its own output law. Work is split in
    fixed chunks and reduced in order, so results do not depend on ``workers``.
    """
    a, b = preactivations(hp, X)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    p, n, q = hp.dims
    rng_h, rng_o = _zeta_streams(seed)
    s1sq = np.ascontiguousarray(hp.sigma1 * hp.sigma1)
    mu1 = np.ascontiguousarray(hp.mu1)
    relu = hp.activation is ActivationKind.RELU
    a = np.ascontiguousarray(a)
    b = np.ascontiguousarray(b)

    def blocks():
        for start in range(0, count, chunk):
            stop = min(start + chunk, count)
            yield rng_h.standard_normal((stop - start, n)), rng_o.standard_normal((stop - start, q))

    def run(block):
        z0, z1 = block
        return kernels.count_errors(a, b, labels, z0, z1, mu1, s1sq, relu)

    parts = []
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            wave = []
            for blk in blocks():
                wave.append(blk)
                if len(wave) == workers:
                    parts.extend(pool.map(run, wave))
                    wave = []
            parts.extend(pool.map(run, wave))
    else:
        parts = [run(blk) for blk in blocks()]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


@dataclass(frozen=True)
class BentkusDiagnostic:
    H: float
    Theta: float
    B_upper: float
    convex_set_gap: float


def bentkus_from_moments(m2, abs3, m1_unscaled, s1_unscaled) -> BentkusDiagnostic:
    """Finite-width bound from per-node moments and unscaled output-layer parameters."""
    m2 = np.asarray(m2, float)
    abs3 = np.asarray(abs3, float)
    m1_unscaled = np.asarray(m1_unscaled, float)
    s1_unscaled = np.asarray(s1_unscaled, float)
    q, n = s1_unscaled.shape
    Hj = ((2.0 * np.abs(s1_unscaled) ** 3 + 8.0 * np.abs(m1_unscaled) ** 3) * abs3).sum(axis=0)
    H = float(Hj.mean())
    Theta = float((m2 * (s1_unscaled**2).min(axis=0)).mean())
    if Theta > 0:
        B = np.sqrt(q) * H / Theta**1.5
        gap = KAPPA * q**0.25 * B / np.sqrt(n)
    else:
        B = gap = np.inf
    return BentkusDiagnostic(H=H, Theta=Theta, B_upper=float(B), convex_set_gap=float(gap))


def bentkus_diagnostic(hp: HyperParams, x) -> BentkusDiagnostic:
    """Upper bound on the convex-set distance between F(x) and its Gaussian limit."""
    x = np.asarray(x, float)
    if not np.any(x != 0):
        raise ValueError("the finite-width bound needs a non-zero input")
    hm = hidden_moments(hp, x)
    _, _, m1u, s1u = hp.unscaled()
    return bentkus_from_moments(hm.moments.m2, hm.moments.abs3, m1u, s1u)


def lazy_distance(hp: HyperParams, hp0: HyperParams) -> float:
    """Squared Frobenius distance of all unscaled hyper-parameters."""
    if hp.dims != hp0.dims:
        raise ValueError("dimension mismatch")
    return float(sum(np.sum((u - v) ** 2) for u, v in zip(hp.unscaled(), hp0.unscaled())))


# -- checkpoints -----------------------------------------------------------

_ARRAYS = ("mu0", "sigma0", "mu1", "sigma1")


def _digest(arrays: dict, meta: dict) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(meta, sort_keys=True).encode())
    for name in _ARRAYS:
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(path, hp: HyperParams, prior: HyperParams | None = None, extra: dict | None = None) -> str:
    """Write hyper-parameters (and optionally the prior) to an ``.npz`` file.

    Returns the sha256 digest stored in the file.
    """
    arrays = {name: getattr(hp, name) for name in _ARRAYS}
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": list(hp.dims),
        "activation": hp.activation.value,
        "lineage": list(hp.lineage),
        "extra": extra or {},
    }
    payload = {name: np.asarray(v, dtype="<f8") for name, v in arrays.items()}
    if prior is not None:
        prior_arrays = {name: getattr(prior, name) for name in _ARRAYS}
        meta["prior_lineage"] = list(prior.lineage)
        meta["prior_digest"] = _digest(prior_arrays, {})
        payload.update({f"prior_{k}": np.asarray(v, "<f8") for k, v in prior_arrays.items()})
    digest = _digest(arrays, meta)
    meta["sha256"] = digest
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **payload)
    Path(path).write_bytes(buf.getvalue())
    return digest


def load_checkpoint(path):
    """Return ``(hp, prior_or_None, meta)``; raises CheckpointError on any integrity failure."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            arrays = {name: z[name].astype(float) for name in _ARRAYS}
            prior_arrays = {name: z[f"prior_{name}"].astype(float) for name in _ARRAYS} if "prior_mu0" in z else None
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    stored = meta.pop("sha256", None)
    if stored is None or _digest(arrays, meta) != stored:
        raise CheckpointError("checkpoint digest mismatch; file was modified")
    if prior_arrays is not None and _digest(prior_arrays, {}) != meta.get("prior_digest"):
        raise CheckpointError("prior digest mismatch; file was modified")
    meta["sha256"] = stored
    hp = HyperParams(activation=meta["activation"], lineage=tuple(meta["lineage"]), **arrays)
    prior = None
    if prior_arrays is not None:
        prior = HyperParams(activation=meta["activation"], lineage=tuple(meta.get("prior_lineage", ())), **prior_arrays)
    if list(hp.dims) != meta["dims"]:
        raise CheckpointError("stored dims disagree with array shapes")
    return hp, prior, meta
