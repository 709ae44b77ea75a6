"""PAC-Bayes bound machinery: Bernoulli KL, its inverse, Gaussian KL, objectives, certification."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .errors import DegenerateInputError
from .gaussnet import HyperParams, lazy_distance, sample_error_counts

KL_INV_TOL = 1e-12
KL_INV_MAXITER = 100
LAMBDA_BOUNDS = (1e-4, 1.0 - 1e-4)
_ONE_MINUS = np.nextafter(1.0, 0.0)


# -- Bernoulli KL ---------------------------------------------------------

def _kl(u: float, v: float) -> float:
    out = 0.0
    if u > 0.0:
        out += u * (math.log(u) - math.log(v))
    if u < 1.0:
        out += (1.0 - u) * (math.log1p(-u) - math.log1p(-v))
    return out


def bern_kl(u: float, v: float) -> float:
    """kl(u || v) between Bernoulli(u) and Bernoulli(v), with 0 log 0 = 0."""
    u, v = float(u), float(v)
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ValueError("non-finite argument")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    if not 0.0 < v < 1.0:
        raise ValueError(f"v must lie in (0, 1), got {v}")
    return max(_kl(u, v), 0.0)


def bern_kl_inv(u: float, c: float) -> float:
    """Largest v in [u, 1] with kl(u || v) <= c.

    Newton's method from the Pinsker point ``u + sqrt(c / 2)``. The map
    ``v -> kl(u||v)`` is convex and increasing on (u, 1), so iterates started
    to the right of the root decrease monotonically towards it; a bracket is
    kept and bisection takes over if an iterate ever leaves it.
    """
    u, c = float(u), float(c)
    if not (math.isfinite(u) and 0.0 <= u <= 1.0):
        raise ValueError(f"u must lie in [0, 1], got {u}")
    if not (c >= 0.0):
        raise ValueError(f"c must be >= 0, got {c}")
    if u >= 1.0:
        return 1.0
    if c == 0.0:
        return u
    if math.isinf(c):
        return 1.0
    if u == 0.0:
        # closed form; rounding of v can overshoot by an ulp, so walk back onto the feasible side
        v = min(-math.expm1(-c), _ONE_MINUS)
        while v > 0.0 and _kl(0.0, v) > c:
            v = math.nextafter(v, 0.0)
        return v
    if _kl(u, _ONE_MINUS) <= c:
        return float(_ONE_MINUS)

    lo, hi = u, float(_ONE_MINUS)
    v = min(max(u + math.sqrt(c / 2.0), u + 1e-12), 1.0 - 1e-12)
    for _ in range(KL_INV_MAXITER):
        f = _kl(u, v) - c
        if f > 0:
            hi = min(hi, v)
        else:
            lo = max(lo, v)
        if abs(f) <= KL_INV_TOL:
            break
        slope = (1.0 - u) / (1.0 - v) - u / v
        step = v - f / slope if slope > 0 else 0.5 * (lo + hi)
        if not lo < step < hi:
            step = 0.5 * (lo + hi)
        if step == v:
            break
        v = step
    # guarantee the returned value is feasible
    if _kl(u, v) > c:
        hi = v
        while True:
            mid = 0.5 * (lo + hi)
            if mid <= lo or mid >= hi:
                break
            if _kl(u, mid) > c:
                hi = mid
            else:
                lo = mid
        v = lo
    # Pinsker gives a hard ceiling; it matters when c is so small that kl cancels to noise
    return max(u, min(v, u + math.sqrt(c / 2.0)))


def bern_kl_inv_grad(u: float, c: float):
    """(d kl_inv / du, d kl_inv / dc) by implicit differentiation of kl(u||v*) = c."""
    u, c = float(u), float(c)
    if not (0.0 < u < 1.0 and c > 0.0):
        raise DegenerateInputError("gradient needs 0 < u < 1 and c > 0")
    v = bern_kl_inv(u, c)
    if v - u <= 1e-12 or v >= 1.0:
        raise DegenerateInputError("kl inverse too close to an endpoint to differentiate")
    k_v = (1.0 - u) / (1.0 - v) - u / v
    k_u = math.log(u / v) - math.log((1.0 - u) / (1.0 - v))
    return -k_u / k_v, 1.0 / k_v


def _kl_inv_with_grad(u: float, c: float):
    """kl_inv and its partials, falling back to one-sided limits at the edges."""
    v = bern_kl_inv(u, c)
    if 0.0 < u < 1.0 and c > 0.0 and u + 1e-12 < v < 1.0:
        k_v = (1.0 - u) / (1.0 - v) - u / v
        k_u = math.log(u / v) - math.log1p(-u) + math.log1p(-v)
        return v, -k_u / k_v, 1.0 / k_v
    if u == 0.0:
        return v, 0.0, 1.0 - v
    return v, 0.0, 0.0


# -- Gaussian KL ----------------------------------------------------------

def gauss_kl_arrays(mu, sigma, mu_p, sigma_p):
    """KL between diagonal Gaussians given flat arrays, with d/dmu."""
    r = sigma / sigma_p
    d = (mu - mu_p) / sigma_p
    kl = 0.5 * (np.sum(r * r) - r.size + np.sum(d * d) - 2.0 * np.sum(np.log(r)))
    return float(kl), d / sigma_p


def gauss_kl(post: HyperParams, prior: HyperParams):
    """KL(post || prior) over all weights and its gradient on the posterior means.

    The gradient is returned in the storage convention, i.e. with respect to the
    absorbed-scaled ``mu0`` and ``mu1``. The value itself does not depend on the
    scaling.
    """
    if post.dims != prior.dims:
        raise ValueError("dimension mismatch")
    if not (np.all(prior.sigma0 > 0) and np.all(prior.sigma1 > 0)):
        raise ValueError("prior standard deviations must be positive")
    k0, g0 = gauss_kl_arrays(post.mu0, post.sigma0, prior.mu0, prior.sigma0)
    k1, g1 = gauss_kl_arrays(post.mu1, post.sigma1, prior.mu1, prior.sigma1)
    return k0 + k1, (g0, g1)


@dataclass(frozen=True)
class LazyCheck:
    lhs: float
    rhs: float
    holds: bool


def lazy_lemma_check(post: HyperParams, prior: HyperParams, tol: float = 1e-10) -> LazyCheck:
    """Compare the squared distance to the prior with twice the KL (unit prior sigmas)."""
    _, s0, _, s1 = prior.unscaled()
    if not (np.allclose(s0, 1.0, rtol=0, atol=1e-12) and np.allclose(s1, 1.0, rtol=0, atol=1e-12)):
        raise ValueError("lazy check requires unit prior standard deviations")
    lhs = lazy_distance(post, prior)
    rhs = 2.0 * gauss_kl(post, prior)[0]
    return LazyCheck(lhs=lhs, rhs=rhs, holds=bool(lhs <= rhs + tol))


# -- objectives -----------------------------------------------------------

class ObjectiveKind(str, Enum):
    G_STD = "GStd"
    G_LBD = "GLbd"
    G_QUAD = "GQuad"
    S_STD = "SStd"
    S_LBD = "SLbd"
    S_QUAD = "SQuad"

    @property
    def family(self) -> str:
        return self.value[1:]

    @property
    def gaussian(self) -> bool:
        return self.value[0] == "G"

    @property
    def uses_lambda(self) -> bool:
        return self.family == "Lbd"


def as_objective(kind) -> ObjectiveKind:
    if isinstance(kind, ObjectiveKind):
        return kind
    for k in ObjectiveKind:
        if str(kind).lower() in (k.value.lower(), k.name.lower()):
            return k
    raise ValueError(f"unknown objective {kind!r}")


def confidence_term(m: int, delta: float) -> float:
    return math.log(2.0 * math.sqrt(m) / delta)


def kl_penalty(KL: float, m: int, delta: float) -> float:
    """(KL + log(2 sqrt(m) / delta)) / m."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return (KL + confidence_term(m, delta)) / m


@dataclass(frozen=True)
class ObjectiveValue:
    value: float
    d_loss: float
    d_kl: float
    d_lambda: float = 0.0


def objective_with_grad(kind, L_S: float, KL: float, m: int, delta: float, lam: float | None = None) -> ObjectiveValue:
    """Objective value and its partials in (L_S, KL, lambda)."""
    kind = as_objective(kind)
    if kind.uses_lambda:
        if lam is None or not 0.0 < lam < 1.0:
            raise ValueError("lambda in (0, 1) is required for the Lbd objectives")
    elif lam is not None:
        raise ValueError(f"{kind.value} does not take lambda")
    P = kl_penalty(KL, m, delta)
    fam = kind.family
    if fam == "Std" and kind.gaussian:
        if not 0.0 <= L_S <= 1.0:
            raise ValueError("kl-based objective needs L_S in [0, 1]")
        v, du, dc = _kl_inv_with_grad(L_S, P)
        return ObjectiveValue(v, du, dc / m)
    if fam == "Std":
        r = math.sqrt(P / 2.0)
        return ObjectiveValue(L_S + r, 1.0, (0.25 / (r * m)) if r > 0 else 0.0)
    if fam == "Lbd":
        g = 1.0 - lam / 2.0
        value = L_S / g + P / (lam * g)
        d_lam = L_S / (2.0 * g * g) - P * (1.0 - lam) / (lam * g) ** 2
        return ObjectiveValue(value, 1.0 / g, 1.0 / (lam * g * m), d_lam)
    c = P / 2.0
    root_l = math.sqrt(L_S + c)
    root_c = math.sqrt(c)
    value = (root_l + root_c) ** 2
    d_loss = (root_l + root_c) / root_l
    d_c = (root_l + root_c) * (1.0 / root_l + 1.0 / root_c)
    return ObjectiveValue(value, d_loss, d_c / (2.0 * m))


def objective(kind, L_S: float, KL: float, m: int, delta: float, lam: float | None = None) -> float:
    return objective_with_grad(kind, L_S, KL, m, delta, lam).value


def optimal_lambda(L_S: float, P: float) -> float:
    """Minimiser of the Lbd objective over lambda in (0, 1)."""
    if L_S <= 0:
        return 1.0
    return min(2.0 / (math.sqrt(2.0 * L_S / P + 1.0) + 1.0), 1.0)


# -- certification --------------------------------------------------------

def mc_empirical_bound(L_hat: float, N: int, delta_prime: float) -> float:
    """Upper bound on the expected empirical loss from N sampled networks."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if not 0.0 < delta_prime < 1.0:
        raise ValueError("delta_prime must lie in (0, 1)")
    return bern_kl_inv(L_hat, math.log(2.0 / delta_prime) / N)


@dataclass(frozen=True)
class BoundInputs:
    m: int
    delta: float = 0.025
    delta_prime: float = 0.01
    N_mc: int = 150_000

    def __post_init__(self):
        if self.m < 8:
            raise ValueError("training-set size must be at least 8")
        for name in ("delta", "delta_prime"):
            val = getattr(self, name)
            if not 0.0 < val < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.delta + self.delta_prime >= 1.0:
            raise ValueError("delta + delta_prime must be < 1")
        if self.N_mc < 1:
            raise ValueError("N_mc must be >= 1")


@dataclass(frozen=True)
class BoundCertificate:
    L_hat: float
    kl_inner: float
    kl_penalty: float
    final: float
    N_mc: int
    delta: float
    delta_prime: float
    KL: float = 0.0
    m: int = 0
    seed: int = 0
    g_loss: float | None = None
    g_bound: float | None = None
    tolerance: float = KL_INV_TOL

    def to_json(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BoundCertificate":
        raw = json.loads(text)
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: raw[k] for k in names if k in raw})


def final_bound(L_hat: float, N: int, KL: float, m: int, delta: float, delta_prime: float):
    """Nested bound; returns (kl_inner, penalty, final)."""
    inner = mc_empirical_bound(L_hat, N, delta_prime)
    pen = kl_penalty(KL, m, delta)
    return inner, pen, bern_kl_inv(inner, pen)


def certify(hp: HyperParams, prior: HyperParams, X, labels, inputs: BoundInputs, seed: int = 0,
            workers: int = 1, g_loss: float | None = None) -> BoundCertificate:
    """Approximation-free bound from ``N_mc`` sampled realisations of the whole network."""
    X = np.asarray(X, float)
    labels = np.asarray(labels, dtype=np.int64)
    m = X.shape[0]
    if m == 0:
        raise ValueError("empty dataset")
    if m != inputs.m:
        raise ValueError(f"inputs.m = {inputs.m} but the dataset has {m} examples")
    counts = sample_error_counts(hp, X, labels, inputs.N_mc, seed=seed, workers=workers)
    L_hat = float(counts.sum(dtype=np.int64)) / (m * inputs.N_mc)
    KL = gauss_kl(hp, prior)[0]
    inner, pen, final = final_bound(L_hat, inputs.N_mc, KL, m, inputs.delta, inputs.delta_prime)
    g_bound = None if g_loss is None else bern_kl_inv(g_loss, pen)
    return BoundCertificate(
        L_hat=L_hat, kl_inner=inner, kl_penalty=pen, final=final, N_mc=inputs.N_mc, delta=inputs.delta,
        delta_prime=inputs.delta_prime, KL=KL, m=m, seed=seed, g_loss=g_loss, g_bound=g_bound,
    )
