"""Gaussian moments of activation functions.

Everything here evaluates expectations of the form ``E[phi(a*z + b)**k]`` with
``z ~ N(0, 1)``, where ``a >= 0`` is the standard deviation and ``b`` the mean
of a hidden pre-activation. Inputs broadcast like numpy arrays; scalars in give
0-d results.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erfcx, ndtr, roots_hermitenorm, roots_legendre

from .errors import DegenerateInputError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Quadrature truncation: the standard normal density beyond |z| = 12 is < 1e-31.
_QUAD_HALF_WIDTH = 12.0
MAX_QUAD_NODES = 5000
VAR_CLAMP = 1e-14


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    SIN = "sin"

    def __call__(self, x):
        if self is ActivationKind.RELU:
            return np.maximum(x, 0.0)
        return np.sin(x)

    def derivative(self, x):
        if self is ActivationKind.RELU:
            return (x > 0).astype(float)
        return np.cos(x)


def as_activation(kind) -> ActivationKind:
    if isinstance(kind, ActivationKind):
        return kind
    try:
        return ActivationKind(str(kind).lower())
    except ValueError:
        raise ValueError(f"unknown activation {kind!r}; expected 'relu' or 'sin'") from None


@dataclass(frozen=True)
class MomentSet:
    m1: np.ndarray
    m2: np.ndarray
    var: np.ndarray
    abs3: np.ndarray


def _check(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("pre-activation parameters must be finite")
    if np.any(a < 0):
        raise ValueError("pre-activation standard deviation a must be >= 0")
    return a, b


def _relu_parts(a, b):
    """Standardised mean s = b/a with the density and cdf at s; a = 0 maps to s = +-inf."""
    pos = a > 0
    a_safe = np.where(pos, a, 1.0)
    s = np.where(pos, b / a_safe, np.where(b > 0, np.inf, -np.inf))
    pdf = np.where(pos, np.exp(-0.5 * np.square(np.where(pos, s, 0.0))) * _INV_SQRT_2PI, 0.0)
    cdf = np.where(pos, ndtr(np.where(pos, s, 0.0)), (b > 0).astype(float))
    return pdf, cdf


_TAIL_START = 10.0


def _tail_series(x, k):
    """E[(Z - x)_+^k] / pdf(x) for x >= 10 from the asymptotic expansion in 1/x.

    The series diverges, so each entry stops at its smallest term.
    """
    inv2 = 1.0 / (x * x)
    term = math.factorial(k) / x ** (k + 1)
    total = term.copy()
    live = np.ones(x.shape, dtype=bool)
    for j in range(80):
        nxt = term * (-0.5 / (j + 1)) * (k + 2 * j + 1) * (k + 2 * j + 2) * inv2
        live &= (np.abs(nxt) < np.abs(term)) & (np.abs(term) > 1e-17 * np.abs(total))
        if not np.any(live):
            break
        total = np.where(live, total + nxt, total)
        term = nxt
    return total


# g_k(s) = P_k(s) pdf(s) + S_k(s) cdf(s)
_RELU_POLY = (
    (lambda t: 1.0, lambda t: t),
    (lambda t: t, lambda t: 1.0 + t * t),
    (lambda t: t * t + 2.0, lambda t: t * (t * t + 3.0)),
)


def _relu_standard(s, kmax):
    """([g_1, ..., g_kmax], cdf) with g_k(s) = E[(Z + s)_+^k] at finite s.

    The cdf comes from erfcx, so it keeps full relative precision in the left
    tail; beyond s = -10 the remaining cancellation in g_k is avoided with the
    asymptotic series.
    """
    shape = np.shape(s)
    s = np.asarray(s, float).reshape(-1)
    pdf = np.exp(-0.5 * s * s) * _INV_SQRT_2PI
    tail = pdf * (np.sqrt(np.pi / 2) * erfcx(np.abs(s) / np.sqrt(2.0)))  # = cdf(-|s|)
    cdf = np.where(s < 0, tail, 1.0 - tail)
    gs = [np.asarray(P(s) * pdf + S(s) * cdf) for P, S in _RELU_POLY[:kmax]]
    far = s <= -_TAIL_START
    if np.any(far):
        x, d = -s[far], pdf[far]
        for k, g in enumerate(gs, start=1):
            g[far] = d * _tail_series(x, k)
    return [g.reshape(shape) for g in gs], cdf.reshape(shape)


def _relu_all(a, b, kmax):
    """([E ReLU(a z + b)^k for k <= kmax], P(a z + b > 0)), deterministic at a = 0."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    pos = a > 0
    gs, cdf = _relu_standard(np.where(pos, b / np.where(pos, a, 1.0), 0.0), kmax)
    bp = np.maximum(b, 0.0)
    ms = [np.where(pos, a**k * g, bp**k)[()] for k, g in enumerate(gs, start=1)]
    return ms, np.where(pos, cdf, (b > 0).astype(float))[()]


def _relu_moment(a, b, k):
    return _relu_all(a, b, k)[0][k - 1]


def moment_mean(kind, a, b):
    """E[phi(a z + b)]."""
    kind = as_activation(kind)
    a, b = _check(a, b)
    if kind is ActivationKind.RELU:
        return _relu_moment(a, b, 1)
    return np.exp(-0.5 * a * a) * np.sin(b)


def moment_square(kind, a, b):
    """E[phi(a z + b)^2].

    For sin this is ``(1 - exp(-2 a^2) cos 2b) / 2``.
    """
    kind = as_activation(kind)
    a, b = _check(a, b)
    if kind is ActivationKind.RELU:
        return _relu_moment(a, b, 2)
    return 0.5 * (1.0 - np.exp(-2.0 * a * a) * np.cos(2.0 * b))


def _sin_abs3_terms(a) -> int:
    amin = float(np.min(a[a > 0])) if np.any(a > 0) else 1.0
    # Fourier coefficients decay like k^-4 and are damped by exp(-2 k^2 a^2).
    return int(min(max(np.ceil(5.0 / amin), 16), 20000))


def moment_abs3(kind, a, b):
    """E[|phi(a z + b)|^3].

    ReLU uses the truncated-normal third moment. Sin expands ``|sin x|^3`` in its
    cosine series ``4/(3 pi) + sum_k 24 / (pi (1 - 4k^2)(9 - 4k^2)) cos 2kx``,
    whose Gaussian expectation is evaluated term by term.
    """
    kind = as_activation(kind)
    a, b = _check(a, b)
    if kind is ActivationKind.RELU:
        return _relu_moment(a, b, 3)
    a_b, b_b = np.broadcast_arrays(a, b)
    shape = a_b.shape
    a_b, b_b = a_b.ravel(), b_b.ravel()
    out = np.abs(np.sin(b_b)) ** 3
    pos = a_b > 0
    if np.any(pos):
        ap, bp = a_b[pos], b_b[pos]
        k = np.arange(1, _sin_abs3_terms(ap) + 1, dtype=float)
        coef = 24.0 / (np.pi * (1.0 - 4.0 * k * k) * (9.0 - 4.0 * k * k))
        damp = np.exp(-2.0 * np.outer(ap * ap, k * k))
        series = (coef * damp * np.cos(2.0 * np.outer(bp, k))).sum(axis=1)
        out[pos] = 4.0 / (3.0 * np.pi) + series
    return out.reshape(shape)[()]


def moments(kind, a, b, with_abs3: bool = True) -> MomentSet:
    """All moments needed by the forward pass and the finite-width diagnostic."""
    m1 = moment_mean(kind, a, b)
    m2 = moment_square(kind, a, b)
    var = m2 - m1 * m1
    var = np.where((var < 0) & (var >= -VAR_CLAMP * np.maximum(1.0, m2)), 0.0, var)
    abs3 = moment_abs3(kind, a, b) if with_abs3 else np.full_like(np.asarray(m1, float), np.nan)
    return MomentSet(m1=m1, m2=m2, var=var, abs3=abs3)


def moment_partials(kind, a, b):
    """Analytic (dm1/da, dm1/db, dm2/da, dm2/db) of the closed-form moments.

    Raises DegenerateInputError at a = 0, where the moments stop being smooth.
    """
    kind = as_activation(kind)
    a, b = _check(a, b)
    if np.any(a == 0):
        raise DegenerateInputError("moment partials are undefined at a = 0")
    return _partials(kind, a, b)


def _partials(kind, a, b):
    if kind is ActivationKind.RELU:
        pdf, _ = _relu_parts(a, b)
        (m1,), cdf = _relu_all(a, b, 1)
        return pdf, cdf, 2.0 * a * cdf, 2.0 * m1
    e1 = np.exp(-0.5 * a * a)
    e2 = np.exp(-2.0 * a * a)
    return (
        -a * e1 * np.sin(b),
        e1 * np.cos(b),
        2.0 * a * e2 * np.cos(2.0 * b),
        e2 * np.sin(2.0 * b),
    )


def mean_square_db(kind, a, b):
    """(m1, m2, dm1/db, dm2/db) with the deterministic limit allowed at a = 0.

    This is the path used by the forward/backward pass, where a = 0 rows occur
    for all-zero inputs.
    """
    kind = as_activation(kind)
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if kind is ActivationKind.RELU:
        (m1, m2), cdf = _relu_all(a, b, 2)
        return m1, m2, cdf, 2.0 * m1
    e1 = np.exp(-0.5 * a * a)
    e2 = np.exp(-2.0 * a * a)
    return e1 * np.sin(b), 0.5 * (1.0 - e2 * np.cos(2.0 * b)), e1 * np.cos(b), e2 * np.sin(2.0 * b)


@lru_cache(maxsize=32)
def _hermite_rule(nodes: int):
    x, w = roots_hermitenorm(nodes)
    return x, w * _INV_SQRT_2PI


@lru_cache(maxsize=32)
def _legendre_rule(nodes: int):
    return roots_legendre(nodes)


def _breakpoints(kind, a, b, power):
    if kind is ActivationKind.RELU:
        return np.array([-b / a])
    if power == 3:
        lo, hi = a * -_QUAD_HALF_WIDTH + b, a * _QUAD_HALF_WIDTH + b
        ks = np.arange(np.ceil(lo / np.pi), np.floor(hi / np.pi) + 1)
        return (ks * np.pi - b) / a
    return np.array([])


def quadrature_moment(kind, a: float, b: float, power: int, nodes: int) -> float:
    """Numerical E[|phi(a z + b)|^power] (signed phi for power 1).

    Smooth integrands use a Gauss-Hermite rule for the weight exp(-z^2/2)/sqrt(2 pi).
    Integrands with kinks (ReLU, |sin|^3) are split at their breakpoints inside
    [-12, 12] and each piece gets a Gauss-Legendre rule against the normal density,
    which keeps the rule exponentially convergent.
    """
    kind = as_activation(kind)
    if power not in (1, 2, 3):
        raise ValueError("power must be 1, 2 or 3")
    if not 2 <= nodes <= MAX_QUAD_NODES:
        raise ValueError(f"nodes must lie in [2, {MAX_QUAD_NODES}]")
    a, b = float(a), float(b)
    if not (np.isfinite(a) and np.isfinite(b)) or a < 0:
        raise ValueError("invalid pre-activation parameters")

    def integrand(z):
        v = kind(a * z + b)
        return v if power == 1 else (v * v if power == 2 else np.abs(v) ** 3)

    if a == 0.0:
        return float(integrand(np.zeros(1))[0])
    cuts = _breakpoints(kind, a, b, power)
    if cuts.size == 0:
        x, w = _hermite_rule(nodes)
        return float(np.dot(w, integrand(x)))
    edges = np.concatenate(([-_QUAD_HALF_WIDTH], np.sort(cuts), [_QUAD_HALF_WIDTH]))
    edges = np.clip(edges, -_QUAD_HALF_WIDTH, _QUAD_HALF_WIDTH)
    t, w = _legendre_rule(nodes)
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        half = 0.5 * (hi - lo)
        z = 0.5 * (hi + lo) + half * t
        dens = np.exp(-0.5 * z * z) * _INV_SQRT_2PI
        total += half * np.dot(w, integrand(z) * dens)
    return float(total)
