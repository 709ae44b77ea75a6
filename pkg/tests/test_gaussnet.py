import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gausspac import _kernels_py, kernels
from gausspac.errors import CheckpointError
from gausspac.gaussnet import (
    HyperParams,
    bentkus_diagnostic,
    bentkus_from_moments,
    forward,
    forward_batch,
    forward_grads,
    hidden_moments,
    init_hyperparams,
    lazy_distance,
    load_checkpoint,
    sample_error_counts,
    sample_outputs,
    save_checkpoint,
)
from gausspac.moments import ActivationKind


def small_net(p=3, n=4, q=2, seed=0, activation="relu"):
    return init_hyperparams(p, n, q, activation, seed)


# -- init -----------------------------------------------------------------

def test_init_scales():
    hp = init_hyperparams(784, 1200, 2, "relu", seed=7)
    assert np.all(hp.sigma0 == 1 / math.sqrt(784))
    assert np.all(hp.sigma1 == 1 / math.sqrt(1200))
    assert abs(hp.unscaled()[2].mean()) <= 4 / math.sqrt(2400)


def test_init_deterministic():
    a, b = init_hyperparams(20, 30, 3, "sin", 7), init_hyperparams(20, 30, 3, "sin", 7)
    for name in ("mu0", "sigma0", "mu1", "sigma1"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.activation is ActivationKind.SIN


@pytest.mark.parametrize("dims", [(0, 3, 2), (3, 0, 2), (3, 3, 1)])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        init_hyperparams(*dims)


def test_hyperparams_validation():
    hp = small_net()
    with pytest.raises(ValueError):
        HyperParams(hp.mu0, -hp.sigma0, hp.mu1, hp.sigma1)
    with pytest.raises(ValueError):
        HyperParams(hp.mu0, hp.sigma0[:, :2], hp.mu1, hp.sigma1)


# -- hidden layer / forward ------------------------------------------------

def test_hidden_zero_input():
    hm = hidden_moments(small_net(), np.zeros(3))
    assert np.all(hm.a == 0) and np.all(hm.b == 0)
    assert np.all(hm.moments.m1 == 0) and np.all(hm.moments.m2 == 0)


def test_hidden_single_weight():
    hp = HyperParams(np.zeros((1, 1)), np.ones((1, 1)), np.ones((2, 1)), np.ones((2, 1)))
    hm = hidden_moments(hp, np.array([1.0]))
    assert hm.a[0] == 1.0 and hm.b[0] == 0.0


def test_hidden_pythagoras():
    hp = HyperParams(np.zeros((1, 2)), np.ones((1, 2)), np.ones((2, 1)), np.ones((2, 1)))
    assert hidden_moments(hp, np.array([3.0, 4.0])).a[0] == pytest.approx(5.0, abs=1e-15)


def test_hidden_dimension_mismatch():
    with pytest.raises(ValueError):
        hidden_moments(small_net(), np.zeros(4))


def test_forward_worked_example():
    hp = HyperParams(np.zeros((1, 1)), np.ones((1, 1)), np.ones((2, 1)), np.ones((2, 1)))
    out = forward(hp, np.array([1.0]))
    m1 = 1 / math.sqrt(2 * math.pi)
    assert np.allclose(out.M, [m1, m1], atol=1e-15)
    var = 0.5 - 1 / (2 * math.pi)
    assert out.Q[0, 0] == pytest.approx(0.5 + var, abs=1e-15)
    assert out.Q[0, 1] == pytest.approx(var, abs=1e-15)
    assert out.Q[0, 0] == pytest.approx(0.8409, abs=1e-4)


def test_forward_zero_output_means():
    hp = small_net(q=3)
    hp = hp.with_means(hp.mu0, np.zeros_like(hp.mu1))
    out = forward(hp, np.array([0.3, -1.0, 2.0]))
    assert np.all(out.M == 0)
    assert np.all(out.Q[~np.eye(3, dtype=bool)] == 0)


def test_forward_batch_rows_match_single():
    hp = small_net(p=5, n=7, q=3, activation="sin")
    X = np.random.default_rng(1).standard_normal((6, 5))
    M, Q, _ = forward_batch(hp, X)
    for i in range(6):
        o = forward(hp, X[i])
        assert np.allclose(o.M, M[i], rtol=1e-13, atol=1e-15) and np.allclose(o.Q, Q[i], rtol=1e-13, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), act=st.sampled_from(["relu", "sin"]), q=st.integers(2, 6))
def test_Q_symmetric_psd(seed, act, q):
    rng = np.random.default_rng(seed)
    hp = init_hyperparams(4, 15, q, act, seed)
    x = rng.standard_normal(4) * rng.uniform(0.1, 5)
    Q = forward(hp, x).Q
    assert np.max(np.abs(Q - Q.T)) <= 1e-14
    assert np.linalg.eigvalsh(Q).min() >= -1e-10 * np.trace(Q)


def test_forward_matches_monte_carlo():
    hp = init_hyperparams(4, 50, 3, "relu", 3)
    x = np.array([0.5, -1.0, 0.3, 0.8])
    out = forward(hp, x)
    N = 10**6
    Y = sample_outputs(hp, x, N, seed=11)
    se = np.sqrt(np.diag(out.Q) / N)
    assert np.all(np.abs(Y.mean(axis=0) - out.M) <= 5 * se)
    C = np.cov(Y, rowvar=False)
    # standard error of a covariance entry: sqrt((Q_ii Q_jj + Q_ij^2) / N) for Gaussian-like data
    se_c = np.sqrt((np.outer(np.diag(out.Q), np.diag(out.Q)) + out.Q**2) / N)
    assert np.all(np.abs(C - out.Q) <= 6 * se_c)


# -- gradients --------------------------------------------------------------

def _scalar_loss(hp, x, cM, cQ):
    out = forward(hp, x)
    return float(cM @ out.M + np.sum(cQ * out.Q) + 0.5 * np.sum(out.M**2))


@pytest.mark.parametrize("act", ["relu", "sin"])
def test_forward_grads_fd(act):
    rng = np.random.default_rng(4)
    hp = init_hyperparams(3, 4, 2, act, 5)
    x = rng.standard_normal(3)
    cM = rng.standard_normal(2)
    S = rng.standard_normal((2, 2))
    cQ = S + S.T
    out = forward(hp, x)
    g0, g1 = forward_grads(hp, x, cM + out.M, cQ)
    h = 1e-6
    for name, g in (("mu0", g0), ("mu1", g1)):
        base = getattr(hp, name)
        for idx in np.ndindex(base.shape):
            E = np.zeros_like(base)
            E[idx] = h
            kw = {"mu0": hp.mu0, "mu1": hp.mu1}
            kw[name] = base + E
            fp = _scalar_loss(hp.with_means(**kw), x, cM, cQ)
            kw[name] = base - E
            fm = _scalar_loss(hp.with_means(**kw), x, cM, cQ)
            fd = (fp - fm) / (2 * h)
            assert abs(fd - g[idx]) <= 1e-5 * abs(g[idx]) + 1e-9, (name, idx, fd, g[idx])


def test_forward_grads_zero():
    hp = small_net()
    g0, g1 = forward_grads(hp, np.ones(3), np.zeros(2), np.zeros((2, 2)))
    assert not g0.any() and not g1.any()


def test_forward_grads_mean_path_outer_product():
    hp = small_net(p=3, n=4, q=3)
    x = np.array([0.2, -0.4, 1.0])
    dM = np.array([1.0, -2.0, 0.5])
    _, g1 = forward_grads(hp, x, dM, np.zeros((3, 3)))
    m1 = hidden_moments(hp, x).moments.m1
    assert np.allclose(g1, np.outer(dM, m1), rtol=0, atol=1e-15)


def test_forward_grads_rejects_asymmetric():
    with pytest.raises(ValueError):
        forward_grads(small_net(), np.ones(3), np.zeros(2), np.array([[0.0, 1.0], [0.0, 0.0]]))


# -- sampling ---------------------------------------------------------------

def test_sampler_deterministic_and_validates():
    hp = small_net(q=3)
    x = np.array([1.0, 0.5, -0.5])
    assert np.array_equal(sample_outputs(hp, x, 100, seed=2), sample_outputs(hp, x, 100, seed=2))
    with pytest.raises(ValueError):
        sample_outputs(hp, x, 0)


def test_sampler_zero_noise_limit():
    hp = small_net(p=3, n=5, q=2)
    tiny = HyperParams(hp.mu0, np.full_like(hp.sigma0, 1e-12), hp.mu1, np.full_like(hp.sigma1, 1e-12))
    x = np.array([1.0, 0.5, -0.5])
    Y = sample_outputs(tiny, x, 50, seed=0)
    det = np.maximum(hp.mu0 @ x, 0) @ hp.mu1.T
    assert np.allclose(Y, det, rtol=0, atol=1e-9)


def _reference_error_counts(hp, X, labels, count, seed):
    """Straight-line realisation sampler: full weight draw is replaced by the same two-stage noise."""
    from gausspac.gaussnet import _zeta_streams, preactivations

    a, b = preactivations(hp, X)
    rng_h, rng_o = _zeta_streams(seed)
    z0 = rng_h.standard_normal((count, hp.dims[1]))
    z1 = rng_o.standard_normal((count, hp.dims[2]))
    out = []
    for h in range(count):
        phi = hp.activation(a * z0[h] + b)
        F = phi @ hp.mu1.T + np.sqrt((phi**2) @ (hp.sigma1**2).T) * z1[h]
        out.append(int(np.sum(np.argmax(F, axis=1) != labels)))
    return np.array(out)


@pytest.mark.parametrize("act", ["relu", "sin"])
def test_error_counts_reference_and_workers(act):
    hp = init_hyperparams(4, 9, 3, act, 1)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 4))
    y = rng.integers(0, 3, 40)
    ref = _reference_error_counts(hp, X, y, 150, 9)
    c1 = sample_error_counts(hp, X, y, 150, seed=9, chunk=32)
    c3 = sample_error_counts(hp, X, y, 150, seed=9, chunk=32, workers=3)
    assert np.array_equal(ref, c1) and np.array_equal(c1, c3)


def test_error_rate_matches_exact_marginal():
    # each example's error frequency over realisations is an exact draw of its own law
    hp = init_hyperparams(4, 30, 2, "relu", 2)
    x = np.array([[0.4, -0.2, 1.0, 0.3]])
    N = 200_000
    rate = sample_error_counts(hp, x, np.array([0]), N, seed=5).mean()
    Y = sample_outputs(hp, x[0], N, seed=77)
    ref = np.mean(np.argmax(Y, axis=1) != 0)
    se = math.sqrt(2 * ref * (1 - ref) / N)
    assert abs(rate - ref) <= 5 * se


# -- kernel backends -------------------------------------------------------

@pytest.mark.skipif(kernels.compiled() is None, reason="compiled kernels not built")
@pytest.mark.parametrize("relu", [True, False])
def test_count_errors_backend_parity(relu):
    ck = kernels.compiled()
    rng = np.random.default_rng(3)
    m, n, q, N = 37, 21, 4, 53
    a = np.abs(rng.standard_normal((m, n)))
    b = rng.standard_normal((m, n))
    labels = rng.integers(0, q, m).astype(np.int64)
    z0 = rng.standard_normal((N, n))
    z1 = rng.standard_normal((N, q))
    mu1 = rng.standard_normal((q, n))
    s1 = rng.uniform(0.1, 1, (q, n)) ** 2
    args = (a, b, labels, z0, z1, mu1, s1, relu)
    assert np.array_equal(ck.count_errors(*args), _kernels_py.count_errors(*args))


@pytest.mark.skipif(kernels.compiled() is None, reason="compiled kernels not built")
@pytest.mark.parametrize("d", [1, 2, 5])
def test_psi_stats_backend_parity(d):
    ck = kernels.compiled()
    rng = np.random.default_rng(d)
    At = np.tril(rng.standard_normal((d, d)))
    Mt = rng.standard_normal(d)
    X = rng.standard_normal((1000, d))
    r_c = ck.psi_max_stats(At, Mt, X)
    r_p = _kernels_py.psi_max_stats(At, Mt, X)
    for u, v in zip(r_c, r_p):
        assert np.allclose(u, v, rtol=1e-12, atol=1e-12)


# -- Bentkus diagnostic -----------------------------------------------------

def test_bentkus_worked_example():
    d = bentkus_from_moments(np.array([1.0]), np.array([1.0]), np.zeros((2, 1)), np.ones((2, 1)))
    assert d.H == pytest.approx(4.0)
    assert d.Theta == pytest.approx(1.0)
    assert d.B_upper == pytest.approx(4 * math.sqrt(2), rel=1e-14)
    assert d.convex_set_gap == pytest.approx(4 * 2**0.25 * 4 * math.sqrt(2), rel=1e-14)


def test_bentkus_infinite_when_theta_zero():
    d = bentkus_from_moments(np.zeros(3), np.zeros(3), np.zeros((2, 3)), np.ones((2, 3)))
    assert d.Theta == 0 and math.isinf(d.B_upper) and math.isinf(d.convex_set_gap)


def test_bentkus_rejects_zero_input():
    with pytest.raises(ValueError):
        bentkus_diagnostic(small_net(), np.zeros(3))


def test_bentkus_width_behaviour():
    x = np.array([0.5, 0.5, 0.5, 0.5])
    small = bentkus_diagnostic(init_hyperparams(4, 100, 3, "relu", 0), x)
    big = bentkus_diagnostic(init_hyperparams(4, 3200, 3, "relu", 0), x)
    assert 0.5 <= big.B_upper / small.B_upper <= 2
    assert big.convex_set_gap < small.convex_set_gap


# -- lazy distance ---------------------------------------------------------

def test_lazy_distance_examples():
    hp = small_net(p=3, n=4, q=2)
    assert lazy_distance(hp, hp) == 0
    m0, s0, m1, s1 = hp.unscaled()
    m0b = m0.copy()
    m0b[1, 2] += 1.0
    moved = hp.with_means(m0b / math.sqrt(3), hp.mu1)
    assert lazy_distance(moved, hp) == pytest.approx(1.0, abs=1e-12)


def test_lazy_distance_random_perturbation():
    rng = np.random.default_rng(5)
    p, n, q = 6, 8, 3
    hp = init_hyperparams(p, n, q, "relu", 1)
    D0, D1 = rng.standard_normal((n, p)), rng.standard_normal((q, n))
    E0, E1 = rng.uniform(0, 0.5, (n, p)), rng.uniform(0, 0.5, (q, n))
    moved = HyperParams(hp.mu0 + D0 / math.sqrt(p), hp.sigma0 + E0 / math.sqrt(p),
                        hp.mu1 + D1 / math.sqrt(n), hp.sigma1 + E1 / math.sqrt(n))
    expected = sum(np.sum(M**2) for M in (D0, D1, E0, E1))
    assert lazy_distance(moved, hp) == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ValueError):
        lazy_distance(hp, init_hyperparams(p, n + 1, q))


# -- checkpoints -----------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    hp = init_hyperparams(5, 6, 3, "sin", 4)
    prior = init_hyperparams(5, 6, 3, "sin", 5)
    path = tmp_path / "c.npz"
    digest = save_checkpoint(path, hp, prior, {"epoch": 3})
    hp2, prior2, meta = load_checkpoint(path)
    assert meta["sha256"] == digest and meta["extra"]["epoch"] == 3
    for name in ("mu0", "sigma0", "mu1", "sigma1"):
        assert getattr(hp, name).tobytes() == getattr(hp2, name).tobytes()
        assert getattr(prior, name).tobytes() == getattr(prior2, name).tobytes()
    assert hp2.activation is ActivationKind.SIN and hp2.lineage == hp.lineage


def test_checkpoint_tamper_detected(tmp_path):
    hp = small_net()
    path = tmp_path / "c.npz"
    save_checkpoint(path, hp, hp)
    with np.load(path) as z:
        data = {k: z[k] for k in z.files}
    data["mu1"] = data["mu1"] + 1e-9
    np.savez(path, **data)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_garbage(tmp_path):
    p = tmp_path / "junk.npz"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
