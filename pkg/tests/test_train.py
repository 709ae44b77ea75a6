import math
from dataclasses import replace

import numpy as np
import pytest

from gausspac.data import Dataset, make_toy_clusters
from gausspac.errors import NonFiniteError
from gausspac.gaussnet import load_checkpoint
from gausspac.pacbayes import bern_kl_inv, gauss_kl, kl_penalty, lazy_lemma_check, objective
from gausspac.train import (
    METRIC_COLUMNS,
    TrainConfig,
    init_state,
    metrics_csv,
    sgd_step,
    surrogate_loss,
    train,
)


@pytest.fixture(scope="module")
def toy2():
    d = make_toy_clusters(40, seed=0)
    keep = d.labels < 2
    return Dataset(d.X[keep], d.labels[keep], 2, "toy2")


@pytest.fixture(scope="module")
def toy_run(toy2):
    cfg = TrainConfig(objective="GStd", epochs_schedule=((200, 0.01),), hidden=50, batch_size=0, seed=0)
    return cfg, train(cfg, toy2)


# -- surrogate ----------------------------------------------------------------

def test_surrogate_examples():
    v, _ = surrogate_loss([[50.0, -50.0]], [0], "SStd")
    assert v[0] == pytest.approx(0.0, abs=1e-15)
    v, _ = surrogate_loss([[0.3, 0.3]], [1], "SStd")
    assert v[0] == pytest.approx(1.0, abs=1e-15)
    p0 = 1e-5
    # true class gets probability exactly p0 among q = 3 classes
    t = math.log((1 - p0) / (2 * p0))
    v, _ = surrogate_loss([[0.0, t, t]], [0], "SQuad", p0)
    assert v[0] == pytest.approx(1.0, abs=1e-9)
    v, g = surrogate_loss([[0.0, t + 1, t + 1]], [0], "SQuad", p0)
    assert v[0] == 1.0 and not g.any()
    with pytest.raises(ValueError):
        surrogate_loss([[0.0, 1.0]], [0], "GStd")


def test_surrogate_gradient_fd():
    rng = np.random.default_rng(0)
    for q in (2, 4):
        F = rng.standard_normal((5, q))
        y = rng.integers(0, q, 5)
        _, g = surrogate_loss(F, y, "SStd", 1e-5)
        h = 1e-6
        for idx in np.ndindex(F.shape):
            E = np.zeros_like(F)
            E[idx] = h
            fd = (surrogate_loss(F + E, y, "SStd")[0] - surrogate_loss(F - E, y, "SStd")[0])[idx[0]] / (2 * h)
            assert abs(fd - g[idx]) <= 1e-6 * abs(g[idx]) + 1e-10


# -- SGD ----------------------------------------------------------------------

def _state(shape0=(3, 2), shape1=(2, 3)):
    d = Dataset(np.zeros((4, shape0[1])), np.array([0, 1, 0, 1]), shape1[0], "z")
    return init_state(TrainConfig(hidden=shape0[0]), d)


def test_sgd_first_step_and_velocity_decay():
    s = _state()
    g0, g1 = np.ones_like(s.hp.mu0), 2 * np.ones_like(s.hp.mu1)
    s1 = sgd_step(s, (g0, g1), lr=0.1, momentum=0.9)
    assert np.allclose(s1.hp.mu0, s.hp.mu0 - 0.1 * g0, rtol=0, atol=1e-15)
    assert np.allclose(s1.hp.mu1, s.hp.mu1 - 0.1 * g1, rtol=0, atol=1e-15)
    s2 = sgd_step(s1, (0 * g0, 0 * g1), lr=0.1, momentum=0.9)
    assert np.allclose(s1.hp.mu0 - s2.hp.mu0, 0.1 * 0.9 * g0, rtol=0, atol=1e-15)
    # standard deviations are never touched
    assert np.array_equal(s2.hp.sigma0, s.hp.sigma0) and np.array_equal(s2.hp.sigma1, s.hp.sigma1)


def test_sgd_quadratic_bowl():
    s = _state()
    target0 = np.arange(6.0).reshape(3, 2)
    target1 = -np.arange(6.0).reshape(2, 3)
    # heavy ball contracts at best by sqrt(momentum) per step, so 0.9 is too slow for 100 steps
    for _ in range(100):
        s = sgd_step(s, (s.hp.mu0 - target0, s.hp.mu1 - target1), lr=0.5, momentum=0.5)
    err = 0.5 * (np.sum((s.hp.mu0 - target0) ** 2) + np.sum((s.hp.mu1 - target1) ** 2))
    assert err < 1e-6


def test_sgd_rejects_bad_gradients():
    s = _state()
    bad = np.ones_like(s.hp.mu0)
    bad[0, 0] = np.nan
    with pytest.raises(NonFiniteError, match="1 bad entries"):
        sgd_step(s, (bad, np.zeros_like(s.hp.mu1)), 0.1)
    with pytest.raises(ValueError):
        sgd_step(s, (np.zeros((2, 2)), np.zeros_like(s.hp.mu1)), 0.1)


# -- config ---------------------------------------------------------------

def test_config_schedule():
    cfg = TrainConfig(epochs_schedule=((100, 1e-2), (1000, 1e-3), (5000, 1e-4)))
    assert cfg.total_epochs == 6100
    assert cfg.lr_at(1) == 1e-2 and cfg.lr_at(100) == 1e-2 and cfg.lr_at(101) == 1e-3
    assert cfg.lr_at(1100) == 1e-3 and cfg.lr_at(1101) == 1e-4
    for bad in ({"epochs_schedule": ((10, 0.0),)}, {"momentum": 1.0}, {"objective": "X"}, {"lambda_init": 0.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- training -------------------------------------------------------------

def test_zero_epochs_returns_prior(toy2):
    cfg = TrainConfig(objective="GStd", epochs_schedule=((0, 0.01),), hidden=20, seed=3)
    st = train(cfg, toy2)
    assert st.hp is st.prior and st.epoch == 0
    assert len(st.metrics_log) == 1
    row = st.metrics_log[0]
    assert gauss_kl(st.hp, st.prior)[0] == 0
    assert row.kl_penalty == pytest.approx(kl_penalty(0.0, toy2.m, cfg.delta), rel=1e-15)
    assert row.objective == pytest.approx(objective("GStd", row.g_loss, 0.0, toy2.m, cfg.delta), rel=1e-15)


def test_toy_gstd_learns(toy_run):
    cfg, st = toy_run
    log = st.metrics_log
    assert len(log) == cfg.total_epochs + 1
    assert log[-1].g_loss < 0.05
    assert log[-1].kl_penalty > 0
    series = np.array([r.g_bound for r in log])
    assert np.all(np.isfinite(series)) and series[-1] <= series[0]


def test_gstd_objective_is_kl_inverse_offline(toy_run):
    _, st = toy_run
    for r in st.metrics_log:
        assert abs(r.objective - bern_kl_inv(r.g_loss, r.kl_penalty)) <= 1e-10
        assert r.g_bound == r.objective


def test_reproducible(toy2, toy_run):
    cfg, st = toy_run
    again = train(replace(cfg, epochs_schedule=((20, 0.01),)), toy2)
    assert again.metrics_log == st.metrics_log[:21]


def test_lazy_lemma_every_epoch(toy2, tmp_path):
    cfg = TrainConfig(objective="GStd", epochs_schedule=((10, 0.05),), hidden=20, batch_size=16,
                      checkpoint_every=1, seed=1)
    train(cfg, toy2, checkpoint_dir=tmp_path)
    files = sorted(tmp_path.glob("checkpoint-epoch*.npz"))
    assert len(files) == 10
    for f in files:
        hp, prior, meta = load_checkpoint(f)
        chk = lazy_lemma_check(hp, prior)
        assert chk.holds and chk.rhs > 0
        assert gauss_kl(hp, prior)[0] >= 0


@pytest.mark.parametrize("kind", ["SStd", "SLbd", "SQuad", "GLbd", "GQuad"])
def test_other_objectives_run(toy2, kind):
    cfg = TrainConfig(objective=kind, epochs_schedule=((5, 0.01),), hidden=20, batch_size=32, seed=2)
    st = train(cfg, toy2)
    assert len(st.metrics_log) == 6
    assert all(np.isfinite([r.objective, r.g_loss, r.g_bound]).all() for r in st.metrics_log)
    if kind.endswith("Lbd"):
        lams = [r.lam for r in st.metrics_log]
        assert all(1e-4 <= x <= 1 - 1e-4 for x in lams)
        assert lams[-1] != lams[0]
    else:
        assert st.metrics_log[-1].lam is None


def test_multiclass_gaussian_training_runs():
    d = make_toy_clusters(15, seed=1)
    cfg = TrainConfig(objective="GStd", epochs_schedule=((2, 0.01),), hidden=15, batch_size=0,
                      mc_samples_multiclass=500, seed=0)
    st = train(cfg, d)
    assert st.metrics_log[-1].g_loss <= 1 and st.epoch == 2


def test_non_finite_aborts(toy2):
    cfg = TrainConfig(objective="GStd", epochs_schedule=((3, 1e300),), hidden=10, batch_size=0, seed=0)
    with pytest.raises((NonFiniteError, FloatingPointError, ValueError)):
        with np.errstate(all="ignore"):
            train(cfg, toy2)


def test_metrics_csv_format(toy_run):
    _, st = toy_run
    text = metrics_csv(st.metrics_log[:3], header="seed=0")
    lines = text.splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == ",".join(METRIC_COLUMNS)
    assert len(lines) == 5
    assert float(lines[2].split(",")[2]) == st.metrics_log[0].g_loss
