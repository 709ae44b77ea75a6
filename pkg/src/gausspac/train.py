"""Momentum-SGD training of the posterior means under the six bound objectives."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import NonFiniteError
from .gaussnet import HyperParams, forward_batch, forward_grads_batch, init_hyperparams, save_checkpoint
from .loss01 import gaussian_losses
from .moments import as_activation
from .pacbayes import (
    LAMBDA_BOUNDS,
    ObjectiveKind,
    as_objective,
    bern_kl_inv,
    gauss_kl,
    kl_penalty,
    objective_with_grad,
)

METRIC_COLUMNS = ("epoch", "objective", "g_loss", "kl_penalty", "g_bound", "lambda")

# stream tags for SeedSequence([seed, tag, ...])
_SHUFFLE, _MC_STEP, _MC_METRIC, _WEIGHTS = 1, 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveKind = ObjectiveKind.G_STD
    epochs_schedule: tuple = ((200, 1e-3),)
    momentum: float = 0.9
    batch_size: int = 256
    delta: float = 0.025
    mc_samples_multiclass: int = 10_000
    seed: int = 0
    surrogate_clamp_p0: float = 1e-5
    hidden: int = 600
    activation: str = "relu"
    lambda_init: float = 0.5
    checkpoint_every: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "objective", as_objective(self.objective))
        object.__setattr__(self, "activation", as_activation(self.activation).value)
        sched = tuple((int(e), float(lr)) for e, lr in self.epochs_schedule)
        object.__setattr__(self, "epochs_schedule", sched)
        if any(e < 0 for e, _ in sched) or any(not lr > 0 for _, lr in sched):
            raise ValueError("schedule needs epochs >= 0 and lr > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 1, or 0 for full batch")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.mc_samples_multiclass < 1 or self.hidden < 1:
            raise ValueError("mc_samples_multiclass and hidden must be >= 1")
        if not 0.0 < self.surrogate_clamp_p0 < 0.5:
            raise ValueError("surrogate_clamp_p0 must lie in (0, 1/q)")
        if not LAMBDA_BOUNDS[0] <= self.lambda_init <= LAMBDA_BOUNDS[1]:
            raise ValueError("lambda_init out of range")

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.epochs_schedule)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 1-based ``epoch``."""
        seen = 0
        for e, lr in self.epochs_schedule:
            seen += e
            if epoch <= seen:
                return lr
        return self.epochs_schedule[-1][1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objective"] = self.objective.value
        d["epochs_schedule"] = [list(x) for x in self.epochs_schedule]
        return d


@dataclass(frozen=True)
class MetricRow:
    epoch: int
    objective: float
    g_loss: float
    kl_penalty: float
    g_bound: float
    lam: float | None = None


@dataclass
class TrainState:
    hp: HyperParams
    prior: HyperParams
    velocity: tuple
    lam: float | None = None
    epoch: int = 0
    metrics_log: list = field(default_factory=list)


def _rng(seed, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def _sub_seed(seed, *tags) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(1, np.uint32)[0])


def surrogate_loss(logits, labels, kind, p0: float = 1e-5):
    """Bounded cross-entropy on sampled logits; returns (per-row values, d values / d logits).

    Two classes: cross-entropy divided by log 2. More classes: the true-class
    probability is clamped below at ``p0`` and the loss divided by log(1/p0).
    """
    kind = as_objective(kind)
    if kind.gaussian:
        raise ValueError(f"{kind.value} is evaluated on the Gaussian limit, not a surrogate")
    logits = np.asarray(logits, float)
    labels = np.asarray(labels, dtype=np.int64)
    B, q = logits.shape
    rows = np.arange(B)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    prob = np.exp(logp)
    onehot = np.zeros_like(prob)
    onehot[rows, labels] = 1.0
    if q == 2:
        scale = math.log(2.0)
        return -logp[rows, labels] / scale, (prob - onehot) / scale
    if not 0.0 < p0 < 1.0 / q:
        raise ValueError("p0 must lie in (0, 1/q)")
    scale = -math.log(p0)
    lp = logp[rows, labels]
    clamped = lp < math.log(p0)
    values = np.where(clamped, 1.0, -lp / scale)
    grad = np.where(clamped[:, None], 0.0, (prob - onehot) / scale)
    return values, grad


def _surrogate_batch(hp: HyperParams, X, labels, kind, p0, rng):
    """Surrogate on one shared weight realisation; gradients on the means."""
    w0, w1 = hp.sample_weights(rng)
    act = hp.activation
    h = X @ w0.T
    phi = act(h)
    F = phi @ w1.T
    vals, dF = surrogate_loss(F, labels, kind, p0)
    B = X.shape[0]
    dF = dF / B
    g1 = dF.T @ phi
    dh = (dF @ w1) * act.derivative(h)
    g0 = dh.T @ X
    return float(vals.mean()), g0, g1


def gaussian_loss_full(hp: HyperParams, d: Dataset, cfg: TrainConfig, seed: int, chunk: int = 2048):
    """Gaussian-limit 0-1 loss over the whole dataset (no gradients)."""
    total = 0.0
    for s in range(0, d.m, chunk):
        M, Q, _ = forward_batch(hp, d.X[s:s + chunk])
        v, *_ = gaussian_losses(M, Q, d.labels[s:s + chunk], cfg.mc_samples_multiclass, seed,
                                np.arange(s, min(s + chunk, d.m)), cfg.workers)
        total += float(v.sum())
    return total / d.m


def sgd_step(state: TrainState, grads, lr: float, momentum: float = 0.9) -> TrainState:
    """v <- momentum v + g; mu <- mu - lr v, for both mean matrices."""
    g0, g1 = (np.asarray(g, float) for g in grads)
    if g0.shape != state.hp.mu0.shape or g1.shape != state.hp.mu1.shape:
        raise ValueError("gradient shapes do not match the trainable means")
    if not (np.all(np.isfinite(g0)) and np.all(np.isfinite(g1))):
        raise NonFiniteError(
            f"non-finite gradient at epoch {state.epoch}: "
            f"{np.count_nonzero(~np.isfinite(g0))} bad entries in mu0, {np.count_nonzero(~np.isfinite(g1))} in mu1"
        )
    v0 = momentum * state.velocity[0] + g0
    v1 = momentum * state.velocity[1] + g1
    hp = state.hp.with_means(state.hp.mu0 - lr * v0, state.hp.mu1 - lr * v1)
    return replace(state, hp=hp, velocity=(v0, v1))


def init_state(cfg: TrainConfig, d: Dataset, hp0: HyperParams | None = None) -> TrainState:
    if hp0 is None:
        hp0 = init_hyperparams(d.p, cfg.hidden, d.q, cfg.activation, cfg.seed)
    if hp0.dims != (d.p, hp0.dims[1], d.q):
        raise ValueError("initial network does not match the dataset dimensions")
    lam = cfg.lambda_init if cfg.objective.uses_lambda else None
    vel = (np.zeros_like(hp0.mu0), np.zeros_like(hp0.mu1))
    return TrainState(hp=hp0, prior=hp0, velocity=vel, lam=lam)


def _metric_row(state: TrainState, cfg: TrainConfig, d: Dataset, surrogate_mean: float | None) -> MetricRow:
    kind = cfg.objective
    g_loss = gaussian_loss_full(state.hp, d, cfg, _sub_seed(cfg.seed, _MC_METRIC, state.epoch))
    KL = gauss_kl(state.hp, state.prior)[0]
    pen = kl_penalty(KL, d.m, cfg.delta)
    g_bound = bern_kl_inv(g_loss, pen)
    if not (math.isfinite(g_loss) and math.isfinite(KL)):
        raise NonFiniteError(f"non-finite loss or KL at epoch {state.epoch}")
    if kind.gaussian:
        obj = objective_with_grad(kind, g_loss, KL, d.m, cfg.delta, state.lam).value
    else:
        L = surrogate_mean if surrogate_mean is not None else _surrogate_full(state.hp, d, cfg)
        obj = objective_with_grad(kind, L, KL, d.m, cfg.delta, state.lam).value
    return MetricRow(state.epoch, obj, g_loss, pen, g_bound, state.lam)


def _surrogate_full(hp, d: Dataset, cfg: TrainConfig) -> float:
    rng = _rng(cfg.seed, _WEIGHTS, 0, 0)
    return _surrogate_batch(hp, d.X, d.labels, cfg.objective, cfg.surrogate_clamp_p0, rng)[0]


def train(cfg: TrainConfig, d: Dataset, hp0: HyperParams | None = None, checkpoint_dir=None,
          on_epoch=None) -> TrainState:
    """Run the configured schedule; one metrics row at epoch 0 and after every epoch."""
    kind = cfg.objective
    state = init_state(cfg, d, hp0)
    state.metrics_log.append(_metric_row(state, cfg, d, None))
    if on_epoch:
        on_epoch(state.metrics_log[-1])
    bs = d.m if cfg.batch_size == 0 else min(cfg.batch_size, d.m)
    for epoch in range(1, cfg.total_epochs + 1):
        lr = cfg.lr_at(epoch)
        order = _rng(cfg.seed, _SHUFFLE, epoch).permutation(d.m)
        sur_sum, sur_w = 0.0, 0
        for step, s in enumerate(range(0, d.m, bs)):
            idx = order[s:s + bs]
            X, y = d.X[idx], d.labels[idx]
            KL, (k0, k1) = gauss_kl(state.hp, state.prior)
            if kind.gaussian:
                M, Q, cache = forward_batch(state.hp, X)
                v, gM, gQ, _ = gaussian_losses(M, Q, y, cfg.mc_samples_multiclass,
                                               _sub_seed(cfg.seed, _MC_STEP, epoch, step), idx, cfg.workers)
                L = float(v.mean())
                g0, g1 = forward_grads_batch(state.hp, cache, gM / len(idx), gQ / len(idx))
            else:
                L, g0, g1 = _surrogate_batch(state.hp, X, y, kind, cfg.surrogate_clamp_p0,
                                             _rng(cfg.seed, _WEIGHTS, epoch, step))
                sur_sum += L * len(idx)
                sur_w += len(idx)
            if not math.isfinite(L):
                raise NonFiniteError(f"non-finite batch loss at epoch {epoch}, step {step}")
            ov = objective_with_grad(kind, min(L, 1.0) if kind.gaussian else L, KL, d.m, cfg.delta, state.lam)
            grads = (ov.d_loss * g0 + ov.d_kl * k0, ov.d_loss * g1 + ov.d_kl * k1)
            state = sgd_step(state, grads, lr, cfg.momentum)
        state.epoch = epoch
        sur_mean = sur_sum / sur_w if sur_w else None
        if kind.uses_lambda:
            KL = gauss_kl(state.hp, state.prior)[0]
            L = gaussian_loss_full(state.hp, d, cfg, _sub_seed(cfg.seed, _MC_METRIC, epoch)) if kind.gaussian else sur_mean
            dlam = objective_with_grad(kind, L, KL, d.m, cfg.delta, state.lam).d_lambda
            state.lam = float(np.clip(state.lam - lr * dlam, *LAMBDA_BOUNDS))
        state.metrics_log.append(_metric_row(state, cfg, d, sur_mean))
        if on_epoch:
            on_epoch(state.metrics_log[-1])
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"checkpoint-epoch{epoch:06d}.npz", state.hp, state.prior,
                            {"epoch": epoch, "lambda": state.lam})
    return state


def metrics_csv(rows, header: str | None = None) -> str:
    """CSV text for a metrics log; floats written with repr so reruns compare byte-for-byte."""
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r.epoch, repr(r.objective), repr(r.g_loss), repr(r.kl_penalty), repr(r.g_bound),
                    "" if r.lam is None else repr(r.lam)])
    return buf.getvalue()
