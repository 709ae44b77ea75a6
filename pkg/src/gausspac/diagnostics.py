"""Empirical checks of the Gaussian limit at finite width."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import erf

from .gaussnet import HyperParams, bentkus_diagnostic, forward, init_hyperparams, sample_outputs
from .loss01 import multiclass_loss, binary_loss


def normal_cdf(x, mean=0.0, sd=1.0):
    return 0.5 * (1.0 + erf((np.asarray(x, float) - mean) / (sd * np.sqrt(2.0))))


def ks_statistic(samples, mean: float, sd: float) -> float:
    """Two-sided Kolmogorov-Smirnov distance between the sample ECDF and N(mean, sd^2).

    With ``sd == 0`` the reference is a point mass at ``mean``.
    """
    x = np.sort(np.asarray(samples, float).ravel())
    n = x.size
    if n == 0:
        raise ValueError("need at least one sample")
    if sd > 0:
        F = F_left = normal_cdf(x, mean, sd)
    else:
        F, F_left = (x >= mean).astype(float), (x > mean).astype(float)
    hi = np.arange(1, n + 1) / n - F
    lo = F_left - np.arange(n) / n
    return float(max(hi.max(), lo.max(), 0.0))


@dataclass(frozen=True)
class LimitReport:
    n: int
    ks_per_output: np.ndarray
    convex_gap_bound: float
    mc_loss: float
    gauss_loss: float
    loss_gap: float
    mc_stderr: float = 0.0
    gauss_stderr: float = 0.0
    n_samples: int = 0
    seed: int = 0
    degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ks_per_output"] = [float(v) for v in self.ks_per_output]
        return d


def limit_check(hp: HyperParams, x, label: int, n_samples: int = 100_000, seed: int = 0,
                gauss_samples: int = 1_000_000) -> LimitReport:
    """Compare exact network draws at one input with the Gaussian limit."""
    if n_samples < 1000:
        raise ValueError("n_samples must be >= 1000")
    out = forward(hp, x)
    q = hp.dims[2]
    Y = sample_outputs(hp, x, n_samples, seed=seed)
    sd = np.sqrt(np.clip(np.diag(out.Q), 0.0, None))
    ks = np.array([ks_statistic(Y[:, i], out.M[i], sd[i]) for i in range(q)])
    wrong = np.argmax(Y, axis=1) != int(label)
    mc_loss = float(wrong.mean())
    mc_err = float(np.sqrt(mc_loss * (1 - mc_loss) / n_samples))
    if q == 2:
        gl = binary_loss(out, label)
    else:
        gl = multiclass_loss(out, label, samples=gauss_samples, seed=seed + 1)
    gap = bentkus_diagnostic(hp, x).convex_set_gap
    # a network with (near) zero output spread is a poor fit for any Gaussian
    degenerate = bool(np.all(sd < 1e-8 * (1 + np.abs(out.M))))
    return LimitReport(
        n=hp.dims[1], ks_per_output=ks, convex_gap_bound=gap, mc_loss=mc_loss, gauss_loss=gl.value,
        loss_gap=abs(mc_loss - gl.value), mc_stderr=mc_err, gauss_stderr=gl.mc_stderr,
        n_samples=n_samples, seed=seed, degenerate=degenerate,
    )


def loss_gap_within_bound(r: LimitReport, k: float = 4.0) -> bool:
    return r.loss_gap <= r.convex_gap_bound + k * np.hypot(r.mc_stderr, r.gauss_stderr)


@dataclass(frozen=True)
class ScalingStudy:
    n_grid: list
    seeds: list
    B_upper: np.ndarray  # (len(seeds), len(n_grid))
    gap: np.ndarray
    slopes: np.ndarray  # per seed
    slope_median: float
    B_ratio_median: float

    def rows(self):
        for j, n in enumerate(self.n_grid):
            yield {
                "n": n,
                "B_upper_median": float(np.median(self.B_upper[:, j])),
                "gap_median": float(np.median(self.gap[:, j])),
                "B_upper_min": float(self.B_upper[:, j].min()),
                "B_upper_max": float(self.B_upper[:, j].max()),
            }


def loglog_slope(n, y) -> float:
    return float(np.polyfit(np.log(np.asarray(n, float)), np.log(np.asarray(y, float)), 1)[0])


def scaling_study(p: int, q: int, n_grid, x, seeds, activation="relu") -> ScalingStudy:
    """Bentkus bound at initialisation over a grid of widths."""
    n_grid = [int(n) for n in n_grid]
    if len(n_grid) < 4 or any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly increasing with at least 4 points")
    seeds = [int(s) for s in seeds]
    B = np.empty((len(seeds), len(n_grid)))
    G = np.empty_like(B)
    for i, s in enumerate(seeds):
        for j, n in enumerate(n_grid):
            d = bentkus_diagnostic(init_hyperparams(p, n, q, activation, seed=s), x)
            B[i, j], G[i, j] = d.B_upper, d.convex_set_gap
    slopes = np.array([loglog_slope(n_grid, G[i]) for i in range(len(seeds))])
    return ScalingStudy(
        n_grid=n_grid, seeds=seeds, B_upper=B, gap=G, slopes=slopes,
        slope_median=float(np.median(slopes)),
        B_ratio_median=float(np.median(B[:, -1] / B[:, 0])),
    )


def scaling_csv(study: ScalingStudy, header: str | None = None) -> str:
    buf = io.StringIO()
    if header:
        buf.write(f"# {header}\n")
    rows = list(study.rows())
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def report_json(obj, **meta) -> str:
    payload = obj.to_dict() if hasattr(obj, "to_dict") else dict(obj)
    return json.dumps({**payload, **meta}, indent=2, sort_keys=True)
