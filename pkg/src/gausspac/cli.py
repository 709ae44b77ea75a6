"""Command-line entry point: ``gausspac {train,certify,verify-limit,gen-toy}``.

Each run reads one JSON config. Relative paths inside it are resolved against
the config file's directory. Every artifact records the config hash and the
root seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, kernels
from .data import Dataset, binarize_labels, load_dataset, load_mnist_idx, make_toy_clusters, save_dataset
from .diagnostics import limit_check, report_json, scaling_csv, scaling_study
from .errors import CheckpointError, ConfigError, IDXFormatError
from .gaussnet import init_hyperparams, load_checkpoint, save_checkpoint
from .pacbayes import BoundInputs, certify
from .train import TrainConfig, gaussian_loss_full, metrics_csv, train

EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3

_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__) - {"hidden", "activation", "workers"}


class RunContext:
    def __init__(self, path, seed_override=None, out=None, workers=None):
        path = Path(path)
        try:
            raw = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            self.cfg = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(self.cfg, dict):
            raise ConfigError("config must be a JSON object")
        self.base = path.resolve().parent
        self.config_sha256 = hashlib.sha256(raw).hexdigest()
        tr = self.cfg.get("train", {})
        self.seed = int(seed_override if seed_override is not None else tr.get("seed", 0))
        out = out or os.environ.get("GAUSSPAC_OUT") or self.cfg.get("out", "out")
        self.out = self.resolve(out)
        self.workers = int(workers or self.cfg.get("workers", 1))

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base / p

    @property
    def header(self) -> str:
        return f"config_sha256={self.config_sha256} seed={self.seed}"

    def meta(self) -> dict:
        return {"config_sha256": self.config_sha256, "seed": self.seed}

    # -- validation ------------------------------------------------------

    def dataset(self) -> Dataset:
        spec = self.cfg.get("dataset")
        if not isinstance(spec, dict) or "kind" not in spec:
            raise ConfigError("config needs a 'dataset' object with a 'kind'")
        kind = spec["kind"]
        if kind in ("mnist", "binary-mnist"):
            paths = []
            for key in ("images", "labels"):
                if key not in spec:
                    raise ConfigError(f"dataset.{key} is required for {kind}")
                p = self.resolve(spec[key])
                if not p.is_file():
                    raise ConfigError(f"dataset.{key}: file not found: {p}")
                paths.append(p)
            d = load_mnist_idx(*paths)
            if "limit" in spec:
                d = d.subset(np.arange(min(int(spec["limit"]), d.m)), f"{d.name}[:{spec['limit']}]")
            return binarize_labels(d) if kind == "binary-mnist" else d
        if kind == "toy":
            return make_toy_clusters(int(spec.get("m_per_class", 100)), int(spec.get("seed", 0)),
                                     spec.get("centers"), spec.get("spreads"))
        if kind == "npz":
            p = self.resolve(spec.get("path", ""))
            if not p.is_file():
                raise ConfigError(f"dataset.path: file not found: {p}")
            return load_dataset(p)
        raise ConfigError(f"unknown dataset kind {kind!r}")

    def train_config(self) -> TrainConfig:
        tr = dict(self.cfg.get("train", {}))
        unknown = set(tr) - _TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        net = self.cfg.get("network", {})
        tr["seed"] = self.seed
        try:
            return TrainConfig(hidden=int(net.get("hidden", 600)), activation=net.get("activation", "relu"),
                               workers=self.workers, **tr)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid train config: {exc}") from exc

    def bound_inputs(self, m: int, delta: float) -> BoundInputs:
        b = self.cfg.get("bound", {})
        try:
            return BoundInputs(m=m, delta=float(b.get("delta", delta)), delta_prime=float(b.get("delta_prime", 0.01)),
                               N_mc=int(b.get("N_mc", 150_000)))
        except ValueError as exc:
            raise ConfigError(f"invalid bound config: {exc}") from exc


def _versions() -> dict:
    return {"gausspac": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "kernel_backend": kernels.BACKEND}


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def cmd_train(ctx: RunContext) -> int:
    d = ctx.dataset()
    cfg = ctx.train_config()
    ctx.out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = ctx.out / "checkpoints" if cfg.checkpoint_every else None
    if ckpt_dir:
        ckpt_dir.mkdir(exist_ok=True)
    state = train(cfg, d, checkpoint_dir=ckpt_dir)
    _write(ctx.out / "metrics.csv", metrics_csv(state.metrics_log, ctx.header))
    digest = save_checkpoint(ctx.out / "checkpoint.npz", state.hp, state.prior,
                             {"epoch": state.epoch, "lambda": state.lam, **ctx.meta()})
    last = state.metrics_log[-1]
    manifest = {
        **ctx.meta(), "command": "train", "dataset": d.name, "m": d.m, "train_config": cfg.to_dict(),
        "checkpoint_sha256": digest, "final": {"g_loss": last.g_loss, "kl_penalty": last.kl_penalty,
                                               "g_bound": last.g_bound, "objective": last.objective},
        "versions": _versions(),
    }
    _write(ctx.out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    print(f"trained {cfg.total_epochs} epochs: G loss {last.g_loss:.4f}, G bound {last.g_bound:.4f}")
    return 0


def _summary(cert, header: str) -> str:
    cols = ("Bound", "G Bound", "G Loss", "Penalty")
    vals = (cert.final, cert.g_bound, cert.g_loss, cert.kl_penalty)
    fmt = lambda v: "-" if v is None else f"{v:.4f}"
    lines = [f"# {header}", "  ".join(f"{c:>8}" for c in cols), "  ".join(f"{fmt(v):>8}" for v in vals),
             f"L_hat={cert.L_hat:.6f} kl_inner={cert.kl_inner:.6f} KL={cert.KL:.4f} "
             f"N_mc={cert.N_mc} delta={cert.delta} delta_prime={cert.delta_prime}"]
    return "\n".join(lines) + "\n"


def cmd_certify(ctx: RunContext, checkpoint=None) -> int:
    ckpt = Path(checkpoint) if checkpoint else ctx.out / "checkpoint.npz"
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    hp, prior, meta = load_checkpoint(ckpt)
    if prior is None:
        raise CheckpointError("checkpoint carries no prior; cannot compute the KL penalty")
    d = ctx.dataset()
    cfg = ctx.train_config()
    inputs = ctx.bound_inputs(d.m, cfg.delta)
    g_loss = gaussian_loss_full(hp, d, cfg, ctx.seed)
    cert = certify(hp, prior, d.X, d.labels, inputs, seed=ctx.seed, workers=ctx.workers, g_loss=g_loss)
    ctx.out.mkdir(parents=True, exist_ok=True)
    _write(ctx.out / "certificate.json",
           cert.to_json(config_sha256=ctx.config_sha256, checkpoint_sha256=meta["sha256"], dataset=d.name,
                        versions=_versions()))
    summary = _summary(cert, ctx.header)
    _write(ctx.out / "summary.txt", summary)
    sys.stdout.write(summary)
    return 0


def cmd_verify_limit(ctx: RunContext) -> int:
    d = ctx.dataset()
    spec = ctx.cfg.get("limit", {})
    n = int(spec.get("n", 1200))
    activation = ctx.cfg.get("network", {}).get("activation", "relu")
    idx = int(spec.get("example_index", 0))
    if not 0 <= idx < d.m:
        raise ConfigError(f"limit.example_index {idx} out of range")
    hp = init_hyperparams(d.p, n, d.q, activation, ctx.seed)
    rep = limit_check(hp, d.X[idx], d.labels[idx], int(spec.get("n_samples", 100_000)), seed=ctx.seed)
    ctx.out.mkdir(parents=True, exist_ok=True)
    _write(ctx.out / "report.json", report_json(rep, **ctx.meta(), dataset=d.name, example_index=idx))
    if spec.get("n_grid"):
        seeds = spec.get("seeds", list(range(ctx.seed, ctx.seed + 10)))
        study = scaling_study(d.p, d.q, spec["n_grid"], d.X[idx], seeds, activation)
        _write(ctx.out / "scaling.csv", scaling_csv(study, ctx.header))
        _write(ctx.out / "scaling.json", json.dumps(
            {**ctx.meta(), "n_grid": study.n_grid, "seeds": study.seeds, "slope_median": study.slope_median,
             "slopes": study.slopes.tolist(), "B_ratio_median": study.B_ratio_median}, indent=2, sort_keys=True))
    print(f"n={n}: max KS {rep.ks_per_output.max():.4f}, loss gap {rep.loss_gap:.4g}")
    return 0


def cmd_gen_toy(ctx: RunContext) -> int:
    spec = dict(ctx.cfg.get("dataset", {}))
    if spec.get("kind", "toy") != "toy":
        raise ConfigError("gen-toy needs dataset.kind = 'toy'")
    spec["kind"] = "toy"
    ctx.cfg["dataset"] = spec
    d = ctx.dataset()
    ctx.out.mkdir(parents=True, exist_ok=True)
    save_dataset(ctx.out / "toy.npz", d)
    _write(ctx.out / "toy.json", json.dumps({**ctx.meta(), "name": d.name, "m": d.m, "p": d.p, "q": d.q},
                                            indent=2, sort_keys=True))
    print(f"wrote {d.m} points to {ctx.out / 'toy.npz'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gausspac", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("train", "certify", "verify-limit", "gen-toy"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out")
        sp.add_argument("--workers", type=int)
        sp.add_argument("--seed-override", type=int)
        if name == "certify":
            sp.add_argument("--checkpoint")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        ctx = RunContext(args.config, args.seed_override, args.out, args.workers)
        if args.command == "train":
            return cmd_train(ctx)
        if args.command == "certify":
            return cmd_certify(ctx, args.checkpoint)
        if args.command == "verify-limit":
            return cmd_verify_limit(ctx)
        return cmd_gen_toy(ctx)
    except (ConfigError, IDXFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
