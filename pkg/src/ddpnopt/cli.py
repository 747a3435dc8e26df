"""Experiment harness: ``ddpnopt {train,spectrum,vanishing,ablation} --config cfg.json``.

Configs are JSON and validated up front; unknown keys are rejected.  Every
floating-point value in the CSV outputs is printed with 17 significant
digits, and all randomness is seeded from the config, so reruns reproduce
the files byte for byte.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .analysis import feedback_spectrum
from .data import Dataset, blob_images, gaussian_clusters, load_csv, standardize
from .ddp_core import DDPOptions
from .errors import ConfigError, DDPError
from .losses import make_loss
from .network import Affine, Conv, LayerSpec, NetworkSpec
from .optimizers import (AdamMethod, DDPNOptMethod, OptimizerConfig, RMSpropMethod, SGDMethod,
                         train)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Strict):
    kind: Literal["gaussian_clusters", "blob_images", "csv"] = "gaussian_clusters"
    k: int = Field(5, ge=2)
    dim: int = Field(30, ge=1)
    n_per_cluster: int = Field(100, ge=1)
    sigma: float = Field(1.0, ge=0)
    center_scale: float = Field(5.0, gt=0)
    n: int = Field(200, ge=2)
    size: int = Field(8, ge=3)
    noise: float = Field(0.1, ge=0)
    seed: int = 0
    path: Optional[str] = None
    label_column: str = "label"
    normalize: bool = False

    @model_validator(mode="after")
    def _path_for_csv(self):
        if self.kind == "csv" and not self.path:
            raise ValueError("dataset.path is required for kind 'csv'")
        return self


class NetworkConfig(_Strict):
    hidden: List[int] = [32, 32]
    activation: Literal["identity", "relu", "tanh", "sigmoid"] = "tanh"
    output_activation: Literal["identity", "relu", "tanh", "sigmoid"] = "identity"
    out_dim: Optional[int] = Field(None, ge=1)
    conv_channels: List[int] = []
    init: Literal["uniform_fan_in", "small_normal"] = "uniform_fan_in"


class LossConfig(_Strict):
    kind: Literal["ce", "mse", "mmc"] = "ce"
    radius: Optional[float] = Field(None, gt=0)


class OptimConfig(_Strict):
    method: Literal["ddpnopt", "sgd", "rmsprop", "adam"] = "ddpnopt"
    eta: float = Field(0.1, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    beta: Optional[float] = Field(None, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    precond: Literal["identity", "adaptive_diag", "kronecker"] = "identity"
    damping: float = Field(1e-2, gt=0)
    tikhonov_lambda: float = Field(1e-3, ge=0)
    feedback_scale: float = Field(1.0, ge=0, le=1)
    open_gain_scale: float = Field(1.0, gt=0, le=1)
    second_order_dynamics: bool = False
    factored: bool = False
    rank1_terminal: bool = False
    line_search: bool = False
    weight_decay: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _modes(self):
        if self.factored and self.tikhonov_lambda > 0:
            raise ValueError("factored mode cannot be combined with tikhonov_lambda > 0")
        if self.factored and self.second_order_dynamics:
            raise ValueError("factored mode cannot be combined with second-order dynamics")
        return self


class SpectrumConfig(_Strict):
    threshold: float = Field(0.01, gt=0, lt=1)
    layers: List[int] = [-1]


class VanishingConfig(_Strict):
    sgd_etas: List[float] = [0.01, 0.03, 0.1]
    sgd_momentum: float = Field(0.0, ge=0, lt=1)
    window: int = Field(500, ge=1)


class AblationConfig(_Strict):
    etas: List[float] = [0.01, 0.03, 0.1]
    weight_decays: List[float] = [0.0, 1e-3]


class ExperimentConfig(_Strict):
    experiment: Literal["train", "spectrum", "vanishing", "ablation"] = "train"
    dataset: DatasetConfig = DatasetConfig()
    network: NetworkConfig = NetworkConfig()
    loss: LossConfig = LossConfig()
    optimizer: OptimConfig = OptimConfig()
    epochs: int = Field(1, ge=0)
    batch_size: int = Field(16, ge=1)
    max_iterations: Optional[int] = Field(None, ge=0)
    seeds: List[int] = Field([0], min_length=1)
    out: str = "runs"
    spectrum: SpectrumConfig = SpectrumConfig()
    vanishing: VanishingConfig = VanishingConfig()
    ablation: AblationConfig = AblationConfig()


# -- builders ---------------------------------------------------------------

def build_dataset(cfg: DatasetConfig) -> Dataset:
    if cfg.kind == "gaussian_clusters":
        ds = gaussian_clusters(cfg.k, cfg.dim, cfg.n_per_cluster, cfg.sigma, cfg.center_scale, cfg.seed)
    elif cfg.kind == "blob_images":
        ds = blob_images(cfg.n, cfg.size, cfg.seed, cfg.noise)
    else:
        ds = load_csv(cfg.path, cfg.label_column)
    return standardize(ds) if cfg.normalize else ds


def build_network(cfg: NetworkConfig, in_dim: int, out_dim: int) -> NetworkSpec:
    layers = []
    n = in_dim
    if cfg.conv_channels:
        side = int(round(math.sqrt(in_dim)))
        if side * side != in_dim:
            raise ConfigError(f"conv layers need square single-channel inputs, got dimension {in_dim}")
        ch = 1
        for c in cfg.conv_channels:
            layers.append(LayerSpec(Conv(ch, c, side, side), cfg.activation))
            ch = c
        n = ch * side * side
    for h in cfg.hidden:
        layers.append(LayerSpec(Affine(n, h), cfg.activation))
        n = h
    layers.append(LayerSpec(Affine(n, out_dim), cfg.output_activation))
    return NetworkSpec(tuple(layers))


def optimizer_config(cfg: OptimConfig, seed: int, **overrides) -> OptimizerConfig:
    c = cfg.model_copy(update=overrides)
    if c.method == "sgd":
        method = SGDMethod(c.eta, c.momentum)
    elif c.method == "rmsprop":
        method = RMSpropMethod(c.eta, 0.99 if c.beta is None else c.beta, c.eps)
    elif c.method == "adam":
        method = AdamMethod(c.eta, c.beta1, c.beta2, c.eps)
    else:
        opts = DDPOptions(c.second_order_dynamics, c.tikhonov_lambda, c.feedback_scale, c.open_gain_scale)
        method = DDPNOptMethod(c.precond, c.eta, c.beta, c.eps, c.damping, opts, c.factored,
                               c.rank1_terminal, c.line_search)
    return OptimizerConfig(method, c.weight_decay, seed)


class Setup:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.dataset = build_dataset(cfg.dataset)
        k = self.dataset.num_classes
        out_dim = cfg.network.out_dim or k
        if cfg.loss.kind in ("ce", "mse") and out_dim != k:
            raise ConfigError(f"{cfg.loss.kind} loss needs out_dim == number of classes ({k})")
        self.net = build_network(cfg.network, self.dataset.dim, out_dim)
        self.loss = make_loss(cfg.loss.kind, k, out_dim, cfg.loss.radius)

    def run(self, seed, callback=None, **overrides):
        c = self.cfg
        return train(self.net, self.dataset, optimizer_config(c.optimizer, seed, **overrides), c.epochs,
                     c.batch_size, seed, self.loss, c.max_iterations, init_scheme=c.network.init,
                     callback=callback)


# -- output helpers ---------------------------------------------------------

def f17(x) -> str:
    return "%.17g" % x


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f17(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n", encoding="utf-8")


def mean_std(values):
    """Mean and sample standard deviation (``ddof=1``; 0 for a single value)."""
    a = np.asarray(values, dtype=float)
    sd = float(a.std(ddof=1)) if a.size > 1 else 0.0
    return {"mean": float(a.mean()), "std": sd, "n": int(a.size)}


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(fn, items))


# -- subcommands ------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    s = Setup(cfg)
    L = len(s.net)
    records = _map(s.run, cfg.seeds, threads)
    header = ["seed", "epoch", "iteration", "train_loss", "train_acc", "eval_loss", "eval_acc"]
    for name in ("grad_norm", "k_norm", "feedback_norm", "du_norm"):
        header += [f"{name}_{t}" for t in range(L)]
    rows = []
    for rec in records:
        for it in rec.iterations:
            m = it.metrics
            rows.append([rec.seed, it.epoch, it.iteration, m.loss_before, m.accuracy, it.eval_loss,
                         it.eval_acc] + list(m.grad_norms) + list(m.k_norms) + list(m.feedback_norms)
                        + list(m.du_norms))
    _write_csv(out / "metrics.csv", header, rows)
    _write_json(out / "final_weights.json",
                {str(r.seed): [[float(v) for v in u] for u in r.weights] for r in records})
    _write_json(out / "run_summary.json", {
        "config": cfg.model_dump(mode="json"),
        "per_seed": [{"seed": r.seed, "final_loss": r.eval_loss, "final_acc": r.eval_acc,
                      "iterations": len(r.iterations)} for r in records],
        "final_loss": mean_std([r.eval_loss for r in records]),
        "final_acc": mean_std([r.eval_acc for r in records]),
    })
    return 0


def checkpoints(total: int):
    """Geometric schedule 1, 2, 4, ... below ``total``, plus ``total`` itself."""
    out, c = [], 1
    while c < total:
        out.append(c)
        c *= 2
    if total >= 1:
        out.append(total)
    return out


def cmd_spectrum(cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    s = Setup(cfg)
    L = len(s.net)
    layers = sorted({t % L for t in cfg.spectrum.layers})
    thr = cfg.spectrum.threshold

    def one(seed):
        captured = {}

        def cb(it, opt, w, metrics):
            captured[it] = [feedback_spectrum(opt.last_policies[t].K, thr, t) for t in layers]

        rec = s.run(seed, callback=cb)
        total = len(rec.iterations)
        return seed, [(c, captured[c]) for c in checkpoints(total)]

    results = _map(one, cfg.seeds, threads)
    width = max((len(r.singular_values) for _, res in results for _, reps in res for r in reps), default=0)
    rows, summary = [], []
    for seed, res in results:
        for c, reps in res:
            for r in reps:
                sv = [float(v) for v in r.singular_values]
                rows.append([seed, c, r.layer, r.effective_rank] + sv + [""] * (width - len(sv)))
        if res:
            summary.append({"seed": seed, "final_checkpoint": res[-1][0],
                            "effective_rank": {str(r.layer): r.effective_rank for r in res[-1][1]}})
    _write_csv(out / "spectrum.csv",
               ["seed", "checkpoint", "layer", "effective_rank"] + [f"sv_{i}" for i in range(width)], rows)
    _write_json(out / "run_summary.json", {"config": cfg.model_dump(mode="json"), "final": summary,
                                           "num_classes": s.dataset.num_classes})
    return 0


VANISHING_METHODS = ("sgd", "ddpnopt", "ddpnopt2nd")


def _vanishing_stats(recs, window):
    """Loss reduction of the full-data training loss and early ``|du|`` per layer."""
    red = [1.0 - r.eval_loss / r.initial_eval_loss for r in recs]
    du = np.array([[it.metrics.du_norms for it in r.iterations[:window]] for r in recs])
    return red, du


def cmd_vanishing(cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    s = Setup(cfg)
    L = len(s.net)
    vc = cfg.vanishing

    # SGD: tune eta on mean final training loss; ties go to the first listed value
    tuning = {}
    best_eta, best_loss, sgd_recs = None, math.inf, None
    for eta in vc.sgd_etas:
        recs = _map(lambda sd: s.run(sd, method="sgd", eta=eta, momentum=vc.sgd_momentum,
                                     weight_decay=cfg.optimizer.weight_decay), cfg.seeds, threads)
        ml = float(np.mean([r.eval_loss for r in recs]))
        tuning[f17(eta)] = ml
        if ml < best_loss:
            best_eta, best_loss, sgd_recs = eta, ml, recs
    runs = {"sgd": sgd_recs,
            "ddpnopt": _map(lambda sd: s.run(sd, second_order_dynamics=False), cfg.seeds, threads),
            "ddpnopt2nd": _map(lambda sd: s.run(sd, second_order_dynamics=True), cfg.seeds, threads)}

    header = ["seed", "iteration"]
    header += [f"{m}_batch_loss" for m in VANISHING_METHODS]
    header += [f"{m}_train_loss" for m in VANISHING_METHODS]
    for m in VANISHING_METHODS:
        header += [f"{m}_du_{t}" for t in range(L)]
    header += [f"ratio_du_{t}" for t in range(L)]
    rows = []
    for j, seed in enumerate(cfg.seeds):
        its = {m: runs[m][j].iterations for m in VANISHING_METHODS}
        row0 = [seed, 0, "", "", ""] + [runs[m][j].initial_eval_loss for m in VANISHING_METHODS]
        rows.append(row0 + [""] * (4 * L))
        for i in range(len(its["sgd"])):
            ms = {m: its[m][i].metrics for m in VANISHING_METHODS}
            r = [seed, i + 1] + [ms[m].loss_before for m in VANISHING_METHODS]
            r += [its[m][i].eval_loss for m in VANISHING_METHODS]
            for m in VANISHING_METHODS:
                r += list(ms[m].du_norms)
            r += [_ratio(a, b) for a, b in zip(ms["ddpnopt2nd"].du_norms, ms["sgd"].du_norms)]
            rows.append(r)
    _write_csv(out / "vanishing.csv", header, rows)

    summary = {"config": cfg.model_dump(mode="json"), "sgd_eta": best_eta, "sgd_tuning": tuning,
               "methods": {}}
    du = {}
    for m in VANISHING_METHODS:
        red, du[m] = _vanishing_stats(runs[m], vc.window)
        summary["methods"][m] = {"loss_reduction": mean_std(red),
                                 "initial_loss": mean_std([r.initial_eval_loss for r in runs[m]]),
                                 "final_loss": mean_std([r.eval_loss for r in runs[m]])}
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = du["ddpnopt2nd"] / du["sgd"]
    summary["median_du_ratio"] = [float(np.median(ratio[:, :, t])) for t in range(L)] if ratio.size else []
    _write_json(out / "run_summary.json", summary)
    return 0


def _ratio(a, b):
    if b > 0:
        return a / b
    return math.inf if a > 0 else math.nan


def cmd_ablation(cfg: ExperimentConfig, out: Path, threads: int = 1) -> int:
    s = Setup(cfg)
    ac = cfg.ablation
    cells = [(eta, wd, g) for eta in ac.etas for wd in ac.weight_decays for g in (0.0, 1.0)]
    jobs = [(c, seed) for c in cells for seed in cfg.seeds]
    recs = _map(lambda job: s.run(job[1], eta=job[0][0], weight_decay=job[0][1], feedback_scale=job[0][2]),
                jobs, threads)
    by_cell = {}
    for (c, _), r in zip(jobs, recs):
        by_cell.setdefault(c, []).append(r)
    stats = {c: (mean_std([r.eval_loss for r in rs]), mean_std([r.eval_acc for r in rs]))
             for c, rs in by_cell.items()}
    rows = []
    for eta, wd, g in cells:
        lo, ac_ = stats[(eta, wd, g)]
        d_loss = stats[(eta, wd, 1.0)][0]["mean"] - stats[(eta, wd, 0.0)][0]["mean"]
        d_acc = stats[(eta, wd, 1.0)][1]["mean"] - stats[(eta, wd, 0.0)][1]["mean"]
        rows.append([float(eta), float(wd), g, lo["mean"], lo["std"], ac_["mean"], ac_["std"], d_loss, d_acc])
    _write_csv(out / "grid.csv", ["eta", "weight_decay", "gamma", "final_loss_mean", "final_loss_std",
                                  "final_acc_mean", "final_acc_std", "diff_loss", "diff_acc"], rows)
    _write_json(out / "run_summary.json", {"config": cfg.model_dump(mode="json"), "cells": len(cells)})
    return 0


COMMANDS = {"train": cmd_train, "spectrum": cmd_spectrum, "vanishing": cmd_vanishing, "ablation": cmd_ablation}


def load_config(path, command=None, **overrides) -> ExperimentConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    if command is not None:
        raw["experiment"] = command
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def check_experiment(cfg: ExperimentConfig):
    """Experiment-specific constraints, checked before anything is written."""
    kind = cfg.experiment
    if kind != "train" and cfg.optimizer.method != "ddpnopt":
        raise ConfigError(f"{kind} experiments need optimizer.method = 'ddpnopt'")
    if kind == "vanishing":
        if len(cfg.network.hidden) + len(cfg.network.conv_channels) + 1 < 5:
            raise ConfigError("vanishing experiments need a network with at least 5 layers")
        if cfg.network.activation != "sigmoid":
            raise ConfigError("vanishing experiments need sigmoid hidden activations")


def run_experiment(cfg: ExperimentConfig, out=None, threads: int = 1) -> Path:
    check_experiment(cfg)
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[cfg.experiment](cfg, out, threads)
    return out


def build_parser():
    p = argparse.ArgumentParser(prog="ddpnopt", description="DDPNOpt experiment harness")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--seed", type=int, action="append", help="seed; repeat for several (overrides config)")
        sp.add_argument("--threads", type=int, default=1, help="run seeds / grid cells in parallel")
        sp.add_argument("--epochs", type=int, help="override epochs")
        sp.add_argument("--max-iterations", type=int, help="override max_iterations")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command, seeds=args.seed, out=args.out, epochs=args.epochs,
                          max_iterations=args.max_iterations)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = run_experiment(cfg, threads=args.threads)
    except ConfigError as exc:
        print(f"ddpnopt: config error: {exc}", file=sys.stderr)
        return 2
    except (DDPError, OSError) as exc:
        print(f"ddpnopt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
