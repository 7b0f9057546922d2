"""Scaled experiments: projection-vs-exact training parity and cascade trends."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .archs import build_arch, mlp
from .certifier import robust_error
from .io import load_idx_dir, synthetic_two_cluster
from .trainer import TrainConfig, cascade_errors, cascade_train, train

MNIST_SUBSET = os.path.join(os.path.dirname(__file__), "..", "..", "data", "mnist-subset")


def mnist_subset(path: str | None = None):
    """Fixed 2000/1000 MNIST subset as flat float arrays."""
    path = path or os.environ.get("ROBUSTDUAL_MNIST_SUBSET", MNIST_SUBSET)
    tr, te = load_idx_dir(path, "train"), load_idx_dir(path, "test")
    return tr.X.reshape(len(tr), -1), tr.y, te.X.reshape(len(te), -1), te.y


@dataclass(frozen=True)
class ParityConfig:
    epochs: int = 30
    warmup: int = 20
    eps: float = 0.1
    r: int = 10
    seeds: tuple = (0, 1, 2)
    hidden: int = 100


def parity_run(data, seed: int, projection: int | None, cfg: ParityConfig) -> float:
    X, y, Xt, yt = data
    net = mlp([X.shape[1], cfg.hidden, 10], seed=seed)
    tc = TrainConfig(epochs=cfg.epochs, eps_start=0.01, eps_end=cfg.eps, eps_warmup_epochs=cfg.warmup,
                     projection=projection, seed=seed, eval_every=0)
    res = train(net, X, y, tc)
    return robust_error(res.net, Xt, yt, cfg.eps, "linf").robust


def parity_experiment(cfg: ParityConfig = ParityConfig(), data=None) -> dict:
    """Final exact-certified test robust error for exact and r-projection training per seed."""
    data = data if data is not None else mnist_subset()
    exact = [parity_run(data, s, None, cfg) for s in cfg.seeds]
    proj = [parity_run(data, s, cfg.r, cfg) for s in cfg.seeds]
    gaps = [p - e for p, e in zip(proj, exact)]
    return {"exact": exact, "projected": proj, "gaps": gaps, "median_gap": float(np.median(gaps))}


@dataclass(frozen=True)
class CascadeConfig:
    eps: float = 0.1
    epochs: int = 20
    warmup: int = 5
    lr: float = 1e-3
    seeds: tuple = (0, 1, 2, 3, 4)
    arch: str = "mlp:2-32-32-2"
    n_train: int = 400
    n_test: int = 400
    extra: dict = field(default_factory=dict)


def _cascade_once(X, y, Xt, yt, cfg: CascadeConfig, seed: int, n_classes: int):
    def net(s):
        spec = cfg.arch
        if spec.startswith("mlp"):
            sizes = [int(v) for v in spec.partition(":")[2].split("-")]
            sizes[0], sizes[-1] = X.shape[1], n_classes
            return mlp(sizes, seed=s)
        return build_arch(spec, seed=s)

    tc = TrainConfig(epochs=cfg.epochs, eps_start=min(0.01, cfg.eps), eps_end=cfg.eps,
                     eps_warmup_epochs=cfg.warmup, lr=cfg.lr, seed=seed, eval_every=0, **cfg.extra)
    cas = cascade_train([net(seed), net(seed + 1000)], X, y, tc)
    c_rob, c_std = cascade_errors(cas, Xt, yt)
    single = cas.stages[0]
    rep = robust_error(single, Xt, yt, cfg.eps, tc.norm)
    return {"cascade_robust": c_rob, "cascade_standard": c_std,
            "single_robust": rep.robust, "single_standard": rep.standard}


def cascade_experiment(task: str, cfg: CascadeConfig, data=None) -> dict:
    """Per-seed cascade and single-model errors on ``two-cluster`` or ``mnist``.

    The single model is the first cascade stage, trained on the full set.
    """
    runs = []
    for s in cfg.seeds:
        if task == "two-cluster":
            tr = synthetic_two_cluster(cfg.n_train, cfg.eps, seed=s)
            te = synthetic_two_cluster(cfg.n_test, cfg.eps, seed=s + 7919)
            X, y, Xt, yt, nc = tr.X, tr.y, te.X, te.y, 2
        else:
            X, y, Xt, yt = data if data is not None else mnist_subset()
            nc = 10
        runs.append(_cascade_once(X, y, Xt, yt, cfg, s, nc))
    med = {k: float(np.median([r[k] for r in runs])) for k in runs[0]}
    return {"runs": runs, "median": med}


def full_mnist_run(path: str, epochs: int = 60, projection: int | None = 50, eps: float = 0.1,
                   seed: int = 0, metrics_path: str | None = None) -> float:
    """Small conv net on the full MNIST split; returns the exact certified test robust error."""
    tr, te = load_idx_dir(path, "train"), load_idx_dir(path, "test")
    X, Xt = tr.X.reshape((len(tr), 1, 28, 28)), te.X.reshape((len(te), 1, 28, 28))
    net = build_arch("conv-small", (1, 28, 28), 10, seed)
    cfg = TrainConfig.mnist_default(epochs=epochs, projection=projection, seed=seed, eps_end=eps,
                                    eval_every=0)
    res = train(net, X, tr.y, cfg, metrics_path=metrics_path)
    return robust_error(res.net, Xt, te.y, eps, "linf").robust
