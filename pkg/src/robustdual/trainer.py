"""Robust training on the dual bound, epsilon/lr schedules and cascades."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .netgraph import BatchNormFixed, NetworkGraph, forward_trace, predict
from .autodual import EXACT, build_dual, objective
from .certifier import SLACK, BallSpec, certify_batch, target_rows
from .projest import ProjectionPlan

log = logging.getLogger(__name__)

NO_CERTIFICATE = -1


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries the last good network."""

    def __init__(self, message: str, net: NetworkGraph, epoch: int, example: int | None = None):
        super().__init__(message)
        self.net = net
        self.epoch = epoch
        self.example = example


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"              # adam or sgd
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    momentum: float = 0.9
    batch_size: int = 50
    epochs: int = 10
    eps_start: float = 0.01
    eps_end: float = 0.1
    eps_warmup_epochs: int = 1
    lr_decay_factor: float = 0.5
    lr_decay_period: int = 10
    projection: int | None = None        # r for median projections, None for exact bounds
    norm: str = "linf"
    seed: int = 0
    eval_limit: int | None = None        # cap on examples used for per-epoch robust error
    eval_every: int = 1                  # evaluate every n epochs (0: last epoch only)

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0 <= self.eps_start <= self.eps_end:
            raise ValueError(f"need 0 <= eps_start <= eps_end, got {self.eps_start}, {self.eps_end}")
        if self.eps_warmup_epochs < 1:
            raise ValueError("eps_warmup_epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.projection is not None and self.projection < 1:
            raise ValueError("projection count must be >= 1")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be linf or l2, got {self.norm!r}")
        if self.eval_every < 0:
            raise ValueError("eval_every must be >= 0")

    @classmethod
    def mnist_default(cls, **kw) -> "TrainConfig":
        return cls(**{"optimizer": "adam", "lr": 1e-3, "batch_size": 50, **kw})

    @classmethod
    def cifar_default(cls, **kw) -> "TrainConfig":
        return cls(**{"optimizer": "sgd", "lr": 0.05, "batch_size": 50, **kw})

    def eps_at(self, epoch: int) -> float:
        """Linear ramp from eps_start (epoch 0) to eps_end (epoch warmup-1)."""
        if self.eps_warmup_epochs <= 1:
            return self.eps_end
        frac = min(1.0, epoch / (self.eps_warmup_epochs - 1))
        return self.eps_start + (self.eps_end - self.eps_start) * frac

    def lr_at(self, epoch: int) -> float:
        after = max(0, epoch - self.eps_warmup_epochs)
        return self.lr * self.lr_decay_factor ** (after // self.lr_decay_period)

    def plan_for(self, epoch: int, batch: int) -> object:
        if self.projection is None:
            return EXACT
        seed = int(np.random.SeedSequence([self.seed, epoch, batch]).generate_state(1, np.uint64)[0])
        return ProjectionPlan(int(self.projection), seed=seed)


# optimizers ---------------------------------------------------------------------------


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - self.b1 ** self.t)
            vh = v / (1 - self.b2 ** self.t)
            out[k] = params[k] - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.buf: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        out = {}
        for k, g in grads.items():
            b = self.buf.get(k, 0.0) * self.momentum + g
            self.buf[k] = b
            out[k] = params[k] - self.lr * b
        return out


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.lr, cfg.betas) if cfg.optimizer == "adam" else SGD(cfg.lr, cfg.momentum)


# loss ---------------------------------------------------------------------------------


def surrogate_logits(net: NetworkGraph, X, y, eps: float, mode=EXACT, norm: str = "linf") -> Tensor:
    """``-J`` for ``c = e_y - e_j`` over all classes j; entry y is exactly 0."""
    C = target_rows(net.output_dim, y)
    dual, _ = build_dual(net, X, eps, norm, mode)
    return -objective(dual, C)


def _loss_tensor(net, X, y, eps, mode, norm) -> tuple[Tensor, Tensor]:
    z = surrogate_logits(net, X, y, eps, mode, norm)
    zy = T.getitem(z, (np.arange(len(y)), np.asarray(y)))
    per = T.logsumexp(z, axis=1) - zy
    return T.mean(per), per


def robust_loss(net: NetworkGraph, X, y, eps: float, proj=EXACT, norm: str = "linf",
                params: Sequence[str] | None = None) -> tuple[float, dict]:
    """Mean cross-entropy of the surrogate logits and its parameter gradients."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if y.min(initial=0) < 0 or y.max(initial=0) >= net.output_dim:
        raise ValueError(f"labels must lie in [0, {net.output_dim})")
    if isinstance(proj, int):
        proj = ProjectionPlan(proj)
    names = net.trainable() if params is None else list(params)
    g_net = net.requiring_grad(names)
    leaves = g_net.parameters()
    try:
        with T.Tape() as tape:
            loss, _ = _loss_tensor(g_net, X, y, eps, proj, norm)
        grads = tape.gradient(loss, [leaves[k] for k in names])
    except T.NonFiniteError as exc:
        bad = _find_nonfinite(net, X, y, eps, proj, norm)
        raise T.NonFiniteError(f"non-finite robust loss at example {bad}: {exc}") from exc
    return loss.item(), dict(zip(names, grads))


def _find_nonfinite(net, X, y, eps, proj, norm) -> int | None:
    for i in range(len(X)):
        try:
            loss, _ = _loss_tensor(net, X[i:i + 1], y[i:i + 1], eps, proj, norm)
        except T.NonFiniteError:
            return i
        if not math.isfinite(loss.item()):
            return i
    return None


# batchnorm statistics --------------------------------------------------------------------


def refresh_batchnorm(net: NetworkGraph, X, batch_size: int = 500) -> NetworkGraph:
    """Recompute and freeze the statistics of every BatchNormFixed layer on ``X``."""
    bn = [l for l in net.layers if isinstance(l.kind, BatchNormFixed)]
    if not bn or len(X) == 0:
        return net
    sums: dict = {}
    for s in range(0, len(X), batch_size):
        zs = forward_trace(net, X[s:s + batch_size])
        for l in bn:
            z = zs[l.inputs[0]].data
            axes = (0, 2, 3) if z.ndim == 4 else (0,)
            n = z.size // np.prod([z.shape[a] for a in range(z.ndim) if a not in axes])
            acc = sums.setdefault(l.id, [0.0, 0.0, 0])
            acc[0] = acc[0] + z.sum(axis=axes)
            acc[1] = acc[1] + (z * z).sum(axis=axes)
            acc[2] += n
    upd = {}
    for lid, (s1, s2, n) in sums.items():
        mu = s1 / n
        upd[f"{lid}.mean"] = mu
        upd[f"{lid}.var"] = np.maximum(s2 / n - mu * mu, 0.0)
    return net.with_parameters(upd)


# training -------------------------------------------------------------------------------


METRIC_FIELDS = ("epoch", "epsilon", "train_robust_loss", "train_robust_error", "test_robust_error",
                 "train_standard_error", "test_standard_error")


@dataclass
class TrainResult:
    net: NetworkGraph
    metrics: list[dict] = field(default_factory=list)


def _subset(X, y, limit, seed):
    if limit is None or len(X) <= limit:
        return X, y
    idx = np.random.default_rng(seed).permutation(len(X))[:limit]
    return X[idx], y[idx]


def evaluate(net: NetworkGraph, X, y, eps: float, norm: str = "linf", limit: int | None = None,
             seed: int = 0, batch_size: int = 100) -> tuple[float, float]:
    """(robust error, standard error) with exact bounds."""
    from .certifier import robust_error
    if len(X) == 0:
        return float("nan"), float("nan")
    X, y = _subset(np.asarray(X), np.asarray(y), limit, seed)
    rep = robust_error(net, X, y, eps, norm, EXACT, batch_size)
    return rep.robust, rep.standard


def train(net: NetworkGraph, X, y, cfg: TrainConfig, X_test=None, y_test=None,
          metrics_path: str | None = None, callback: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimize the robust loss with a linear epsilon ramp and stepwise lr decay."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if len(X) == 0:
        raise ValueError("training set is empty")
    opt = make_optimizer(cfg)
    names = net.trainable()
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        writer.writeheader()
    result = TrainResult(net)
    try:
        for epoch in range(cfg.epochs):
            eps = cfg.eps_at(epoch)
            opt.lr = cfg.lr_at(epoch)
            net = refresh_batchnorm(net, X)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(X))
            losses, sizes = [], []
            for b, s in enumerate(range(0, len(X), cfg.batch_size)):
                idx = order[s:s + cfg.batch_size]
                try:
                    loss, grads = robust_loss(net, X[idx], y[idx], eps, cfg.plan_for(epoch, b), cfg.norm, names)
                except T.NonFiniteError as exc:
                    raise TrainingDiverged(str(exc), net, epoch) from exc
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss} in epoch {epoch}", net, epoch)
                params = {k: v.data for k, v in net.parameters().items() if k in grads}
                new = opt.step(params, grads)
                if not all(np.isfinite(v).all() for v in new.values()):
                    raise TrainingDiverged(f"parameters became non-finite in epoch {epoch}", net, epoch)
                net = net.with_parameters(new)
                losses.append(loss)
                sizes.append(len(idx))
            row = {"epoch": epoch + 1, "epsilon": eps,
                   "train_robust_loss": float(np.average(losses, weights=sizes))}
            last = epoch == cfg.epochs - 1
            due = last or (cfg.eval_every > 0 and (epoch + 1) % cfg.eval_every == 0)
            nan = float("nan")
            rtr, str_ = evaluate(net, X, y, eps, cfg.norm, cfg.eval_limit, cfg.seed) if due else (nan, nan)
            row["train_robust_error"], row["train_standard_error"] = rtr, str_
            if due and X_test is not None and len(X_test):
                rte, ste = evaluate(net, X_test, y_test, eps, cfg.norm, cfg.eval_limit, cfg.seed)
            else:
                rte = ste = nan
            row["test_robust_error"], row["test_standard_error"] = rte, ste
            result.metrics.append(row)
            result.net = net
            log.info("epoch %d eps=%.4f loss=%.4f robust_err=%.4f", epoch + 1, eps,
                     row["train_robust_loss"], rtr)
            if writer is not None:
                writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
                fh.flush()
            if callback is not None:
                callback(row)
    finally:
        if fh is not None:
            fh.close()
    result.net = net
    return result


# cascades ---------------------------------------------------------------------------------


@dataclass
class Cascade:
    stages: list[NetworkGraph]
    eps: list[float]
    norm: str = "linf"
    stats: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stages)


def certified_mask(net: NetworkGraph, X, eps: float, norm: str = "linf", batch_size: int = 100,
                   slack: float = SLACK) -> tuple[np.ndarray, np.ndarray]:
    """Predicted labels and certified flags with exact bounds."""
    preds, ok = [], []
    ball = BallSpec(norm, eps)
    for s in range(0, len(X), batch_size):
        for c in certify_batch(net, ball, X[s:s + batch_size], mode=EXACT, slack=slack):
            preds.append(c.predicted)
            ok.append(c.certified)
    return np.asarray(preds, dtype=int), np.asarray(ok, dtype=bool)


def cascade_train(stage_nets: Sequence[NetworkGraph], X, y, cfg: TrainConfig, X_test=None, y_test=None,
                  metrics_prefix: str | None = None) -> Cascade:
    """Train stages in order, each on the examples no earlier stage certifies."""
    if not stage_nets:
        raise ValueError("a cascade needs at least one stage")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    cascade = Cascade([], [], cfg.norm)
    work = np.arange(len(X))
    for i, net in enumerate(stage_nets):
        if work.size == 0:
            log.info("cascade stops after %d stages: nothing left to certify", i)
            break
        path = None if metrics_prefix is None else f"{metrics_prefix}{i + 1}.csv"
        stage_cfg = replace(cfg, seed=cfg.seed + i)
        res = train(net, X[work], y[work], stage_cfg, X_test, y_test, metrics_path=path)
        _, ok = certified_mask(res.net, X[work], cfg.eps_end, cfg.norm)
        cascade.stages.append(res.net)
        cascade.eps.append(cfg.eps_end)
        cascade.stats.append({"stage": i + 1, "trained_on": int(work.size), "certified": int(ok.sum()),
                              "metrics": res.metrics})
        work = work[~ok]
    return cascade


def cascade_predict(cascade: Cascade, X) -> np.ndarray:
    """Label from the first stage that certifies its prediction, else NO_CERTIFICATE."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == len(cascade.stages[0].input_shape)
    if single:
        X = X[None]
    out = np.full(len(X), NO_CERTIFICATE, dtype=int)
    todo = np.arange(len(X))
    for net, eps in zip(cascade.stages, cascade.eps):
        if todo.size == 0:
            break
        pred, ok = certified_mask(net, X[todo], eps, cascade.norm)
        out[todo[ok]] = pred[ok]
        todo = todo[~ok]
    return out[0] if single else out


def cascade_errors(cascade: Cascade, X, y) -> tuple[float, float]:
    """(robust error, standard error) of a cascade.

    Robust error counts wrong answers and NO_CERTIFICATE. The standard
    prediction is the first certifying stage's label, falling back to the last
    stage's plain prediction when no stage certifies.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    labels = cascade_predict(cascade, X)
    robust = float(np.mean(labels != y))
    fallback = predict(cascade.stages[-1], X)
    std = np.where(labels == NO_CERTIFICATE, fallback, labels)
    return robust, float(np.mean(std != y))
