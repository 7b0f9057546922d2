"""Robust objective, certificates, robust error and an attack oracle."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .netgraph import NetworkGraph, forward, predict
from .autodual import EXACT, build_dual, objective
from . import projest as P

SLACK = 1e-6


@dataclass(frozen=True)
class BallSpec:
    norm: str
    eps: float
    x: np.ndarray | None = None

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"norm must be linf or l2, got {self.norm!r}")
        if not self.eps >= 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")

    def at(self, x) -> "BallSpec":
        return BallSpec(self.norm, self.eps, np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class Certificate:
    id: int
    label: int | None
    predicted: int
    J: np.ndarray              # per class; the predicted class holds +inf
    certified: bool
    mode: str
    slack: float = SLACK
    tail: P.TailPlan | None = field(default=None, compare=False)

    @property
    def min_j(self) -> float:
        others = np.delete(self.J, self.predicted)
        return float(others.min()) if others.size else math.inf


def _mode_name(mode) -> str:
    return "exact" if mode == EXACT else mode.describe()


def target_rows(n_classes: int, y) -> np.ndarray:
    """``C[b, j] = e_{y_b} - e_j`` for every class j (the row j = y_b is zero)."""
    y = np.atleast_1d(np.asarray(y, dtype=int))
    eye = np.eye(n_classes)
    return eye[y][:, None, :] - eye[None, :, :]


def robust_objective(net: NetworkGraph, ball: BallSpec, C, mode=EXACT, x=None) -> Tensor:
    """``J`` for every row of ``C`` and every example, shape ``(B, rows)``."""
    x = ball.x if x is None else x
    dual, _ = build_dual(net, x, ball.eps, ball.norm, mode)
    return objective(dual, C)


def _strict_argmax(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.argmax(logits, axis=1)
    top = logits[np.arange(len(pred)), pred]
    ties = (logits == top[:, None]).sum(axis=1) > 1
    return pred, ~ties


def certify_batch(net: NetworkGraph, ball: BallSpec, x=None, labels=None, mode=EXACT,
                  slack: float = SLACK, ids=None, tail: P.TailPlan | None = None) -> list[Certificate]:
    x = np.asarray(ball.x if x is None else x, dtype=np.float64)
    if x.shape == net.input_shape:
        x = x[None]
    logits = forward(net, x).data
    pred, strict = _strict_argmax(logits)
    C = target_rows(net.output_dim, pred)
    J = robust_objective(net, ball, C, mode, x).data.copy()
    J[np.arange(len(pred)), pred] = np.inf
    ok = (J.min(axis=1) > slack) & strict
    ids = range(len(pred)) if ids is None else ids
    labels = [None] * len(pred) if labels is None else np.asarray(labels)
    name = _mode_name(mode)
    return [Certificate(int(i), None if l is None else int(l), int(p), Jr, bool(c), name, slack, tail)
            for i, l, p, Jr, c in zip(ids, labels, pred, J, ok)]


def certify(net: NetworkGraph, ball: BallSpec, y_pred: int | None = None, mode=EXACT,
            slack: float = SLACK, example_id: int = 0, label: int | None = None) -> Certificate:
    """Certificate for the single anchor ``ball.x``."""
    x = np.asarray(ball.x, dtype=np.float64).reshape((1,) + net.input_shape)
    logits = forward(net, x).data
    pred, strict = _strict_argmax(logits)
    y = int(pred[0]) if y_pred is None else int(y_pred)
    C = target_rows(net.output_dim, y)
    J = robust_objective(net, ball, C, mode, x).data[0].copy()
    J[y] = np.inf
    ok = bool(J.min() > slack and strict[0] and y == pred[0])
    return Certificate(example_id, label, y, J, ok, _mode_name(mode), slack)


def high_prob_plan(net: NetworkGraph, delta: float, m: int, **kw) -> P.TailPlan:
    return P.plan_tail(delta, m=m, N=P.count_estimates_graph(net), **kw)


def certify_high_prob(net: NetworkGraph, ball: BallSpec, y_pred: int | None = None, delta: float = 0.01,
                      m: int = 10, seed: int = 0, tail: P.TailPlan | None = None,
                      slack: float = SLACK, example_id: int = 0, label: int | None = None) -> Certificate:
    """Certificate valid with probability at least ``1 - delta`` over the projections.

    Every l1 norm inside the bound computation is replaced by a max-of-geometric
    upper bound; the final objective uses exact norms.
    """
    if ball.norm != "linf":
        raise ValueError("high-probability certificates are implemented for linf balls")
    tail = tail or high_prob_plan(net, delta, m)
    plan = P.ProjectionPlan.geometric(tail, seed)
    cert = certify(net, ball, y_pred, plan, slack, example_id, label)
    return Certificate(cert.id, cert.label, cert.predicted, cert.J, cert.certified,
                       cert.mode, slack, tail)


@dataclass(frozen=True)
class ErrorReport:
    robust: float
    standard: float
    n: int
    certificates: list = field(default_factory=list, compare=False, repr=False)

    def summary(self) -> str:
        return f"robust_error={self.robust:.6f} standard_error={self.standard:.6f} n={self.n}"


def robust_error(net: NetworkGraph, X, y, eps: float, norm: str = "linf", mode=EXACT,
                 batch_size: int = 100, slack: float = SLACK) -> ErrorReport:
    """Fraction misclassified or uncertified, plus the plain error rate."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if len(X) == 0:
        raise ValueError("robust_error needs a nonempty dataset")
    certs = []
    ball = BallSpec(norm, eps)
    for s in range(0, len(X), batch_size):
        certs += certify_batch(net, ball, X[s:s + batch_size], y[s:s + batch_size], mode, slack,
                               ids=range(s, min(s + batch_size, len(X))))
    wrong = np.array([c.predicted != c.label for c in certs])
    cert = np.array([c.certified for c in certs])
    return ErrorReport(float(np.mean(wrong | ~cert)), float(np.mean(wrong)), len(X), certs)


# attack oracle ----------------------------------------------------------------------------


def _project(delta: np.ndarray, norm: str, eps: float) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(len(delta), -1)
    n = np.linalg.norm(flat, axis=1, keepdims=True)
    scale = np.minimum(1.0, eps / np.maximum(n, 1e-300))
    return (flat * scale).reshape(delta.shape)


def _values(net, x, deltas, c) -> np.ndarray:
    return forward(net, x[None] + deltas).data @ c


def attack_oracle(net: NetworkGraph, ball: BallSpec, c, budget: int = 200, restarts: int = 8,
                  seed: int = 0, grid: int = 21) -> float:
    """Smallest ``c^T f(x + delta)`` found over feasible perturbations.

    Combines sign-gradient / normalized-gradient descent from random starts,
    random feasible samples and, for inputs of dimension at most 3, the box
    corners plus a dense grid (linf) or boundary directions (l2).
    """
    c = np.asarray(c, dtype=np.float64)
    x = np.asarray(ball.x, dtype=np.float64).reshape(net.input_shape)
    eps, norm = float(ball.eps), ball.norm
    best = float(_values(net, x, np.zeros((1,) + x.shape), c)[0])
    if eps == 0:
        return best
    rng = np.random.default_rng(seed)
    d = x.size
    shape = (restarts,) + x.shape
    if norm == "linf":
        start = rng.uniform(-eps, eps, shape)
    else:
        g = rng.standard_normal((restarts, d))
        g *= (eps * rng.uniform(0, 1, (restarts, 1)) ** (1 / d)) / np.linalg.norm(g, axis=1, keepdims=True)
        start = g.reshape(shape)
    start[0] = 0.0
    cands = [start]

    # gradient descent on c^T f(x + delta)
    delta = start.copy()
    step = 2.5 * eps / max(budget, 1) * 4
    for it in range(budget):
        dt = Tensor(delta, requires_grad=True)
        with T.Tape() as tape:
            out = forward(net, x[None] + dt)
            val = T.sum_axis(T.matmul(out, T.Tensor(c.reshape(-1, 1))))
        (g,) = tape.gradient(val, [dt])
        if norm == "linf":
            delta = delta - step * np.sign(g)
        else:
            gn = np.linalg.norm(g.reshape(restarts, -1), axis=1).reshape((-1,) + (1,) * x.ndim)
            delta = delta - step * g / np.maximum(gn, 1e-300)
        delta = _project(delta, norm, eps)
        if it % 10 == 9 or it == budget - 1:
            cands.append(delta.copy())
        if it == budget // 2:
            step *= 0.25

    if d <= 3:
        if norm == "linf":
            axes = [np.linspace(-eps, eps, grid)] * d
            pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        else:
            n_dir = 400 if d > 1 else 2
            u = rng.standard_normal((n_dir, d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            radii = np.linspace(0, eps, 11)
            pts = (u[:, None, :] * radii[None, :, None]).reshape(-1, d)
        cands.append(pts.reshape((-1,) + x.shape))
    n_rand = 256
    if norm == "linf":
        cands.append(rng.choice([-eps, eps], size=(n_rand,) + x.shape))
        cands.append(rng.uniform(-eps, eps, (n_rand,) + x.shape))
    else:
        u = rng.standard_normal((n_rand, d))
        u *= eps / np.linalg.norm(u, axis=1, keepdims=True)
        cands.append(u.reshape((n_rand,) + x.shape))
    for block in cands:
        block = _project(np.asarray(block, dtype=np.float64), norm, eps)
        best = min(best, float(_values(net, x, block, c).min()))
    return best


def epsilon_l2_equivalent(d: float, eps_inf: float) -> float:
    """l2 radius whose ball has the volume of the linf ball: ``sqrt(d/pi) * eps_inf``."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if eps_inf < 0:
        raise ValueError(f"eps_inf must be >= 0, got {eps_inf}")
    return math.sqrt(d / math.pi) * eps_inf
