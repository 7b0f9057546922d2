"""Random-projection estimates of dual norms and positive-part sums.

For a Cauchy matrix ``R`` with i.i.d. standard entries, every entry of
``v^T R`` is Cauchy with scale ``||v||_1``, so ``median(|v^T R|)`` estimates
``||v||_1``. For a standard normal ``R`` the root mean square of ``v^T R``
estimates ``||v||_2``. The geometric mean of ``|v^T R|`` over ``k`` columns,
divided by ``1 - eps_tail`` and maximized over ``m`` independent replicas,
is an upper bound on ``||v||_1`` with a computable failure probability.

All samplers draw from Philox streams keyed by ``(seed, *key)`` so every
projection is reproducible from the build seed and the layer it serves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class PlanError(ValueError):
    pass


def _generator(seed: int, key: Sequence[int] = ()) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *map(int, key)])
    return np.random.Generator(np.random.Philox(ss))


def _open_uniform(gen: np.random.Generator, size) -> np.ndarray:
    # 53 random bits mapped to the open interval (0, 1)
    k = gen.integers(0, 2**53, size=size, dtype=np.uint64)
    return (k.astype(np.float64) + 0.5) / 2.0**53


def sample_cauchy(rows: int, cols: int, seed: int, key: Sequence[int] = ()) -> np.ndarray:
    """Standard Cauchy matrix via the inverse CDF ``tan(pi (U - 1/2))``."""
    u = _open_uniform(_generator(seed, key), (rows, cols))
    return np.tan(np.pi * (u - 0.5))


def sample_normal(rows: int, cols: int, seed: int, key: Sequence[int] = ()) -> np.ndarray:
    return _generator(seed, key).standard_normal((rows, cols))


# plans ------------------------------------------------------------------------------


@dataclass(frozen=True)
class TailPlan:
    delta: float
    N: int
    m: int
    delta_hat: float
    k: int
    eps_tail: float

    @property
    def tail(self) -> float:
        """Per-replica failure bound ``exp(-k eps^2 / G)`` at the chosen pair."""
        return tail_bound(self.k, self.eps_tail)

    def describe(self) -> str:
        return (f"N={self.N} delta_hat={self.delta_hat:.4f} k={self.k} "
                f"eps_tail={self.eps_tail:.3f} m={self.m}")


@dataclass(frozen=True)
class ProjectionPlan:
    r: int
    norm: str = "l1_cauchy"          # or l2_normal (input term under l2 balls)
    seed: int = 0
    estimator: str = "median"        # or geometric
    m: int = 1
    k: int | None = None
    eps_tail: float | None = None

    def __post_init__(self):
        if int(self.r) < 1:
            raise PlanError(f"projection count r must be >= 1, got {self.r}")
        if self.norm not in ("l1_cauchy", "l2_normal"):
            raise PlanError(f"unknown projection norm {self.norm!r}")
        if self.estimator not in ("median", "geometric"):
            raise PlanError(f"unknown estimator {self.estimator!r}")
        if self.estimator == "geometric":
            if self.m < 1 or self.k is None or self.k < 1:
                raise PlanError("geometric estimator needs m >= 1 and k >= 1")
            if not (self.eps_tail is not None and 0 < self.eps_tail < 1):
                raise PlanError("geometric estimator needs 0 < eps_tail < 1")
            if self.r != self.m * self.k:
                raise PlanError(f"geometric plan needs r = m*k = {self.m * self.k}, got {self.r}")

    @classmethod
    def geometric(cls, tail: TailPlan, seed: int = 0) -> "ProjectionPlan":
        return cls(tail.m * tail.k, "l1_cauchy", seed, "geometric", tail.m, tail.k, tail.eps_tail)

    def with_norm(self, norm: str) -> "ProjectionPlan":
        return replace(self, norm=norm)

    def describe(self) -> str:
        if self.estimator == "median":
            return f"median(r={self.r},seed={self.seed})"
        return f"high_prob(m={self.m},k={self.k},eps_tail={self.eps_tail:g},seed={self.seed})"


INPUT_KEY = 1
LAYER_KEY = 2


def input_projection(plan: ProjectionPlan, shape, norm: str = "linf") -> np.ndarray:
    """Projection of the input coordinates, shape ``(1, r, *shape)``."""
    n = int(np.prod(shape))
    if norm == "l2" and plan.estimator == "median":
        R = sample_normal(plan.r, n, plan.seed, (1, INPUT_KEY))
    else:
        R = sample_cauchy(plan.r, n, plan.seed, (1, INPUT_KEY))
    return R.reshape((1, plan.r) + tuple(shape))


def layer_projection(plan: ProjectionPlan, layer_id: int, shape) -> np.ndarray:
    """Cauchy projection for an activation layer's positive-part term, ``(r, *shape)``."""
    n = int(np.prod(shape))
    return sample_cauchy(plan.r, n, plan.seed, (int(layer_id), LAYER_KEY)).reshape((plan.r,) + tuple(shape))


# estimators on projected values -----------------------------------------------------------


def median_l1(projected: np.ndarray | Tensor, axis: int = -1):
    """``median(|v^T R|)`` along ``axis`` (lower median for even counts)."""
    if isinstance(projected, Tensor):
        return T.median_axis(T.abs_(projected), axis)
    a = np.abs(np.asarray(projected))
    n = a.shape[axis]
    return np.take(np.partition(a, (n - 1) // 2, axis=axis), (n - 1) // 2, axis=axis)


def rms_l2(projected, axis: int = -1):
    if isinstance(projected, Tensor):
        return T.l2norm_axis(projected, axis) * (1.0 / math.sqrt(projected.shape[axis]))
    a = np.asarray(projected)
    return np.sqrt(np.mean(a * a, axis=axis))


def geo_estimate(samples: np.ndarray, eps_tail: float, m: int = 1, axis: int = -1) -> np.ndarray:
    """Max over ``m`` replicas of ``prod |g|^(1/k) / (1 - eps_tail)``.

    ``samples`` holds ``m*k`` projected values along ``axis``, replica-major.
    Rows that are exactly zero give 0.
    """
    a = np.moveaxis(np.abs(np.asarray(samples, dtype=np.float64)), axis, -1)
    if a.shape[-1] % m:
        raise PlanError(f"{a.shape[-1]} samples do not split into {m} replicas")
    a = a.reshape(a.shape[:-1] + (m, a.shape[-1] // m))
    with np.errstate(divide="ignore"):
        logs = np.log(a)
    geo = np.exp(logs.mean(axis=-1)) / (1.0 - eps_tail)
    return geo.max(axis=-1)


def maxgeo_rows(v: np.ndarray, plan: ProjectionPlan) -> np.ndarray:
    """Upper bounds for a stream of shape ``(Bs, m*k, *shape)``; reduces axis 1."""
    return geo_estimate(v, plan.eps_tail, plan.m, axis=1)


# tail planning ---------------------------------------------------------------------------


def tail_exponent(eps) -> np.ndarray:
    """``eps^2 / G_{L,gm}(eps)``: the per-projection exponent of the lower tail bound."""
    eps = np.asarray(eps, dtype=np.float64)
    a = (2.0 / np.pi) * np.log1p(-eps)
    return -0.5 * np.log1p(a * a) + a * np.arctan(a)


def g_lgm(eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=np.float64)
    return eps ** 2 / tail_exponent(eps)


def tail_bound(k: int, eps) -> np.ndarray:
    return np.exp(-k * tail_exponent(eps))


def count_estimates(layer_sizes: Sequence[int]) -> int:
    """``n_2 + 2 n_3 + ... + (k-2) n_{k-1}`` for hidden sizes ``n_2..n_{k-1}``."""
    return int(sum((i + 1) * int(n) for i, n in enumerate(layer_sizes)))


GRID = np.round(np.arange(1, 1000) * 1e-3, 3)


def plan_tail(delta: float, layer_sizes: Sequence[int] | None = None, m: int = 1, *,
              N: int | None = None, k: int | None = None, eps_tail: float | None = None,
              k_budget: int | None = None) -> TailPlan:
    """Choose ``(k, eps_tail)`` with ``exp(-k eps^2/G(eps)) <= (delta/N)^(1/m)``.

    With ``eps_tail`` given, returns the smallest feasible ``k``. Otherwise
    ``k`` (default 200) is fixed and the smallest feasible ``eps_tail`` on a
    1e-3 grid is returned. ``N`` defaults to the count implied by
    ``layer_sizes``.
    """
    if not 0 < delta < 1:
        raise PlanError(f"delta must lie in (0, 1), got {delta}")
    if m < 1:
        raise PlanError(f"m must be >= 1, got {m}")
    if N is None:
        if layer_sizes is None:
            raise PlanError("need layer sizes or N")
        N = count_estimates(layer_sizes)
    N = max(int(N), 1)
    delta_hat = (delta / N) ** (1.0 / m)
    need = -math.log(delta_hat)
    if eps_tail is not None:
        if not 0 < eps_tail < 1:
            raise PlanError(f"eps_tail must lie in (0, 1), got {eps_tail}")
        k_min = max(1, math.ceil(need / float(tail_exponent(eps_tail)) - 1e-12))
        if k_budget is not None and k_min > k_budget:
            raise PlanError(f"eps_tail={eps_tail} needs k={k_min} projections, above the budget {k_budget}")
        return TailPlan(delta, N, m, delta_hat, k_min, float(eps_tail))
    k = 200 if k is None else int(k)
    if k < 1:
        raise PlanError(f"k must be >= 1, got {k}")
    ok = GRID[k * tail_exponent(GRID) >= need]
    if ok.size == 0:
        best = float(tail_bound(k, GRID[-1]))
        raise PlanError(f"no eps_tail < 1 reaches delta_hat={delta_hat:.4g} with k={k}; "
                        f"minimum achievable tail is {best:.4g}")
    return TailPlan(delta, N, m, delta_hat, k, float(ok[0]))


def hidden_sizes(net) -> list[int]:
    """Unit counts of the layers that carry bounds (activation inputs), in order."""
    from .netgraph import ACTIVATIONS
    ids = sorted({l.inputs[0] for l in net.layers if isinstance(l.kind, ACTIVATIONS)})
    return [int(np.prod(net.shapes[i])) for i in ids]


def count_estimates_graph(net) -> int:
    """Number of l1 estimates a high-probability build makes.

    Every bounded layer needs one estimate per unit for the input term and one
    per unit for each upstream activation whose stream reaches it. For a plain
    chain this equals :func:`count_estimates`.
    """
    from .netgraph import ACTIVATIONS
    acts = [l.id for l in net.layers if isinstance(l.kind, ACTIVATIONS)]
    targets = sorted({net.layer(a).inputs[0] for a in acts})
    cons = net.consumers()

    def reach(src):
        seen, todo = set(), [src]
        while todo:
            j = todo.pop()
            for c in cons[j]:
                if c not in seen:
                    seen.add(c)
                    todo.append(c)
        return seen

    reach_of = {a: reach(a) for a in acts}
    total = 0
    for t in targets:
        n = int(np.prod(net.shapes[t]))
        streams = 1 + sum(1 for a in acts if t in reach_of[a] or t == a)
        total += n * streams
    return total


# estimators on dual graphs ---------------------------------------------------------------


def _check(plan: ProjectionPlan, norm: str):
    if plan.r < 1:
        raise PlanError("r must be >= 1")
    if plan.norm != norm:
        raise PlanError(f"plan norm {plan.norm} where {norm} is required")


def _contract(C, out: Tensor) -> Tensor:
    """``nu_k^T stream`` for ``nu_k = -c``: ``out`` is ``(Bs, r, d)``, C is ``(rows, d)``
    or ``(B, rows, d)``; result ``(B, rows, r)``."""
    C = T.as_tensor(C)
    if C.ndim == 2:
        C = T.reshape(C, (1,) + C.shape)
    return -T.matmul(C, T.swapaxes(out, 1, 2))


def estimate_l1(dual, C, plan: ProjectionPlan) -> Tensor:
    """Median estimate of ``||nu_1||_1`` for each row of ``C``, shape ``(B, rows)``."""
    from .autodual import propagate
    _check(plan, "l1_cauchy")
    net = dual.net
    R = Tensor(sample_cauchy(plan.r, int(np.prod(net.input_shape)), plan.seed, (1, INPUT_KEY))
               .reshape((1, plan.r) + net.input_shape))
    out = propagate(dual, 1, R)
    return median_l1(_contract(C, out), axis=-1)


def estimate_l2(dual, C, plan: ProjectionPlan) -> Tensor:
    """RMS estimate of ``||nu_1||_2`` for each row of ``C``."""
    from .autodual import propagate
    _check(plan, "l2_normal")
    net = dual.net
    R = Tensor(sample_normal(plan.r, int(np.prod(net.input_shape)), plan.seed, (1, INPUT_KEY))
               .reshape((1, plan.r) + net.input_shape))
    out = propagate(dual, 1, R)
    return rms_l2(_contract(C, out), axis=-1)


def estimate_relu_term(dual, bounds, layer_id: int, C, plan: ProjectionPlan) -> Tensor:
    """Estimate of ``sum_{j in I} l_j [nu_j]_+`` at ReLU layer ``layer_id``.

    Here ``nu`` is the dual variable on the ReLU input and ``I`` the crossing
    units. With ``p = -l D`` on ``I`` this equals ``-(||p*nu_out||_1 + p^T nu_out)/2``;
    the l1 part is estimated by piping ``diag(p) R`` forward and the linear part
    by piping ``p`` itself.
    """
    from .autodual import propagate
    _check(plan, "l1_cauchy")
    dl = dual.layers.get(layer_id)
    if dl is None or dl.kind != "relu":
        raise PlanError(f"layer {layer_id} is not a ReLU layer of this dual graph")
    j = dual.net.layer(layer_id).inputs[0]
    if j not in bounds:
        raise PlanError(f"missing bounds for layer {layer_id}")
    p = dl.pos
    shape = tuple(p.shape[1:])
    R = Tensor(layer_projection(plan, layer_id, shape))
    prow = T.reshape(p, (p.shape[0], 1) + shape)
    out_r = propagate(dual, layer_id, prow * T.reshape(R, (1,) + R.shape))
    out_s = propagate(dual, layer_id, prow)
    l1 = median_l1(_contract(C, out_r), axis=-1)
    lin = T.reshape(_contract(C, out_s), l1.shape)
    return -(l1 + lin) * 0.5


def exact_relu_term(dual, layer_id: int, C) -> Tensor:
    """Exact ``sum_{j in I} l_j [nu_j]_+`` from a dual backward pass."""
    from .autodual import dual_backward
    nus, _ = dual_backward(dual, C)
    dl = dual.layers[layer_id]
    nu_out = nus[layer_id]
    p = T.reshape(dl.pos, (dl.pos.shape[0], 1) + tuple(dl.pos.shape[1:]))
    axes = tuple(range(2, nu_out.ndim))
    return -T.sum_axis(p * T.relu(nu_out), axes)
