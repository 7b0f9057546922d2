"""Estimator accuracy and cost measurements."""
from __future__ import annotations

import gc
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor
from .netgraph import Conv2d, Linear, NetworkGraph, ReLU
from .autodual import EXACT, _Streams, build_dual
from .projest import ProjectionPlan, median_l1


def scaling_net(size: int, channels: int = 4, seed: int = 0) -> NetworkGraph:
    """conv(1->c) -> ReLU -> conv(c->c) -> ReLU -> linear(10) on a size x size input.

    Hidden units grow as ``2 c size^2``.
    """
    rng = np.random.default_rng(seed)
    c = channels

    def cv(ci, co):
        return Conv2d(Tensor(rng.standard_normal((co, ci, 3, 3)) / np.sqrt(9 * ci)),
                      Tensor(0.1 * rng.standard_normal(co)), 1, 1)

    n = c * size * size
    fc = Linear(Tensor(rng.standard_normal((10, n)) / np.sqrt(n)), Tensor(np.zeros(10)))
    return NetworkGraph.sequential((1, size, size), [cv(1, c), ReLU(), cv(c, c), ReLU(), fc])


def hidden_units(net: NetworkGraph) -> int:
    return sum(int(np.prod(net.shapes[l.id])) for l in net.layers
               if isinstance(l.kind, ReLU))


def time_build(net, x, eps, mode, repeats: int = 5, clock=time.perf_counter) -> float:
    """Minimum wall time of ``build_dual`` over ``repeats`` runs.

    The garbage collector is paused while timing, as in ``timeit``.
    """
    best = np.inf
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for _ in range(repeats):
            t0 = clock()
            build_dual(net, x, eps, "linf", mode)
            best = min(best, clock() - t0)
    finally:
        if was_enabled:
            gc.enable()
    return best


def peak_memory(net, x, eps, mode) -> float:
    """Peak traced allocation in MB during one ``build_dual``."""
    tracemalloc.start()
    try:
        build_dual(net, x, eps, "linf", mode)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak / 2**20


def r_squared(x, y, degree: int) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    coef = np.polyfit(x, y, degree)
    resid = y - np.polyval(coef, x)
    tot = ((y - y.mean()) ** 2).sum()
    return float(1 - (resid ** 2).sum() / tot) if tot > 0 else 1.0


def affine_fit(x, y) -> tuple[float, float, float]:
    """(slope, intercept, R^2) of a least-squares line."""
    slope, icpt = np.polyfit(np.asarray(x, float), np.asarray(y, float), 1)
    return float(slope), float(icpt), r_squared(x, y, 1)


@dataclass
class ScalingResult:
    units: list
    exact_time: list
    proj_time: list

    def summary(self) -> dict:
        ps, pi, pr2 = affine_fit(self.units, self.proj_time)
        _, _, er2_lin = affine_fit(self.units, self.exact_time)
        er2_quad = r_squared(self.units, self.exact_time, 2)
        return {"proj_slope": ps, "proj_intercept": pi, "proj_r2": pr2,
                "exact_r2_affine": er2_lin, "exact_r2_quadratic": er2_quad}


def scaling_sweep(sizes, r: int = 10, batch: int = 1, repeats: int = 5, seed: int = 0,
                  channels: int = 4) -> ScalingResult:
    """Minimum build time per size. Repeats are interleaved across sizes so slow
    drift in machine speed affects every size alike."""
    cases = []
    for s in sizes:
        net = scaling_net(s, channels, seed)
        x = np.random.default_rng(seed).uniform(0, 1, (batch, 1, s, s))
        cases.append((net, x))
    plan = ProjectionPlan(r, seed=seed)
    te, tp = [np.inf] * len(cases), [np.inf] * len(cases)
    for _ in range(repeats):
        for i, (net, x) in enumerate(cases):
            te[i] = min(te[i], time_build(net, x, 0.05, EXACT, 1))
            tp[i] = min(tp[i], time_build(net, x, 0.05, plan, 1))
    return ScalingResult([hidden_units(n) for n, _ in cases], te, tp)


# estimator accuracy -----------------------------------------------------------------------


def input_norm_pairs(net: NetworkGraph, x, r: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact and median-estimated ``||nu_1||_1`` for every unit of the first bounded
    layer after an activation (the per-unit input-norm term)."""
    dual, _ = build_dual(net, x, 0.05, "linf", EXACT)
    target = next(l.inputs[0] for l in net.layers[1:] if isinstance(l.kind, ReLU))
    exact_rows = _push_input(net, dual, None, target)
    n = int(np.prod(net.input_shape))
    from .projest import input_projection
    R = Tensor(input_projection(ProjectionPlan(r, seed=seed), net.input_shape))
    est_rows = _push_input(net, dual, R, target)
    exact = np.abs(exact_rows.data).sum(axis=1).reshape(-1)
    est = np.asarray(median_l1(est_rows.data, axis=1)).reshape(-1)
    return exact, est


def _push_input(net, dual, R, target):
    st = _Streams()
    st.at[1] = {"input": R}
    for layer in net.layers:
        if layer.id > target:
            break
        st.at[layer.id] = st.push(dual.layers[layer.id], layer.kind, [st.at[j] for j in layer.inputs])
    v = st.at[target]["input"]
    if v is None:
        n = int(np.prod(net.input_shape))
        v = Tensor(np.eye(n).reshape((1, n) + net.input_shape))
    return v


def estimator_bench(r_list, sizes, trials: int = 20, seed: int = 0, channels: int = 4) -> list[dict]:
    """Relative-error quantiles of the median estimator and cost per (r, size).

    Rows whose exact norm is zero are excluded from the relative error.
    """
    rows = []
    for s in sizes:
        net = scaling_net(s, channels, seed)
        x = np.random.default_rng(seed).uniform(0, 1, (1, 1, s, s))
        for r in r_list:
            errs = []
            for t in range(trials):
                exact, est = input_norm_pairs(net, x, r, seed * 100003 + t)
                keep = exact > 0
                errs.append((est[keep] - exact[keep]) / exact[keep])
            e = np.concatenate(errs) if errs else np.zeros(0)
            plan = ProjectionPlan(r, seed=seed)
            rows.append({
                "r": r, "size": s, "hidden_units": hidden_units(net), "n_errors": int(e.size),
                "p5": float(np.percentile(e, 5)), "p50": float(np.percentile(e, 50)),
                "p95": float(np.percentile(e, 95)), "p50_abs": float(np.percentile(np.abs(e), 50)),
                "time_s": time_build(net, x, 0.05, plan, 3),
                "peak_mb": peak_memory(net, x, 0.05, plan),
            })
    return rows
