"""Acceptance suite: one reported PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the summary section lists
every criterion. Criterion 12 only runs with ROBUSTDUAL_FULL_MNIST pointing
at a directory holding the full MNIST IDX files.
"""
import json
import os
import time

import numpy as np
import pytest

from helpers import FAMILIES, box_samples, random_instance
from robustdual.tensor import Tensor
from robustdual.netgraph import (Add, BatchNormFixed, Conv2d, LayerSpec, Linear, NetworkGraph,
                                 forward, forward_trace)
from robustdual.duallayers import PreactBounds, dual_batchnorm, dual_hardtanh, dual_linear, dual_relu, \
    hardtanh_case, relu_case
from robustdual.autodual import build_dual
from robustdual.certifier import BallSpec, attack_oracle, epsilon_l2_equivalent, robust_objective
from robustdual.projest import (ProjectionPlan, maxgeo_rows, median_l1, plan_tail, sample_cauchy,
                                tail_bound)
from robustdual.tensor import gradcheck
from robustdual.trainer import _loss_tensor
from robustdual.archs import mlp
from robustdual.bench import scaling_sweep
from robustdual import experiments as E

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


# 1 -----------------------------------------------------------------------------------------


def test_c01_soundness(criterion):
    c = criterion(1, "exact J <= attack value + 1e-7")
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, n, counts = -np.inf, 0, {}
    for i in range(1000):
        fam = FAMILIES[i % len(FAMILIES)]
        norm = "linf" if (i // len(FAMILIES)) % 2 == 0 else "l2"
        net, x, eps, cvec = random_instance(rng, fam, norm)
        ball = BallSpec(norm, eps, x)
        J = float(robust_objective(net, ball, cvec[None], x=x[None]).data[0, 0])
        att = attack_oracle(net, ball, cvec, budget=40, restarts=4, seed=i)
        worst = max(worst, J - att)
        n += 1
        counts[fam] = counts.get(fam, 0) + 1
    dt = time.perf_counter() - t0
    c.check(worst <= 1e-7 and n >= 1000 and dt <= 300,
            f"{n} instances {counts}, max(J - attack)={worst:.3g}, {dt:.0f}s (limit 300s)")


# 2 -----------------------------------------------------------------------------------------


def _affine_net(rng):
    if rng.random() < 0.5:
        d = int(rng.integers(2, 8))
        kinds, n = [], d
        for _ in range(int(rng.integers(1, 4))):
            w = int(rng.integers(2, 8))
            kinds.append(Linear(Tensor(rng.standard_normal((w, n))), Tensor(rng.standard_normal(w))))
            n = w
        return NetworkGraph.sequential((d,), kinds)
    c = int(rng.integers(1, 3))
    bn = BatchNormFixed(Tensor(rng.uniform(-2, 2, 2)), Tensor(rng.standard_normal(2)),
                        Tensor(rng.standard_normal(2)), Tensor(rng.uniform(0.5, 2, 2)))
    conv = Conv2d(Tensor(rng.standard_normal((2, c, 3, 3)) / 3), Tensor(rng.standard_normal(2)), 1, 1)
    conv2 = Conv2d(Tensor(rng.standard_normal((2, 2, 3, 3)) / 3), Tensor(rng.standard_normal(2)), 1, 1)
    layers = [LayerSpec(2, conv, (1,)), LayerSpec(3, bn, (2,)), LayerSpec(4, conv2, (3,)),
              LayerSpec(5, Add(), (4, 2)),
              LayerSpec(6, Linear(Tensor(rng.standard_normal((3, 32))), Tensor(rng.standard_normal(3))), (5,))]
    return NetworkGraph(layers, (c, 4, 4))


def _affine_closed_form(net, x, eps, cvec, norm):
    n = int(np.prod(net.input_shape))
    basis = np.concatenate([np.zeros((1, n)), np.eye(n)]).reshape((n + 1,) + net.input_shape)
    out = forward(net, basis).data
    b = out[0]
    A = (out[1:] - b).T
    g = A.T @ cvec
    dual = np.abs(g).sum() if norm == "linf" else np.linalg.norm(g)
    return cvec @ (A @ x.reshape(-1) + b) - eps * dual


def test_c02_affine_exactness(criterion):
    c = criterion(2, "affine nets match the closed form to 1e-9")
    rng = np.random.default_rng(202)
    worst = 0.0
    for i in range(200):
        net = _affine_net(rng)
        x = rng.uniform(-1, 1, net.input_shape)
        eps = float(rng.uniform(0, 0.5))
        cvec = rng.standard_normal(net.output_dim)
        for norm in ("linf", "l2"):
            J = float(robust_objective(net, BallSpec(norm, eps, x), cvec[None], x=x[None]).data[0, 0])
            ref = _affine_closed_form(net, x, eps, cvec, norm)
            worst = max(worst, abs(J - ref))
    c.check(worst <= 1e-9, f"200 nets x 2 norms, max |J - closed form| = {worst:.3g}")


# 3 -----------------------------------------------------------------------------------------


def _vertex_conjugate(f, kinks, lo, up, nu_in, nu_out):
    """max over [lo, up] of -nu_in z + nu_out f(z) for piecewise-linear f: the
    maximum sits at an endpoint or a kink inside the interval."""
    cands = [lo, up] + [np.clip(np.full_like(lo, k), lo, up) for k in kinks]
    vals = [-nu_in * z + nu_out * f(z) for z in cands]
    return np.max(vals, axis=0)


def _grid_conjugate(f, lo, up, nu_in, nu_out, n=201):
    t = np.linspace(0, 1, n)[None, :]
    z = lo[:, None] + t * (up - lo)[:, None]
    return np.max(-nu_in[:, None] * z + nu_out[:, None] * f(z), axis=1)


def _activation_check(make, f, kinks, lo, up, nu):
    B = len(lo)
    layer = make(PreactBounds(Tensor(lo[:, None]), Tensor(up[:, None])))
    nu_t = Tensor(nu.reshape(B, 1, 1))
    h = layer.h(nu_t).data[:, 0]
    nu_in = layer.backward(nu_t).data.reshape(B)
    exact = _vertex_conjugate(f, kinks, lo, up, nu_in, nu)
    grid = _grid_conjugate(f, lo, up, nu_in, nu)
    return float(np.max(exact - h)), float(np.max(grid - exact))


def _bounds_draw(rng, n, scale):
    a, b = rng.uniform(-scale, scale, n), rng.uniform(-scale, scale, n)
    lo, up = np.minimum(a, b), np.maximum(a, b)
    return lo, up


def test_c03_conjugate_soundness(criterion):
    c = criterion(3, "h upper-bounds the layer conjugate (grid/vertex oracle)")
    rng = np.random.default_rng(303)
    n = 10_000
    nu = rng.standard_normal(n) * rng.choice([0.1, 1.0, 10.0], n)

    lo, up = _bounds_draw(rng, n, 2.0)
    relu = lambda z: np.maximum(z, 0)
    r_gap, r_grid = _activation_check(dual_relu, relu, [0.0], lo, up, nu)
    r_cases = np.unique(relu_case(lo, up))

    lo, up = _bounds_draw(rng, n, 3.0)
    ht = lambda z: np.clip(z, -1, 1)
    h_gap, h_grid = _activation_check(dual_hardtanh, ht, [-1.0, 1.0], lo, up, nu)
    h_cases = np.unique(hardtanh_case(lo, up))

    # affine duals: the conjugate over any box equals the offset term exactly
    B, d = 200, 5
    W, b = rng.standard_normal((3, d)), rng.standard_normal(3)
    lin = dual_linear(Tensor(W), Tensor(b), (d,))
    nu3 = rng.standard_normal((B, 1, 3))
    lin_err = np.max(np.abs(lin.h(Tensor(nu3)).data[:, 0] - nu3[:, 0] @ b))
    g, beta, mean, var = (rng.uniform(-2, 2, 4), rng.standard_normal(4), rng.standard_normal(4),
                          rng.uniform(0.5, 2, 4))
    bn = dual_batchnorm(Tensor(g), Tensor(beta), Tensor(mean), Tensor(var), 1e-5, (4,))
    nu4 = rng.standard_normal((B, 1, 4))
    scale = g / np.sqrt(var + 1e-5)
    lo4, up4 = rng.uniform(-3, 0, (B, 4)), rng.uniform(0, 3, (B, 4))
    nu_in = bn.backward(Tensor(nu4)).data[:, 0]
    fz = lambda z: scale * z + beta - mean * scale
    conj = np.maximum(-nu_in * lo4 + nu4[:, 0] * fz(lo4), -nu_in * up4 + nu4[:, 0] * fz(up4)).sum(axis=1)
    bn_err = np.max(np.abs(bn.h(Tensor(nu4)).data[:, 0] - conj))

    ok = (r_gap <= 1e-9 and h_gap <= 1e-9 and set(r_cases) == {0, 1, 2}
          and set(h_cases) == {1, 2, 3, 4, 5, 6} and lin_err <= 1e-9 and bn_err <= 1e-9
          and r_grid >= -1e-12 and h_grid >= -1e-12)
    c.check(ok, f"relu max(conj - h)={r_gap:.2g} regimes={[int(v) for v in r_cases]}; "
                f"hardtanh max(conj - h)={h_gap:.2g} cases={[int(v) for v in h_cases]}; "
                f"linear |h - conj|={lin_err:.2g}; batchnorm |h - conj|={bn_err:.2g}; n={n}")


# 4 -----------------------------------------------------------------------------------------


def test_c04_bound_containment(criterion):
    c = criterion(4, "perturbed activations stay inside [l, u]")
    rng = np.random.default_rng(404)
    worst, units = -np.inf, 0
    for i in range(100):
        fam = FAMILIES[i % len(FAMILIES)]
        norm = "linf" if i % 2 == 0 else "l2"
        net, x, eps, _ = random_instance(rng, fam, norm)
        _, bounds = build_dual(net, x[None], eps, norm)
        pts = box_samples(rng, x, eps, norm, 1000)
        trace = forward_trace(net, pts)
        for lid in bounds:
            v = trace[lid].data
            lo, up = bounds[lid].lower.data, bounds[lid].upper.data
            worst = max(worst, float(np.max(lo - v)), float(np.max(v - up)))
            units += lo.size
    c.check(worst <= 1e-9, f"100 instances, 1000 perturbations each, {units} bounded units, "
                           f"max violation={worst:.3g}")


# 5 -----------------------------------------------------------------------------------------


def test_c05_gradients(criterion):
    c = criterion(5, "robust loss gradients match central differences")
    rng = np.random.default_rng(505)
    errs = {"exact": [], "projected": []}
    for seed in range(3):
        net = mlp([6, 8, 8, 3], seed=seed)
        X = rng.uniform(0, 1, (4, 6))
        y = rng.integers(0, 3, 4)
        point = {k: v.data for k, v in net.parameters().items() if k in net.trainable()}
        for name, mode in (("exact", "exact"), ("projected", ProjectionPlan(20, seed=seed))):
            f = lambda p, mode=mode: _loss_tensor(net.with_parameters(p), X, y, 0.1, mode, "linf")[0]
            errs[name].append(gradcheck(f, point, h=1e-5))
    e, p = max(errs["exact"]), max(errs["projected"])
    c.check(e <= 1e-4 and p <= 1e-3, f"exact max rel err={e:.2g} (<=1e-4), projected={p:.2g} (<=1e-3)")


# 6 -----------------------------------------------------------------------------------------


def test_c06_estimator_quality(criterion):
    c = criterion(6, "median estimator error shrinks with r and stays in oracle bands")
    with open(os.path.join(FIXTURES, "median_estimator_bands.json")) as fh:
        bands = json.load(fh)["bands"]
    t0 = time.perf_counter()
    rng = np.random.default_rng(606)
    d, trials = 64, 10_000
    v = rng.standard_normal(d) * rng.exponential(1.0, d)
    v[:8] = 0.0
    true = np.abs(v).sum()
    p50_abs, outside = [], []
    for r in (10, 50, 100):
        R = sample_cauchy(trials * r, d, seed=606, key=(r,))
        est = median_l1((R @ v).reshape(trials, r), axis=1)
        e = est / true - 1.0
        stats = {"p5": np.quantile(e, .05), "p50": np.quantile(e, .5), "p95": np.quantile(e, .95),
                 "p50_abs": np.median(np.abs(e))}
        for k, val in stats.items():
            b = bands[str(r)][k]
            if not b["lo"] <= val <= b["hi"]:
                outside.append(f"r={r} {k}={val:.4f} not in [{b['lo']:.4f}, {b['hi']:.4f}]")
        p50_abs.append(float(stats["p50_abs"]))
    dt = time.perf_counter() - t0
    mono = p50_abs[0] > p50_abs[1] > p50_abs[2]
    c.check(mono and not outside and dt <= 120,
            f"p50|err| r=10,50,100: {', '.join(f'{p:.4f}' for p in p50_abs)}; "
            f"band misses: {outside or 'none'}; {trials} trials; {dt:.1f}s")


# 7 -----------------------------------------------------------------------------------------


@pytest.mark.slow
def test_c07_linear_scaling(criterion):
    c = criterion(7, "projected bound time is affine in hidden units, exact is not")
    sizes = [6, 8, 10, 12, 14, 16, 19]
    res = scaling_sweep(sizes, r=10, repeats=30)
    s = res.summary()
    span = res.units[-1] / res.units[0]
    ok = s["proj_r2"] >= 0.95 and s["exact_r2_quadratic"] > s["exact_r2_affine"] and span >= 10
    c.check(ok, f"units {res.units[0]}..{res.units[-1]} ({span:.1f}x); projected affine R^2={s['proj_r2']:.3f}; "
                f"exact affine R^2={s['exact_r2_affine']:.3f} vs quadratic {s['exact_r2_quadratic']:.3f}")


# 8 -----------------------------------------------------------------------------------------


def test_c08_high_probability(criterion):
    c = criterion(8, "high-probability l1 bound coverage and tail plan")
    delta, m = 0.01, 10
    rng = np.random.default_rng(808)
    n_vec, d = 20, 30
    V = rng.standard_normal((n_vec, d)) * rng.exponential(1.0, (n_vec, d))
    true = np.abs(V).sum(axis=1)
    tail = plan_tail(delta, m=m, N=n_vec)
    plan = ProjectionPlan.geometric(tail, seed=0)
    trials, any_fail, replica_fail = 2000, 0, 0
    for t in range(trials):
        R = sample_cauchy(plan.r, d, seed=t, key=(8,))
        proj = (V @ R.T)[:, :, None]
        est = maxgeo_rows(proj, plan).reshape(-1)
        any_fail += bool(np.any(est < true))
        first = maxgeo_rows(proj[:, :tail.k], ProjectionPlan(tail.k, "l1_cauchy", 0, "geometric", 1,
                                                              tail.k, tail.eps_tail)).reshape(-1)
        replica_fail += int(np.sum(first < true))
    rate = any_fail / trials
    rep_rate = replica_fail / (trials * n_vec)

    p_k = plan_tail(delta, m=m, N=6572, eps_tail=0.22)
    p_eps = plan_tail(delta, m=m, N=6572, k=200)
    dh_ok = abs(p_k.delta_hat - 0.26) <= 0.01
    k_ok = abs(p_k.k - 200) <= 10
    ok = rate <= delta and dh_ok and k_ok
    c.check(ok, f"failure rate {rate:.4f} over {trials} trials (<= {delta}); per-replica {rep_rate:.4f} "
                f"(bound {float(tail_bound(tail.k, tail.eps_tail)):.3g}); N=6572: delta_hat={p_k.delta_hat:.4f}; "
                f"smallest k at eps_tail=0.22 is {p_k.k} (target 200 +/- 10); "
                f"smallest eps_tail at k=200 is {p_eps.eps_tail:.3f}")


# 9 -----------------------------------------------------------------------------------------


@pytest.mark.slow
def test_c09_projection_parity(criterion):
    c = criterion(9, "r=10 training within 2 points of exact training")
    t0 = time.perf_counter()
    res = E.parity_experiment(E.ParityConfig())
    dt = time.perf_counter() - t0
    gap = res["median_gap"]
    c.check(abs(gap) <= 0.02 and dt <= 900,
            f"exact {[round(v, 4) for v in res['exact']]}, r=10 {[round(v, 4) for v in res['projected']]}, "
            f"median gap {100 * gap:+.2f} points, {dt:.0f}s (limit 900s)")


# 10 ----------------------------------------------------------------------------------------


@pytest.mark.slow
def test_c10_cascade_trend(criterion):
    c = criterion(10, "2-stage cascade lowers robust error and raises standard error")
    two = E.cascade_experiment("two-cluster", E.CascadeConfig(eps=0.2))["median"]
    mn = E.cascade_experiment("mnist", E.CascadeConfig(eps=0.1, epochs=10, warmup=5,
                                                       arch="mlp:784-100-10"))["median"]
    parts, ok = [], True
    for name, m in (("two-cluster", two), ("mnist", mn)):
        good = m["cascade_robust"] <= m["single_robust"] and m["cascade_standard"] >= m["single_standard"]
        ok &= good
        parts.append(f"{name}: robust {m['cascade_robust']:.4f} vs {m['single_robust']:.4f}, "
                     f"standard {m['cascade_standard']:.4f} vs {m['single_standard']:.4f}")
    c.check(ok, "; ".join(parts) + " (cascade vs single, median of 5 seeds)")


# 11 ----------------------------------------------------------------------------------------


def test_c11_epsilon_conversion(criterion):
    c = criterion(11, "l2 radius for d=784, eps_inf=0.1")
    v = epsilon_l2_equivalent(784, 0.1)
    c.check(abs(v - 1.58) <= 0.005, f"{v:.5f} (target 1.58 +/- 0.005)")


# 12 ----------------------------------------------------------------------------------------


@pytest.mark.slow
def test_c12_full_mnist(criterion):
    c = criterion(12, "full-MNIST small conv net certified error <= 6.5%")
    path = os.environ.get("ROBUSTDUAL_FULL_MNIST")
    if not path:
        c.skip("set ROBUSTDUAL_FULL_MNIST to a directory with the MNIST IDX files (multi-hour run)")
    err = E.full_mnist_run(path, epochs=int(os.environ.get("ROBUSTDUAL_FULL_EPOCHS", "60")))
    c.check(err <= 0.065, f"certified robust test error {100 * err:.2f}% (limit 6.5%)")
