import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import FAMILIES, random_instance, random_net
from robustdual.tensor import Tensor
from robustdual.netgraph import Add, LayerSpec, Linear, NetworkGraph, ReLU, forward_trace
from robustdual.autodual import DualBuildError, build_dual, dual_backward, objective
from robustdual.projest import ProjectionPlan


def lin(W, b=None):
    W = np.asarray(W, float)
    return Linear(Tensor(W), Tensor(np.zeros(W.shape[0]) if b is None else np.asarray(b, float)))


def test_first_bounds_are_the_box():
    net = NetworkGraph.sequential((2,), [lin(np.eye(2)), ReLU(), lin(np.eye(2))])
    x = np.array([[0.3, -0.2]])
    _, b = build_dual(net, x, 0.1)
    np.testing.assert_allclose(b[2].lower.data, x - 0.1)
    np.testing.assert_allclose(b[2].upper.data, x + 0.1)


@pytest.mark.parametrize("norm,half", [("linf", 2.0), ("l2", np.sqrt(2))])
def test_single_affine_layer_bounds(norm, half):
    net = NetworkGraph.sequential((2,), [lin([[1, 1]]), ReLU(), lin([[1]])])
    _, b = build_dual(net, np.zeros((1, 2)), 1.0, norm)
    assert np.isclose(b[2].lower.data[0, 0], -half) and np.isclose(b[2].upper.data[0, 0], half)


def test_rejects_bad_arguments():
    net = NetworkGraph.sequential((2,), [lin(np.eye(2))])
    with pytest.raises(DualBuildError):
        build_dual(net, np.zeros((1, 2)), -0.1)
    with pytest.raises(DualBuildError):
        build_dual(net, np.zeros((1, 2)), 0.1, "l3")
    dual, _ = build_dual(net, np.zeros((1, 2)), 0.1)
    with pytest.raises(Exception):
        dual_backward(dual, np.ones((1, 3)))


def test_linear_backward_and_zero_objective():
    W = np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]])
    net = NetworkGraph.sequential((2,), [lin(W, [1, 2, 3])])
    dual, _ = build_dual(net, np.zeros((1, 2)), 0.1)
    c = np.array([[1.0, -2.0, 0.5]])
    nus, h = dual_backward(dual, c)
    np.testing.assert_allclose(nus[1].data[0, 0], W.T @ (-c[0]))
    nus0, h0 = dual_backward(dual, np.zeros((1, 3)))
    assert all(np.all(v.data == 0) for v in nus0.values()) and np.all(h0.data == 0)


def test_residual_dual_accumulates_skip():
    rng = np.random.default_rng(0)
    W1, W3 = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    layers = [LayerSpec(2, lin(W1), (1,)), LayerSpec(3, lin(W3), (2,)), LayerSpec(4, Add(), (3, 1))]
    net = NetworkGraph(layers, (3,))
    dual, _ = build_dual(net, np.zeros((1, 3)), 0.1)
    c = rng.standard_normal((1, 3))
    nus, _ = dual_backward(dual, c)
    nu4 = -c[0]
    np.testing.assert_allclose(nus[1].data[0, 0], W1.T @ (W3.T @ nu4) + nu4, atol=1e-12)


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_eps_zero_collapses(family, norm):
    rng = np.random.default_rng(11)
    net, x, _, _ = random_instance(rng, family)
    _, b = build_dual(net, x[None], 0.0, norm)
    trace = forward_trace(net, x[None])
    for lid in b:
        np.testing.assert_allclose(b[lid].lower.data, trace[lid].data, atol=1e-9)
        np.testing.assert_allclose(b[lid].upper.data, trace[lid].data, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(FAMILIES), st.integers(0, 2**31), st.floats(0.05, 0.95))
def test_bounds_nest_in_eps(family, seed, frac):
    rng = np.random.default_rng(seed)
    net, x, eps, _ = random_instance(rng, family)
    _, big = build_dual(net, x[None], eps)
    _, small = build_dual(net, x[None], eps * frac)
    for lid in big:
        assert np.all(small[lid].lower.data >= big[lid].lower.data - 1e-9)
        assert np.all(small[lid].upper.data <= big[lid].upper.data + 1e-9)


def _subnet_bounds(net, x, eps, norm, target):
    """Per-unit bounds on layer ``target`` by minimizing +/- e_i through a
    truncated copy of the network (a backward pass per unit)."""
    from robustdual.certifier import BallSpec, robust_objective
    keep = [l for l in net.layers if l.id <= target]
    n = int(np.prod(net.shapes[target]))
    flat = LayerSpec(target + 1, lin(np.eye(n)), (target,))
    sub = NetworkGraph(keep + [flat], net.input_shape)
    lo = robust_objective(sub, BallSpec(norm, eps), np.eye(n), x=x).data
    up = -robust_objective(sub, BallSpec(norm, eps), -np.eye(n), x=x).data
    return lo, up


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("norm", ["linf", "l2"])
def test_forward_streams_match_backward_passes(family, norm):
    rng = np.random.default_rng(21)
    net, x, eps, _ = random_instance(rng, family)
    X = np.stack([x, x + 0.05])
    _, b = build_dual(net, X, eps, norm)
    for lid in b:
        lo, up = _subnet_bounds(net, X, eps, norm, lid)
        np.testing.assert_allclose(b[lid].lower.data.reshape(2, -1), lo, atol=1e-10)
        np.testing.assert_allclose(b[lid].upper.data.reshape(2, -1), up, atol=1e-10)


def test_projected_build_is_reproducible_and_close():
    net = random_net(np.random.default_rng(5), "conv")
    x = np.random.default_rng(6).uniform(0, 1, (2,) + net.input_shape)
    plan = ProjectionPlan(2001, seed=3)
    d1, b1 = build_dual(net, x, 0.05, "linf", plan)
    d2, b2 = build_dual(net, x, 0.05, "linf", plan)
    _, be = build_dual(net, x, 0.05)
    for lid in b1:
        assert np.array_equal(b1[lid].lower.data, b2[lid].lower.data)
        width_e = be[lid].upper.data - be[lid].lower.data
        width_p = b1[lid].upper.data - b1[lid].lower.data
        assert np.median(np.abs(width_p / np.maximum(width_e, 1e-12) - 1)) < 0.1


def test_objective_batched_rows_shape():
    net = random_net(np.random.default_rng(8), "mlp")
    x = np.random.default_rng(9).uniform(-1, 1, (4,) + net.input_shape)
    dual, _ = build_dual(net, x, 0.1)
    assert objective(dual, np.eye(3)).shape == (4, 3)
    assert objective(dual, np.ones((4, 2, 3))).shape == (4, 2)
