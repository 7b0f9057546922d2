import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import FAMILIES, random_net
from robustdual.tensor import Tensor
from robustdual.netgraph import (Add, BatchNormFixed, Conv2d, GraphError, LayerSpec, Linear, NetworkGraph,
                                 ReLU, forward, forward_trace, predict)


def lin(W, b):
    return Linear(Tensor(np.asarray(W, float)), Tensor(np.asarray(b, float)))


def test_single_linear():
    net = NetworkGraph.sequential((2,), [lin([[2, 0], [0, 3]], [1, 1])])
    np.testing.assert_array_equal(forward(net, np.array([1.0, 1.0])).data, [[3, 4]])


def test_identity_then_relu():
    layers = [LayerSpec(2, lin(np.eye(2), [0, 0]), (1,)), LayerSpec(3, ReLU(), (2,)),
              LayerSpec(4, lin(np.eye(2), [0, 0]), (3,))]
    net = NetworkGraph(layers, (2,))
    assert np.array_equal(forward_trace(net, np.array([-2.0, 5.0]))[3].data, [[0, 5]])


def test_residual_block_with_zero_weights_is_identity():
    z = lin(np.zeros((3, 3)), np.zeros(3))
    layers = [LayerSpec(2, z, (1,)), LayerSpec(3, ReLU(), (2,)), LayerSpec(4, z, (3,)),
              LayerSpec(5, Add(), (4, 1))]
    net = NetworkGraph(layers, (3,))
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(forward(net, x).data[0], x)


def test_validate_shapes_and_errors():
    net = NetworkGraph.sequential((4,), [lin(np.ones((5, 4)), np.zeros(5)), ReLU(), lin(np.ones((2, 5)), np.zeros(2))])
    assert [net.shapes[i] for i in (1, 2, 4)] == [(4,), (5,), (2,)]
    with pytest.raises(GraphError, match="forward reference"):
        NetworkGraph([LayerSpec(2, lin(np.eye(2), [0, 0]), (1,)), LayerSpec(3, ReLU(), (5,))], (2,))
    with pytest.raises(GraphError, match="two inputs"):
        NetworkGraph([LayerSpec(2, lin(np.eye(2), [0, 0]), (1,)), LayerSpec(3, Add(), (2,))], (2,))
    with pytest.raises(GraphError, match="shape conflict"):
        NetworkGraph.sequential((3,), [lin(np.eye(2), [0, 0])])
    with pytest.raises(GraphError) as info:
        NetworkGraph([LayerSpec(2, lin(np.eye(2), [0, 0]), (1,)), LayerSpec(3, lin(np.eye(3), np.zeros(3)), (2,))], (2,))
    assert info.value.layer_id == 3


def test_batchnorm_rejects_nonpositive_variance():
    bn = BatchNormFixed(Tensor([1.0]), Tensor([0.0]), Tensor([0.0]), Tensor([-1.0]), 0.0)
    with pytest.raises(GraphError, match="variance"):
        NetworkGraph.sequential((1,), [bn])


def test_predict_ties_and_identity():
    net = NetworkGraph.sequential((2,), [lin(np.eye(2), [0, 0])])
    assert predict(net, np.array([[0.1, 0.9], [0.5, 0.5]])).tolist() == [1, 0]
    net3 = NetworkGraph.sequential((3,), [lin(np.eye(3), np.zeros(3))])
    assert predict(net3, np.eye(3)[2])[0] == 2


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 1))
def test_affine_graphs_are_affine(seed, alpha):
    rng = np.random.default_rng(seed)
    bn = BatchNormFixed(Tensor(rng.uniform(-2, 2, 2)), Tensor(rng.standard_normal(2)),
                        Tensor(rng.standard_normal(2)), Tensor(rng.uniform(0.5, 2, 2)))
    layers = [LayerSpec(2, lin(rng.standard_normal((2, 3)), rng.standard_normal(2)), (1,)),
              LayerSpec(3, bn, (2,)), LayerSpec(4, Add(), (3, 2)),
              LayerSpec(5, lin(rng.standard_normal((2, 2)), rng.standard_normal(2)), (4,))]
    net = NetworkGraph(layers, (3,))
    x1, x2 = rng.standard_normal(3), rng.standard_normal(3)
    lhs = forward(net, alpha * x1 + (1 - alpha) * x2).data
    rhs = alpha * forward(net, x1).data + (1 - alpha) * forward(net, x2).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@pytest.mark.parametrize("family", FAMILIES)
def test_evaluation_order_never_reads_uncomputed(family):
    net = random_net(np.random.default_rng(7), family)
    done = {1}

    def hook(lid, available):
        assert set(net.layer(lid).inputs) <= done
        done.add(lid)

    forward_trace(net, np.zeros((2,) + net.input_shape), hook)
    assert done == {1} | {l.id for l in net.layers}


def test_parameters_roundtrip_and_trainable():
    net = random_net(np.random.default_rng(1), "batchnorm")
    params = net.parameters()
    assert not any(k.endswith((".mean", ".var")) for k in net.trainable())
    bumped = net.with_parameters({k: v.data + 1.0 for k, v in params.items() if k in net.trainable()})
    assert not np.allclose(forward(bumped, np.zeros(net.input_shape)).data,
                           forward(net, np.zeros(net.input_shape)).data)
