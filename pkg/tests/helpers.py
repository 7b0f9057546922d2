"""Random network families shared by the test modules."""
import numpy as np

from robustdual.tensor import Tensor
from robustdual.netgraph import (Add, BatchNormFixed, Conv2d, HardTanh, LayerSpec, Linear,
                                 NetworkGraph, ReLU)

FAMILIES = ("mlp", "hardtanh", "conv", "residual", "batchnorm")


def _lin(rng, n_in, n_out, scale=1.0):
    return Linear(Tensor(scale * rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)),
                  Tensor(0.3 * rng.standard_normal(n_out)))


def _conv(rng, ci, co, k=3, stride=1, padding=1):
    return Conv2d(Tensor(rng.standard_normal((co, ci, k, k)) / np.sqrt(ci * k * k)),
                  Tensor(0.3 * rng.standard_normal(co)), stride, padding)


def _bn(rng, c):
    return BatchNormFixed(Tensor(rng.uniform(0.5, 2.0, c) * rng.choice([-1, 1], c)),
                          Tensor(0.3 * rng.standard_normal(c)), Tensor(0.3 * rng.standard_normal(c)),
                          Tensor(rng.uniform(0.5, 2.0, c)))


def random_net(rng, family: str, n_out: int = 3) -> NetworkGraph:
    if family in ("mlp", "hardtanh"):
        d = int(rng.integers(2, 6))
        act = ReLU if family == "mlp" else (lambda: HardTanh() if rng.random() < 0.7 else ReLU())
        kinds, n = [], d
        for _ in range(int(rng.integers(1, 4))):
            w = int(rng.integers(3, 9))
            kinds += [_lin(rng, n, w, 1.5), act()]
            n = w
        kinds.append(_lin(rng, n, n_out))
        return NetworkGraph.sequential((d,), kinds)
    if family == "batchnorm":
        d, w = int(rng.integers(2, 5)), int(rng.integers(3, 7))
        c = int(rng.integers(1, 3))
        return NetworkGraph.sequential((c, 4, 4), [
            _conv(rng, c, 2), _bn(rng, 2), HardTanh() if rng.random() < 0.5 else ReLU(),
            _lin(rng, 32, w), ReLU(), _lin(rng, w, n_out)])
    if family == "conv":
        c, s = int(rng.integers(1, 3)), int(rng.integers(4, 7))
        stride = int(rng.integers(1, 3))
        c1 = int(rng.integers(1, 4))
        so = (s + 2 - 3) // stride + 1
        return NetworkGraph.sequential((c, s, s), [_conv(rng, c, c1, 3, stride, 1), ReLU(),
                                                   _conv(rng, c1, 2, 3, 1, 1), ReLU(),
                                                   _lin(rng, 2 * so * so, n_out)])
    if family == "residual":
        s = int(rng.integers(3, 6))
        layers = [LayerSpec(2, _conv(rng, 1, 2), (1,)), LayerSpec(3, ReLU(), (2,)),
                  LayerSpec(4, _conv(rng, 2, 2), (3,)), LayerSpec(5, ReLU(), (4,)),
                  LayerSpec(6, _conv(rng, 2, 2), (5,)), LayerSpec(7, Add(), (6, 3)),
                  LayerSpec(8, ReLU(), (7,)), LayerSpec(9, _lin(rng, 2 * s * s, n_out), (8,))]
        return NetworkGraph(layers, (1, s, s))
    raise ValueError(family)


def random_instance(rng, family: str, norm: str = "linf"):
    """(net, x, eps, c) with a random objective vector c."""
    net = random_net(rng, family)
    x = rng.uniform(-1, 1, net.input_shape)
    eps = float(rng.uniform(0.01, 0.5))
    c = rng.standard_normal(net.output_dim)
    return net, x, eps, c


def box_samples(rng, x, eps, norm, n):
    """n feasible points of the ball, a quarter of them on its boundary."""
    shape = (n,) + x.shape
    if norm == "linf":
        d = rng.uniform(-eps, eps, shape)
        k = n // 4
        d[:k] = eps * rng.choice([-1.0, 1.0], (k,) + x.shape)
        return x[None] + d
    g = rng.standard_normal((n, x.size))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    rad = eps * rng.uniform(0, 1, (n, 1)) ** (1.0 / x.size)
    rad[: n // 4] = eps
    return x[None] + (g * rad).reshape(shape)
