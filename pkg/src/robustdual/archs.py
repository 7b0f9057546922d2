"""Architecture grammar and named presets.

``mlp:784-100-10``   fully connected ReLU net (flat input)
``conv-small``       conv 16 (4x4, /2), conv 32 (4x4, /2), fc 100, fc classes
``wide:K``           conv 4K and 8K filters (4x4, /2), fc 128K
``deep:K``           K 3x3 convs of 8 filters, K of 16 (the last of each group /2), fc 100
``res:K``            conv 8 then K residual blocks of two 3x3 convs, fc 100
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor
from .netgraph import Add, Conv2d, LayerSpec, Linear, NetworkGraph, ReLU


class ArchError(ValueError):
    pass


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape))


def linear(rng, n_in, n_out) -> Linear:
    return Linear(_uniform(rng, (n_out, n_in), n_in), _uniform(rng, (n_out,), n_in))


def conv(rng, c_in, c_out, k, stride=1, padding=0) -> Conv2d:
    fan = c_in * k * k
    return Conv2d(_uniform(rng, (c_out, c_in, k, k), fan), _uniform(rng, (c_out,), fan), stride, padding)


class _Builder:
    def __init__(self, input_shape, rng):
        self.layers: list[LayerSpec] = []
        self.shape = tuple(input_shape)
        self.rng = rng
        self.last = 1

    def add(self, kind, inputs=None) -> int:
        lid = len(self.layers) + 2
        self.layers.append(LayerSpec(lid, kind, tuple(inputs or (self.last,))))
        self.last = lid
        return lid

    def conv_relu(self, c_out, k, stride, padding) -> int:
        c, h, w = self.shape
        self.add(conv(self.rng, c, c_out, k, stride, padding))
        ho, wo = (h + 2 * padding - k) // stride + 1, (w + 2 * padding - k) // stride + 1
        self.shape = (c_out, ho, wo)
        return self.add(ReLU())

    def fc(self, n_out, relu=True) -> int:
        n_in = int(np.prod(self.shape))
        self.add(linear(self.rng, n_in, n_out))
        self.shape = (n_out,)
        return self.add(ReLU()) if relu else self.last

    def build(self, input_shape) -> NetworkGraph:
        return NetworkGraph(self.layers, input_shape)


def mlp(sizes, seed: int = 0) -> NetworkGraph:
    if len(sizes) < 2:
        raise ArchError("mlp needs at least input and output sizes")
    rng = np.random.default_rng(seed)
    b = _Builder((sizes[0],), rng)
    for n in sizes[1:-1]:
        b.fc(n)
    b.fc(sizes[-1], relu=False)
    return b.build((sizes[0],))


def conv_net(input_shape, filters, fc, n_classes, seed: int = 0) -> NetworkGraph:
    rng = np.random.default_rng(seed)
    b = _Builder(input_shape, rng)
    for f in filters:
        b.conv_relu(f, 4, 2, 1)
    for n in fc:
        b.fc(n)
    b.fc(n_classes, relu=False)
    return b.build(input_shape)


def deep_net(input_shape, k, n_classes, seed: int = 0) -> NetworkGraph:
    rng = np.random.default_rng(seed)
    b = _Builder(input_shape, rng)
    for f in (8, 16):
        for i in range(k):
            if i == k - 1:
                b.conv_relu(f, 4, 2, 1)
            else:
                b.conv_relu(f, 3, 1, 1)
    b.fc(100)
    b.fc(n_classes, relu=False)
    return b.build(input_shape)


def res_net(input_shape, k, n_classes, seed: int = 0, width: int = 8) -> NetworkGraph:
    rng = np.random.default_rng(seed)
    b = _Builder(input_shape, rng)
    skip = b.conv_relu(width, 4, 2, 1)
    for _ in range(k):
        b.conv_relu(width, 3, 1, 1)
        b.add(conv(rng, width, width, 3, 1, 1))
        b.add(Add(), (b.last, skip))
        skip = b.add(ReLU())
    b.fc(100)
    b.fc(n_classes, relu=False)
    return b.build(input_shape)


def build_arch(spec: str, input_shape=(1, 28, 28), n_classes: int = 10, seed: int = 0) -> NetworkGraph:
    """Network for an architecture string such as ``mlp:784-100-10`` or ``wide:2``."""
    name, _, arg = spec.partition(":")
    try:
        if name == "mlp":
            sizes = [int(s) for s in arg.split("-")]
            return mlp(sizes, seed)
        if name == "conv-small":
            return conv_net(input_shape, (16, 32), (100,), n_classes, seed)
        if name == "conv-large":
            return conv_net(input_shape, (32, 64), (512, 512), n_classes, seed)
        if name == "wide":
            k = int(arg)
            return conv_net(input_shape, (4 * k, 8 * k), (128 * k,), n_classes, seed)
        if name == "deep":
            return deep_net(input_shape, int(arg), n_classes, seed)
        if name == "res":
            return res_net(input_shape, int(arg or 1), n_classes, seed)
    except ValueError as exc:
        raise ArchError(f"bad architecture {spec!r}: {exc}") from None
    raise ArchError(f"unknown architecture {spec!r}")


def is_flat(spec: str) -> bool:
    return spec.startswith("mlp")
