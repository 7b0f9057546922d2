"""Generalized k-layer networks with explicit skip connections.

Layer ``1`` is the input ``z_1``. Every later layer ``i`` reads the outputs of
earlier layers listed in ``inputs`` and produces ``z_i``; the last layer is the
network output ``z_k``. Skip connections are expressed with :class:`Add`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class GraphError(ValueError):
    """Structural problem in a network graph, tagged with the offending layer id."""

    def __init__(self, layer_id: int | None, message: str):
        self.layer_id = layer_id
        prefix = f"layer {layer_id}: " if layer_id is not None else ""
        super().__init__(prefix + message)


# layer kinds -----------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    weight: Tensor  # (out, in); input is flattened
    bias: Tensor    # (out,)

    params = ("weight", "bias")


@dataclass(frozen=True)
class Conv2d:
    weight: Tensor  # (out_channels, in_channels, kh, kw)
    bias: Tensor    # (out_channels,)
    stride: int = 1
    padding: int = 0

    params = ("weight", "bias")


@dataclass(frozen=True)
class ReLU:
    params = ()


@dataclass(frozen=True)
class HardTanh:
    params = ()


@dataclass(frozen=True)
class BatchNormFixed:
    """Batch normalization with frozen statistics; parameters are per channel
    for (C, H, W) inputs and per feature for flat inputs."""

    gamma: Tensor
    beta: Tensor
    mean: Tensor
    var: Tensor
    eps_bn: float = 1e-5

    params = ("gamma", "beta", "mean", "var")

    def scale_shift(self) -> tuple[Tensor, Tensor]:
        scale = self.gamma / T.Tensor(np.sqrt(self.var.data + self.eps_bn)) \
            if not self.var.requires_grad else self.gamma / _sqrt(self.var + self.eps_bn)
        return scale, self.beta - self.mean * scale


@dataclass(frozen=True)
class Add:
    params = ()


LayerKind = Linear | Conv2d | ReLU | HardTanh | BatchNormFixed | Add
ACTIVATIONS = (ReLU, HardTanh)


def _sqrt(x: Tensor) -> Tensor:
    # running variance is normally a constant; keep the path differentiable anyway
    out = np.sqrt(x.data)
    return T._make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: LayerKind
    inputs: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(int(i) for i in self.inputs))


# validation --------------------------------------------------------------------


def _bn_param_shape(shape: tuple) -> tuple:
    return (shape[0],) if len(shape) == 3 else shape


def infer_shape(layer: LayerSpec, in_shapes: Sequence[tuple]) -> tuple:
    kind, lid = layer.kind, layer.id
    if isinstance(kind, Add):
        if len(in_shapes) < 2:
            raise GraphError(lid, "Add needs at least two inputs")
        if any(s != in_shapes[0] for s in in_shapes):
            raise GraphError(lid, f"shape conflict between Add inputs {list(in_shapes)}")
        return in_shapes[0]
    if len(in_shapes) != 1:
        raise GraphError(lid, f"{type(kind).__name__} takes exactly one input, got {len(in_shapes)}")
    (shape,) = in_shapes
    if isinstance(kind, Linear):
        w, b = kind.weight.shape, kind.bias.shape
        if len(w) != 2 or w[1] != int(np.prod(shape)):
            raise GraphError(lid, f"shape conflict: weight {w} against input {shape}")
        if b != (w[0],):
            raise GraphError(lid, f"shape conflict: bias {b} for weight {w}")
        return (w[0],)
    if isinstance(kind, Conv2d):
        w = kind.weight.shape
        if len(shape) != 3 or len(w) != 4 or w[1] != shape[0]:
            raise GraphError(lid, f"shape conflict: conv weight {w} against input {shape}")
        if kind.bias.shape != (w[0],):
            raise GraphError(lid, f"shape conflict: bias {kind.bias.shape} for conv weight {w}")
        ho, wo = T.conv_output_hw(shape[1], shape[2], w[2], w[3], kind.stride, kind.padding)
        if ho < 1 or wo < 1:
            raise GraphError(lid, f"conv kernel {w[2:]} does not fit input {shape}")
        return (w[0], ho, wo)
    if isinstance(kind, BatchNormFixed):
        want = _bn_param_shape(shape)
        for name in kind.params:
            if getattr(kind, name).shape != want:
                raise GraphError(lid, f"shape conflict: batchnorm {name} {getattr(kind, name).shape}, expected {want}")
        if not (kind.var.data + kind.eps_bn > 0).all():
            raise GraphError(lid, "batchnorm variance + eps_bn must be positive")
        return shape
    if isinstance(kind, ACTIVATIONS):
        return shape
    raise GraphError(lid, f"unsupported layer kind {type(kind).__name__}")


def validate(layers: Sequence[LayerSpec], input_shape: Sequence[int]) -> dict[int, tuple]:
    """Infer the per-example shape of every ``z_i``; raise :class:`GraphError` on the first problem."""
    shapes: dict[int, tuple] = {1: tuple(int(s) for s in input_shape)}
    if not layers:
        raise GraphError(None, "network has no layers")
    for pos, layer in enumerate(layers):
        expected = pos + 2
        if layer.id != expected:
            raise GraphError(layer.id, f"layer ids must be consecutive from 2 (expected {expected})")
        if not layer.inputs:
            raise GraphError(layer.id, "layer has no inputs")
        for j in layer.inputs:
            if j >= layer.id:
                raise GraphError(layer.id, f"forward reference to layer {j}")
            if j < 1:
                raise GraphError(layer.id, f"dangling input id {j}")
        if len(set(layer.inputs)) != len(layer.inputs):
            raise GraphError(layer.id, "duplicate input ids")
        shapes[layer.id] = infer_shape(layer, [shapes[j] for j in layer.inputs])
    return shapes


# the network -----------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkGraph:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    shapes: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shapes = validate(self.layers, self.input_shape)
        if len(shapes[self.output_id]) != 1:
            raise GraphError(self.output_id, f"output must be a vector, got shape {shapes[self.output_id]}")
        object.__setattr__(self, "shapes", shapes)

    @classmethod
    def sequential(cls, input_shape, kinds: Sequence[LayerKind]) -> "NetworkGraph":
        layers = [LayerSpec(i + 2, k, (i + 1,)) for i, k in enumerate(kinds)]
        return cls(layers, input_shape)

    @property
    def output_id(self) -> int:
        return self.layers[-1].id

    @property
    def output_dim(self) -> int:
        return self.shapes[self.output_id][0]

    def layer(self, lid: int) -> LayerSpec:
        return self.layers[lid - 2]

    def consumers(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {i: [] for i in self.shapes}
        for layer in self.layers:
            for j in layer.inputs:
                out[j].append(layer.id)
        return out

    def parameters(self) -> dict[str, Tensor]:
        """Named parameter tensors, e.g. ``"3.weight"`` for layer 3."""
        out = {}
        for layer in self.layers:
            for name in layer.kind.params:
                out[f"{layer.id}.{name}"] = getattr(layer.kind, name)
        return out

    def trainable(self) -> list[str]:
        # frozen batchnorm statistics are not optimized
        return [k for k, v in self.parameters().items()
                if not (k.endswith(".mean") or k.endswith(".var"))]

    def with_parameters(self, params: Mapping[str, Tensor | np.ndarray]) -> "NetworkGraph":
        """Copy of the graph with some parameters replaced (arrays or tensors)."""
        layers = []
        for layer in self.layers:
            updates = {}
            for name in layer.kind.params:
                key = f"{layer.id}.{name}"
                if key in params:
                    v = params[key]
                    updates[name] = v if isinstance(v, Tensor) else Tensor(v)
            layers.append(replace(layer, kind=replace(layer.kind, **updates)) if updates else layer)
        return NetworkGraph(layers, self.input_shape)

    def requiring_grad(self, names: Sequence[str] | None = None) -> "NetworkGraph":
        names = self.trainable() if names is None else names
        params = self.parameters()
        return self.with_parameters({k: Tensor(params[k].data, requires_grad=True) for k in names})

    def num_hidden_units(self) -> int:
        return sum(int(np.prod(self.shapes[l.id])) for l in self.layers[:-1])


# evaluation -------------------------------------------------------------------------


def _batch(net: NetworkGraph, x) -> Tensor:
    x = T.as_tensor(x)
    if x.shape == net.input_shape:
        x = T.reshape(x, (1,) + net.input_shape)
    if tuple(x.shape[1:]) != net.input_shape:
        raise T.ShapeError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    return x


def apply_layer(kind: LayerKind, inputs: Sequence[Tensor], in_shape: tuple) -> Tensor:
    """Evaluate one layer on batched inputs of per-example shape ``in_shape``."""
    if isinstance(kind, Linear):
        (z,) = inputs
        flat = T.reshape(z, (z.shape[0], -1))
        return T.matmul(flat, T.transpose(kind.weight)) + kind.bias
    if isinstance(kind, Conv2d):
        (z,) = inputs
        out = T.conv2d(z, kind.weight, kind.stride, kind.padding)
        return out + T.reshape(kind.bias, (-1, 1, 1))
    if isinstance(kind, ReLU):
        return T.relu(inputs[0])
    if isinstance(kind, HardTanh):
        return T.hardtanh(inputs[0])
    if isinstance(kind, BatchNormFixed):
        scale, shift = kind.scale_shift()
        if len(in_shape) == 3:
            scale, shift = T.reshape(scale, (-1, 1, 1)), T.reshape(shift, (-1, 1, 1))
        return T.affine_diag(inputs[0], scale, shift)
    if isinstance(kind, Add):
        out = inputs[0]
        for z in inputs[1:]:
            out = out + z
        return out
    raise GraphError(None, f"unsupported layer kind {type(kind).__name__}")


def forward_trace(net: NetworkGraph, x, hook: Callable[[int, tuple], None] | None = None) -> dict[int, Tensor]:
    """Outputs of every layer, keyed by id (``1`` is the batched input)."""
    zs = {1: _batch(net, x)}
    for layer in net.layers:
        if hook is not None:
            hook(layer.id, tuple(j for j in layer.inputs if j in zs))
        zs[layer.id] = apply_layer(layer.kind, [zs[j] for j in layer.inputs], net.shapes[layer.inputs[0]])
    return zs


def forward(net: NetworkGraph, x) -> Tensor:
    return forward_trace(net, x)[net.output_id]


def predict(net: NetworkGraph, x) -> np.ndarray:
    """Argmax labels; ties go to the smaller class index."""
    return np.argmax(forward(net, x).data, axis=1)
