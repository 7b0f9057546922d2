"""Single-pass construction of the dual network and all pre-activation bounds.

The bound for a unit of layer ``j`` is the dual objective with ``c = +-e_q``.
Rather than running one backward pass per unit, the builder pushes a set of
*streams* forward through the linearized network (the transpose of those
backward passes):

* ``center``: the anchor ``x`` pushed through every affine map, bias and
  activation offset; this is the ``-nu_1^T x - sum(offset terms)`` part.
* ``input``: the identity (exact) or a random projection matrix (projected)
  over the input coordinates; its per-unit norm gives the ``eps * ||nu_1||``
  term.
* one stream per activation layer: ``diag(p)`` restricted to units with a
  nonzero positive-part coefficient (exact), or ``diag(p) R`` plus the single
  vector ``p`` (projected). Their positive/negative parts give the
  ``sum p [nu]_+`` terms.

Streams have shape ``(B or 1, rows, *layer_shape)``. Bounds are only formed at
layers that feed an activation (or that the caller asks for), and a stream is
dropped as soon as its last consumer has run.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import duallayers as DL
from .duallayers import DualLayer, PreactBounds
from .netgraph import (Add, BatchNormFixed, Conv2d, HardTanh, Linear, NetworkGraph, ReLU,
                       ACTIVATIONS)
from . import projest as P

NORMS = ("linf", "l2")
EXACT = "exact"


class DualBuildError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DualGraph:
    net: NetworkGraph
    layers: dict            # layer id -> DualLayer
    norm: str
    eps: float
    x: Tensor               # (B, *input_shape)
    mode: object            # EXACT or a ProjectionPlan

    @property
    def batch(self) -> int:
        return self.x.shape[0]

    def consumers(self) -> dict:
        return self.net.consumers()


@dataclass(frozen=True, eq=False)
class BoundsCache:
    bounds: dict = field(default_factory=dict)   # layer id -> PreactBounds on z_id

    def __getitem__(self, lid: int) -> PreactBounds:
        try:
            return self.bounds[lid]
        except KeyError:
            raise KeyError(f"no bounds recorded for layer {lid}") from None

    def __contains__(self, lid) -> bool:
        return lid in self.bounds

    def __iter__(self):
        return iter(sorted(self.bounds))

    def d_vector(self, dual: DualGraph, act_id: int) -> Tensor:
        """Diagonal slopes of the activation layer ``act_id``."""
        return dual.layers[act_id].slope


# building a single dual layer ----------------------------------------------------


def make_dual_layer(net: NetworkGraph, lid: int, bounds: PreactBounds | None = None) -> DualLayer:
    layer = net.layer(lid)
    kind = layer.kind
    in_shape = net.shapes[layer.inputs[0]]
    if isinstance(kind, Linear):
        return DL.dual_linear(kind.weight, kind.bias, in_shape)
    if isinstance(kind, Conv2d):
        return DL.dual_conv2d(kind.weight, kind.bias, in_shape, kind.stride, kind.padding)
    if isinstance(kind, BatchNormFixed):
        return _dual_bn(kind, in_shape)
    if isinstance(kind, Add):
        return DL.dual_add(in_shape)
    if isinstance(kind, (ReLU, HardTanh)):
        if bounds is None:
            raise DualBuildError(f"layer {lid}: activation needs pre-activation bounds")
        return DL.dual_relu(bounds) if isinstance(kind, ReLU) else DL.dual_hardtanh(bounds)
    raise DualBuildError(f"layer {lid}: no linear dual layer for {type(kind).__name__}")


def _dual_bn(kind: BatchNormFixed, shape) -> DualLayer:
    scale, shift = kind.scale_shift()
    pshape = (1, -1, 1, 1) if len(shape) == 3 else (1,) + tuple(shape)
    return DualLayer("batchnorm", tuple(shape), tuple(shape),
                     slope=T.reshape(scale, pshape), offset=T.reshape(shift, pshape))


# stream helpers -------------------------------------------------------------------


def _add_streams(parts: list[Tensor]) -> Tensor:
    out = parts[0]
    for p in parts[1:]:
        out = out + p
    return out


def _identity_stream(shape) -> Tensor:
    n = int(np.prod(shape))
    return T.Tensor._wrap(np.eye(n).reshape((1, n) + tuple(shape)))


def _diag_stream(p: Tensor) -> Tensor | None:
    """diag(p) restricted to units where p is nonzero for some example."""
    bsz = p.shape[0]
    flat = T.reshape(p, (bsz, -1))
    idx = np.flatnonzero((flat.data != 0).any(axis=0))
    if idx.size == 0:
        return None
    onehot = np.zeros((1, idx.size, flat.shape[1]))
    onehot[0, np.arange(idx.size), idx] = 1.0
    rows = T.reshape(flat, (bsz, 1, -1)) * onehot
    return T.reshape(rows, (bsz, idx.size) + tuple(p.shape[1:]))


class _Streams:
    """Stream values per layer id, each a dict source -> Tensor."""

    def __init__(self):
        self.at: dict[int, dict] = {}

    def push(self, dual: DualLayer, kind, src_vals: list[dict]) -> dict:
        if isinstance(kind, Add):
            merged: dict = {}
            for vals in src_vals:
                for s, v in vals.items():
                    if v is None:
                        v = _identity_stream(dual.in_shape)
                    merged.setdefault(s, []).append(v)
            return {s: _add_streams(vs) for s, vs in merged.items()}
        (vals,) = src_vals
        out = {}
        for s, v in vals.items():
            if s == "input" and v is None:
                # identity on the input: a Linear layer reads its weight directly
                if dual.kind == "linear":
                    out[s] = T.reshape(T.transpose(dual.weight), (1, -1) + dual.out_shape)
                    continue
                v = _identity_stream(dual.in_shape)
            out[s] = dual.apply(v)
        shift = dual.shift()
        if shift is not None and "center" in out:
            out["center"] = out["center"] + shift
        return out


# bounds from streams -------------------------------------------------------------------


def _input_norm(v: Tensor | None, norm: str, mode, shape) -> Tensor:
    if v is None:
        # identity input stream reaching a bound unchanged: rows are unit vectors
        return T.Tensor._wrap(np.ones((1,) + tuple(shape)))
    if mode == EXACT:
        return T.sum_axis(T.abs_(v), 1) if norm == "linf" else T.l2norm_axis(v, 1)
    if mode.estimator == "geometric":
        return Tensor(P.maxgeo_rows(v.data, mode))
    if norm == "linf":
        return T.median_axis(T.abs_(v), 1)
    return T.l2norm_axis(v, 1) * (1.0 / np.sqrt(v.shape[1]))


def _activation_terms(vals: dict, mode) -> tuple[Tensor | None, Tensor | None]:
    """Totals of the positive-part terms for the lower and upper bounds."""
    low, high = [], []
    for s, v in vals.items():
        if not isinstance(s, tuple):
            continue
        tag, _ = s
        if mode == EXACT:
            if tag == "diag":
                low.append(T.sum_axis(T.relu(-v), 1))
                high.append(T.sum_axis(T.relu(v), 1))
            continue
        if tag == "proj":
            if mode.estimator == "geometric":
                l1 = Tensor(P.maxgeo_rows(v.data, mode))
            else:
                l1 = T.median_axis(T.abs_(v), 1)
            S = vals[("sum", s[1])]
            ssum = T.reshape(S, (S.shape[0],) + tuple(S.shape[2:]))
            low.append((l1 - ssum) * 0.5)
            high.append((l1 + ssum) * 0.5)
    tot = lambda xs: _add_streams(xs) if xs else None
    return tot(low), tot(high)


def bounds_from_streams(vals: dict, eps: float, norm: str, mode, shape) -> PreactBounds:
    center = vals["center"]
    c = T.reshape(center, (center.shape[0],) + tuple(center.shape[2:]))
    lo, up = c, c
    if eps > 0 and "input" in vals:
        rad = _input_norm(vals["input"], norm, mode, shape) * eps
        lo, up = lo - rad, up + rad
    low, high = _activation_terms(vals, mode)
    if low is not None:
        lo, up = lo - low, up + high
    bsz = c.shape[0]
    lo = lo if lo.shape[0] == bsz else lo + np.zeros(c.shape)
    up = up if up.shape[0] == bsz else up + np.zeros(c.shape)
    return PreactBounds(lo, up)


# the builder -----------------------------------------------------------------------


def _batch_input(net: NetworkGraph, x) -> Tensor:
    x = T.as_tensor(x)
    if tuple(x.shape) == net.input_shape:
        x = T.reshape(x, (1,) + net.input_shape)
    if tuple(x.shape[1:]) != net.input_shape:
        raise T.ShapeError(f"input shape {x.shape[1:]} does not match network input {net.input_shape}")
    return x


def _needs_streams(net: NetworkGraph, targets: set[int]) -> set[int]:
    """Layers whose streams are needed because a bound target lies downstream."""
    cons = net.consumers()
    need: set[int] = set()
    for lid in sorted(net.shapes, reverse=True):
        if lid in targets or any(c in need for c in cons[lid]):
            need.add(lid)
    return need


def build_dual(net: NetworkGraph, x, eps: float, norm: str = "linf", mode=EXACT,
               extra_bounds: Iterable[int] = ()) -> tuple[DualGraph, BoundsCache]:
    """Dual network for the ball of radius ``eps`` around each row of ``x``.

    ``mode`` is ``"exact"`` or a :class:`~robustdual.projest.ProjectionPlan`.
    ``extra_bounds`` requests bounds on additional layer outputs (the
    activation inputs are always bounded).
    """
    if not eps >= 0:
        raise DualBuildError(f"eps must be >= 0, got {eps}")
    if norm not in NORMS:
        raise DualBuildError(f"norm must be one of {NORMS}, got {norm!r}")
    if mode != EXACT and not isinstance(mode, P.ProjectionPlan):
        raise DualBuildError(f"unknown bound mode {mode!r}")
    if isinstance(mode, P.ProjectionPlan):
        want = "l1_cauchy" if norm == "linf" else "l2_normal"
        if mode.estimator == "geometric" and norm != "linf":
            raise DualBuildError("geometric estimates are only defined for l1 dual norms (linf balls)")
        if mode.norm != want:
            mode = mode.with_norm(want)
    x = _batch_input(net, x)
    eps = float(eps)

    act_inputs = {l.inputs[0] for l in net.layers if isinstance(l.kind, ACTIVATIONS)}
    targets = act_inputs | set(extra_bounds)
    need = _needs_streams(net, targets)
    cons = net.consumers()
    last_use = {j: max(c) if c else j for j, c in cons.items()}

    streams = _Streams()
    start = {"center": T.reshape(x, (x.shape[0], 1) + net.input_shape)}
    if eps > 0:
        start["input"] = None if mode == EXACT else \
            Tensor(P.input_projection(mode, net.input_shape, norm))
    streams.at[1] = start
    duals: dict[int, DualLayer] = {}
    cache: dict[int, PreactBounds] = {}
    if 1 in targets:
        cache[1] = bounds_from_streams(start, eps, norm, mode, net.input_shape)

    for layer in net.layers:
        lid = layer.id
        kind = layer.kind
        if isinstance(kind, ACTIVATIONS):
            j = layer.inputs[0]
            if j not in cache:
                cache[j] = bounds_from_streams(streams.at[j], eps, norm, mode, net.shapes[j])
            dual = make_dual_layer(net, lid, cache[j])
        else:
            dual = make_dual_layer(net, lid)
        if not dual.linear:
            raise DualBuildError(f"layer {lid}: nonlinear dual layer")
        duals[lid] = dual

        if lid in need:
            vals = streams.push(dual, kind, [streams.at[j] for j in layer.inputs])
            if isinstance(kind, ACTIVATIONS) and dual.pos is not None:
                vals.update(_activation_sources(lid, dual, mode, x.shape[0]))
            streams.at[lid] = vals
            if lid in targets and lid not in cache:
                cache[lid] = bounds_from_streams(vals, eps, norm, mode, net.shapes[lid])
        for j in layer.inputs:
            if last_use[j] <= lid:
                streams.at.pop(j, None)

    dual_graph = DualGraph(net, duals, norm, eps, x, mode)
    return dual_graph, BoundsCache(cache)


def _activation_sources(lid: int, dual: DualLayer, mode, bsz: int) -> dict:
    p = dual.pos
    if mode == EXACT:
        d = _diag_stream(p)
        return {} if d is None else {("diag", lid): d}
    if not (p.data != 0).any():
        return {}
    R = P.layer_projection(mode, lid, dual.out_shape)     # (r, *shape)
    prow = T.reshape(p, (p.shape[0], 1) + tuple(p.shape[1:]))
    return {("proj", lid): prow * R[None], ("sum", lid): prow}


# backward pass and objective -------------------------------------------------------------


def dual_backward(dual: DualGraph, C) -> tuple[dict, Tensor]:
    """Propagate ``nu_k = -c`` for every row of ``C`` through the dual network.

    ``C`` has shape ``(rows, out_dim)`` (shared by the batch) or
    ``(B, rows, out_dim)``. Returns the dual variables on every layer output
    (``nus[1]`` is ``nu_1``, shape ``(B, rows, *input_shape)``) and the summed
    ``h`` terms, shape ``(B, rows)``.
    """
    net = dual.net
    C = T.as_tensor(C)
    if C.ndim == 2:
        C = T.reshape(C, (1,) + C.shape)
    if C.ndim != 3 or C.shape[2] != net.output_dim:
        raise T.ShapeError(f"objective rows must have length {net.output_dim}, got shape {C.shape}")
    bsz = dual.batch
    if C.shape[0] not in (1, bsz):
        raise T.ShapeError(f"objective batch {C.shape[0]} does not match input batch {bsz}")
    nus: dict[int, Tensor] = {net.output_id: -C}
    h_total = None
    for layer in reversed(net.layers):
        nu = nus.get(layer.id)
        if nu is None:
            continue
        dl = dual.layers[layer.id]
        hv = dl.h(nu)
        h_total = hv if h_total is None else h_total + hv
        back = dl.backward(nu)
        for j in layer.inputs:
            nus[j] = back if j not in nus else nus[j] + back
    if 1 not in nus:
        nus[1] = T.Tensor._wrap(np.zeros(C.shape[:2] + net.input_shape))
    if h_total is None:
        h_total = T.Tensor._wrap(np.zeros(C.shape[:2]))
    return nus, h_total


def dual_norm(nu1: Tensor, norm: str) -> Tensor:
    """Per-row dual norm of ``nu_1``: l1 for linf balls, l2 for l2 balls."""
    axes = tuple(range(2, nu1.ndim))
    if norm == "linf":
        return T.sum_axis(T.abs_(nu1), axes)
    flat = T.reshape(nu1, nu1.shape[:2] + (-1,))
    return T.l2norm_axis(flat, 2)


def objective(dual: DualGraph, C) -> Tensor:
    """``J = -nu_1^T x - eps ||nu_1||_* - sum h`` per example and row, shape ``(B, rows)``.

    The final objective is always evaluated with exact norms; the mode only
    affects how the intermediate bounds were obtained.
    """
    nus, h = dual_backward(dual, C)
    nu1 = nus[1]
    x = dual.x
    xr = T.reshape(x, (x.shape[0], 1) + tuple(x.shape[1:]))
    axes = tuple(range(2, nu1.ndim))
    J = -T.sum_axis(nu1 * xr, axes) - h
    if dual.eps > 0:
        J = J - dual_norm(nu1, dual.norm) * dual.eps
    return J


def propagate(dual: DualGraph, source: int, stream: Tensor, target: int | None = None) -> Tensor:
    """Push ``stream`` (shape ``(B', rows, *shape of source)``) from the output of
    layer ``source`` to the output of ``target`` through the linear parts of the
    dual layers (no offsets). Layers not downstream of ``source`` contribute zero."""
    net = dual.net
    target = net.output_id if target is None else target
    vals = {source: stream}
    for layer in net.layers:
        if layer.id <= source or layer.id > target:
            continue
        got = [vals[j] for j in layer.inputs if j in vals]
        if not got:
            continue
        dl = dual.layers[layer.id]
        vals[layer.id] = _add_streams(got) if dl.kind == "add" else dl.apply(got[0])
    if target not in vals:
        return T.Tensor._wrap(np.zeros(stream.shape[:2] + net.shapes[target]))
    return vals[target]
