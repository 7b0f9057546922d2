"""Dual layers: affine backward operators plus the conjugate bound ``h``.

Every dual layer here is linear in the sense required for single-pass bound
computation. Each one is stored in a uniform form:

* a linear map ``A`` (weights for Linear/Conv2d, a diagonal ``slope`` for
  activations and batchnorm, identity for Add),
* an ``offset`` vector ``o`` and a nonnegative ``pos`` vector ``p`` such that
  ``h(nu) = sum(o * nu + p * relu(nu))`` where ``nu`` is the dual variable on
  the layer output.

For an affine layer ``p`` is absent and ``o`` is the bias. For an activation
``o`` and ``o + p`` are the offsets of the lower and upper lines of its convex
relaxation at the chosen slope, which makes ``h`` the exact conjugate of that
relaxation.

Coefficient tensors use a leading batch axis of size B or 1 followed by a
shape that broadcasts against the layer shape. Stream and dual tensors carry
an extra row axis: ``(B or 1, rows, *layer_shape)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DualLayerError(ValueError):
    pass


@dataclass(frozen=True)
class PreactBounds:
    lower: Tensor  # (B, *shape)
    upper: Tensor

    def __post_init__(self):
        lo, up = self.lower.data, self.upper.data
        if lo.shape != up.shape:
            raise DualLayerError(f"bound shapes differ: {lo.shape} vs {up.shape}")
        gap = lo - up
        tol = 1e-9 * (1.0 + np.abs(lo) + np.abs(up))
        if (gap > tol).any():
            raise DualLayerError(f"lower bound exceeds upper bound by {gap.max():.3g}")

    @property
    def shape(self) -> tuple:
        return self.lower.shape


@dataclass(frozen=True, eq=False)
class DualLayer:
    kind: str                      # linear, conv2d, relu, hardtanh, batchnorm, add
    in_shape: tuple
    out_shape: tuple
    weight: Tensor | None = None
    stride: int = 1
    padding: int = 0
    slope: Tensor | None = None    # diagonal D for activations and batchnorm
    offset: Tensor | None = None
    pos: Tensor | None = None
    linear: bool = True

    # -- primal direction (used to push streams forward) --------------------

    def apply(self, v: Tensor) -> Tensor:
        """Linear part applied to ``v`` of shape ``(B', rows, *in_shape)``."""
        lead = v.shape[:2]
        if self.kind == "linear":
            flat = T.reshape(v, lead + (-1,))
            return T.matmul(flat, T.transpose(self.weight))
        if self.kind == "conv2d":
            flat = T.reshape(v, (lead[0] * lead[1],) + tuple(self.in_shape))
            out = T.conv2d(flat, self.weight, self.stride, self.padding)
            return T.reshape(out, lead + tuple(self.out_shape))
        if self.kind in ("relu", "hardtanh", "batchnorm"):
            return v * _rows(self.slope)
        if self.kind == "add":
            return v
        raise DualLayerError(f"unknown dual layer kind {self.kind}")

    def shift(self) -> Tensor | None:
        """Constant term of the (linearized) layer in stream layout, or None."""
        return None if self.offset is None else _rows(self.offset)

    # -- dual direction --------------------------------------------------------

    def backward(self, nu: Tensor) -> Tensor:
        """Adjoint ``A^T nu`` for ``nu`` of shape ``(B, rows, *out_shape)``."""
        lead = nu.shape[:2]
        if self.kind == "linear":
            out = T.matmul(nu, self.weight)
            return T.reshape(out, lead + tuple(self.in_shape))
        if self.kind == "conv2d":
            flat = T.reshape(nu, (lead[0] * lead[1],) + tuple(self.out_shape))
            out = T.conv_transpose2d(flat, self.weight, self.stride, self.padding,
                                     tuple(self.in_shape[1:]))
            return T.reshape(out, lead + tuple(self.in_shape))
        return self.apply(nu)

    def h(self, nu: Tensor) -> Tensor:
        """Objective contribution per example and row, shape ``(B, rows)``."""
        axes = tuple(range(2, nu.ndim))
        total = None
        if self.offset is not None:
            total = T.sum_axis(nu * _rows(self.offset), axes)
        if self.pos is not None:
            term = T.sum_axis(T.relu(nu) * _rows(self.pos), axes)
            total = term if total is None else total + term
        if total is None:
            return T.Tensor._wrap(np.zeros(nu.shape[:2]))
        return total


def _rows(coef: Tensor) -> Tensor:
    # (Bs, *shape) -> (Bs, 1, *shape)
    return T.reshape(coef, (coef.shape[0], 1) + tuple(coef.shape[1:]))


# constructors ------------------------------------------------------------------


def dual_linear(W, b, in_shape=None) -> DualLayer:
    W, b = T.as_tensor(W), T.as_tensor(b)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise DualLayerError(f"linear weight {W.shape} and bias {b.shape} do not conform")
    in_shape = (W.shape[1],) if in_shape is None else tuple(in_shape)
    return DualLayer("linear", in_shape, (W.shape[0],), weight=W,
                     offset=T.reshape(b, (1, -1)))


def dual_conv2d(W, b, in_shape, stride: int = 1, padding: int = 0) -> DualLayer:
    W, b = T.as_tensor(W), T.as_tensor(b)
    c, h, w = in_shape
    ho, wo = T.conv_output_hw(h, w, W.shape[2], W.shape[3], stride, padding)
    return DualLayer("conv2d", tuple(in_shape), (W.shape[0], ho, wo), weight=W,
                     stride=stride, padding=padding, offset=T.reshape(b, (1, -1, 1, 1)))


def dual_batchnorm(gamma, beta, mean, var, eps_bn: float, shape) -> DualLayer:
    gamma, beta, mean, var = (T.as_tensor(a) for a in (gamma, beta, mean, var))
    if not (var.data + eps_bn > 0).all():
        raise DualLayerError("batchnorm needs var + eps_bn > 0")
    std = T.Tensor(np.sqrt(var.data + eps_bn))
    D = gamma / std
    d = beta - mean * D
    shape = tuple(shape)
    pshape = (1, -1, 1, 1) if len(shape) == 3 else (1,) + shape
    return DualLayer("batchnorm", shape, shape, slope=T.reshape(D, pshape),
                     offset=T.reshape(d, pshape))


def dual_add(shape) -> DualLayer:
    return DualLayer("add", tuple(shape), tuple(shape))


def dual_relu(bounds: PreactBounds) -> DualLayer:
    """Slope u/(u-l) on crossing units; u <= 0 is checked before l >= 0."""
    lo, up = bounds.lower, bounds.upper
    neg = up.data <= 0
    pos = (lo.data >= 0) & ~neg
    cross = ~neg & ~pos
    T.note_branch(neg.astype(np.int8) - pos.astype(np.int8))
    den = T.where(cross, up - lo, 1.0)
    d_cross = up / den
    D = T.where(cross, d_cross, pos.astype(np.float64))
    p = T.where(cross, -(lo * d_cross), 0.0)
    return DualLayer("relu", lo.shape[1:], lo.shape[1:], slope=D, pos=p)


def relu_case(lower, upper) -> np.ndarray:
    """0 for u <= 0, 1 for l >= 0, 2 for crossing."""
    lower, upper = np.asarray(lower), np.asarray(upper)
    return np.where(upper <= 0, 0, np.where(lower >= 0, 1, 2))


def hardtanh_case(lower, upper) -> np.ndarray:
    """Case number 1..6 per unit:

    1: u <= -1, 2: l >= 1, 3: -1 <= l and u <= 1, 4: l < -1 < u <= 1,
    5: -1 <= l < 1 < u, 6: l < -1 and u > 1.
    """
    lo, up = np.asarray(lower), np.asarray(upper)
    case = np.full(np.broadcast(lo, up).shape, 3, dtype=np.int8)
    case[(lo < -1) & (up > -1) & (up <= 1)] = 4
    case[(lo >= -1) & (lo < 1) & (up > 1)] = 5
    case[(lo < -1) & (up > 1)] = 6
    case[up <= -1] = 1
    case[lo >= 1] = 2
    return case


def dual_hardtanh(bounds: PreactBounds) -> DualLayer:
    lo, up = bounds.lower, bounds.upper
    case = hardtanh_case(lo.data, up.data)
    T.note_branch(case)
    width = T.where(case >= 4, up - lo, 1.0)
    one = np.ones(lo.shape)

    # case 4: chord from (l, -1) to (u, u); lowest vertex (-1, -1)
    s4 = (up + 1.0) / width
    o4, p4 = s4 - 1.0, -(s4 * (lo + 1.0))
    # case 5: chord from (l, l) to (u, 1); highest vertex (1, 1)
    s5 = (1.0 - lo) / width
    o5, p5 = lo * (1.0 - s5), (1.0 - s5) * (1.0 - lo)
    # case 6: slope of the line through (l, -1) and (1, 1); vertices
    # (l,-1), (-1,-1), (1,1), (u,1), the first and third tie for the max
    span = T.where(case == 6, 1.0 - lo, np.where(case == 6, 1.0 - lo.data, 1.0))
    s6 = 2.0 / span
    v_top = -1.0 - s6 * lo
    o6 = T.minimum(s6 - 1.0, 1.0 - s6 * up)
    p6 = v_top - o6

    zero = np.zeros(lo.shape)
    D = T.where(case == 3, one, zero)
    D = T.where(case == 4, s4, D)
    D = T.where(case == 5, s5, D)
    D = T.where(case == 6, s6, D)
    o = T.where(case == 1, -one, T.where(case == 2, one, zero))
    o = T.where(case == 4, o4, o)
    o = T.where(case == 5, o5, o)
    o = T.where(case == 6, o6, o)
    p = T.where(case == 4, p4, zero)
    p = T.where(case == 5, p5, p)
    p = T.where(case == 6, p6, p)
    return DualLayer("hardtanh", lo.shape[1:], lo.shape[1:], slope=D, offset=o, pos=p)


# scalar reference values used by tests and docs


def conjugate_grid(f, lower: float, upper: float, nu_in: float, nu_out: float, n: int = 20001) -> float:
    """Brute-force ``max_z -nu_in*z + nu_out*f(z)`` over a grid on [lower, upper]."""
    z = np.linspace(lower, upper, n)
    return float(np.max(-nu_in * z + nu_out * f(z)))
