"""Dense float64 tensors with a minimal reverse-mode tape.

Every primitive checks its output for NaN/Inf and raises ``NonFiniteError``
instead of letting non-finite values propagate. When any input requires a
gradient and a :class:`Tape` is active, the primitive is recorded together
with its adjoint rule.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class TensorError(ValueError):
    pass


class ShapeError(TensorError):
    pass


class NonFiniteError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


_ids = itertools.count(1)
_state = threading.local()


def _tapes() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def _check_finite(arr: np.ndarray, name: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{name}: non-finite value in output")


class Tensor:
    """Immutable n-d array of float64 with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6, threshold=20)}{grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_axis(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self) -> "Tensor":
        return abs_(self)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape


class _Record:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive applications, consumed by one backward pass.

    Use as a context manager; primitives executed inside the block whose
    inputs require gradients are appended in execution order, which makes the
    record topologically sorted by construction.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._used

    def _push(self, name, inputs, output, backward):
        if self._used:
            raise TapeError("tape already consumed by a backward pass")
        self._records.append(_Record(name, inputs, output, backward))

    def backward(self, root: Tensor | None = None, seed=None) -> dict[int, Tensor]:
        """Run the adjoint sweep from ``root`` and return leaf gradients by id."""
        if not self._records:
            raise TapeError("backward on an empty tape")
        if self._used:
            raise TapeError("second backward on the same tape")
        if root is None:
            root = self._records[-1].output
        if seed is None:
            if root.size != 1:
                raise ShapeError("a seed gradient is required for non-scalar roots")
            seed = np.ones(root.shape)
        seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match root shape {root.shape}")
        self._used = True

        produced = {r.output.id for r in self._records}
        grads: dict[int, np.ndarray] = {root.id: seed}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self._records):
            g = grads.pop(rec.output.id, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.id not in produced:
                    leaves[t.id] = t
                prev = grads.get(t.id)
                grads[t.id] = gi if prev is None else prev + gi
        if root.id not in produced and root.requires_grad:
            leaves[root.id] = root
            grads.setdefault(root.id, seed)
        return {i: Tensor._wrap(np.array(grads[i], dtype=np.float64)) for i in leaves}

    def gradient(self, root: Tensor, params: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``root`` w.r.t. ``params`` as arrays (zeros if unreached)."""
        got = self.backward(root, seed)
        return [got[p.id].data if p.id in got else np.zeros(p.shape) for p in params]


def backward(tape: Tape, seed_grad=None, root: Tensor | None = None) -> dict[int, Tensor]:
    return tape.backward(root, seed_grad)


def _make(name: str, out: np.ndarray, inputs: tuple, bwd: Callable) -> Tensor:
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, name)
    req = any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, req)
    if req:
        stack = _tapes()
        if stack:
            stack[-1]._push(name, inputs, t, bwd)
    return t


# branch signatures let gradcheck skip coordinates near kinks


class BranchRecorder:
    def __init__(self):
        self.signature: list[bytes] = []

    def __enter__(self):
        self._prev = getattr(_state, "branches", None)
        _state.branches = self
        return self

    def __exit__(self, *exc):
        _state.branches = self._prev
        return False


def note_branch(pattern: np.ndarray) -> None:
    """Record a discrete branch decision (mask or index array) for kink detection."""
    rec = getattr(_state, "branches", None)
    if rec is not None:
        rec.signature.append(np.ascontiguousarray(pattern).tobytes())


# --------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast(name, fn, a, b):
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not conform") from exc


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("add", np.add, a, b)
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("sub", np.subtract, a, b)
    return _make("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    """Elementwise product (mul_elementwise)."""
    a, b = as_tensor(a), as_tensor(b)
    out = _broadcast("mul", np.multiply, a, b)
    return _make("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


mul_elementwise = mul


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _broadcast("div", np.divide, a, b)

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def affine_diag(x, scale, shift) -> Tensor:
    """``x * scale + shift`` with broadcasting of the diagonal scale and shift."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    try:
        out = x.data * scale.data + shift.data
    except ValueError as exc:
        raise ShapeError(f"affine_diag: shapes {x.shape}, {scale.shape}, {shift.shape}") from exc
    return _make("affine_diag", out, (x, scale, shift),
                 lambda g: (_unbroadcast(g * scale.data, x.shape) if x.requires_grad else None,
                            _unbroadcast(g * x.data, scale.shape) if scale.requires_grad else None,
                            _unbroadcast(g, shift.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    out = _broadcast("matmul", np.matmul, a, b)

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0
    note_branch(active)
    return _make("relu", np.where(active, x.data, 0.0), (x,), lambda g: (g * active,))


max_elementwise_with_zero = relu


def hardtanh(x) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= -1.0) & (x.data <= 1.0)
    note_branch(np.sign(x.data - 1.0) + 3 * np.sign(x.data + 1.0))
    return _make("hardtanh", np.clip(x.data, -1.0, 1.0), (x,), lambda g: (g * inside,))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    note_branch(s)
    return _make("abs", np.abs(x.data), (x,), lambda g: (g * s,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = _broadcast("maximum", np.greater_equal, a, b)
    note_branch(pick_a)
    out = np.where(pick_a, a.data, b.data)
    return _make("maximum", out, (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = _broadcast("minimum", np.less_equal, a, b)
    note_branch(pick_a)
    out = np.where(pick_a, a.data, b.data)
    return _make("minimum", out, (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.where(mask, a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"where: shapes {mask.shape}, {a.shape}, {b.shape}") from exc
    return _make("where", out, (a, b),
                 lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape),
                            _unbroadcast(np.where(mask, 0.0, g), b.shape)))


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum_axis", out, (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum_axis(x, axes, keepdims) * (1.0 / n)


def median_axis(x, axis: int = -1) -> Tensor:
    """Lower median along ``axis``; the gradient flows to the selected entry only."""
    x = as_tensor(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        raise ShapeError("median of an empty axis")
    k = (n - 1) // 2
    idx = np.take(np.argpartition(x.data, k, axis=axis), [k], axis=axis)
    note_branch(idx)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def bwd(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("median_axis", out, (x,), bwd)


def l2norm_axis(x, axis) -> Tensor:
    """Euclidean norm along ``axis`` with subgradient 0 at the origin."""
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = np.sqrt((x.data ** 2).sum(axis=axes))

    def bwd(g):
        n = np.expand_dims(out, axes)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, x.data / safe, 0.0) * np.expand_dims(g, axes),)

    return _make("l2norm_axis", out, (x,), bwd)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    return _make("logsumexp", out, (x,), lambda g: (np.expand_dims(g, axis) * e / s,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", out, (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _make("swapaxes", np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def bwd(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _make("getitem", np.array(out), (x,), bwd)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)
    return _make("stack", out, ts,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


# convolution: (N, C, H, W) inputs, (O, C, kh, kw) weights


def conv_output_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _conv_fwd(x, w, stride, padding):
    win = _windows(_pad(x, padding), w.shape[2], w.shape[3], stride)
    return np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def _conv_adj(g, w, stride, padding, in_hw):
    n, _, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = in_hw
    hp, wp = h + 2 * padding, wd + 2 * padding
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
    out = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(out)


def _conv_wgrad(x, g, kh, kw, stride, padding):
    win = _windows(_pad(x, padding), kh, kw, stride)
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def _check_conv(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[1]} vs weight {w.shape[1]}")
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], w.shape[2], w.shape[3], stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {w.shape[2:]} too large for input {x.shape[2:]}")


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x, w, stride, padding)
    out = _conv_fwd(x.data, w.data, stride, padding)

    def bwd(g):
        gx = _conv_adj(g, w.data, stride, padding, x.shape[2:]) if x.requires_grad else None
        gw = _conv_wgrad(x.data, g, w.shape[2], w.shape[3], stride, padding) if w.requires_grad else None
        return gx, gw

    return _make("conv2d", out, (x, w), bwd)


def conv_transpose2d(g, w, stride: int, padding: int, in_hw: tuple[int, int]) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input, producing spatial size ``in_hw``."""
    g, w = as_tensor(g), as_tensor(w)
    if g.ndim != 4 or w.ndim != 4 or g.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: shapes {g.shape} and {w.shape} do not conform")
    expect = conv_output_hw(in_hw[0], in_hw[1], w.shape[2], w.shape[3], stride, padding)
    if tuple(g.shape[2:]) != expect:
        raise ShapeError(f"conv_transpose2d: grid {g.shape[2:]} inconsistent with input size {in_hw}")
    out = _conv_adj(g.data, w.data, stride, padding, in_hw)

    def bwd(gy):
        gg = _conv_fwd(gy, w.data, stride, padding) if g.requires_grad else None
        gw = _conv_wgrad(gy, g.data, w.shape[2], w.shape[3], stride, padding) if w.requires_grad else None
        return gg, gw

    return _make("conv_transpose2d", out, (g, w), bwd)


_PRIMITIVES = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul_elementwise": mul,
    "relu": relu,
    "hardtanh": hardtanh,
    "affine_diag": affine_diag,
    "abs": abs_,
    "sum_axis": sum_axis,
    "median_axis": median_axis,
    "max_elementwise_with_zero": relu,
}


def primitive_forward(op: str, *inputs, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("conv2d", x, w, stride=2)``."""
    try:
        fn = _PRIMITIVES[op]
    except KeyError:
        raise TensorError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


# --------------------------------------------------------------------------
# finite-difference checking


def _evaluate(f, point: Mapping[str, np.ndarray]) -> tuple[float, list[bytes]]:
    with BranchRecorder() as rec:
        val = f({k: Tensor._wrap(np.array(v, dtype=np.float64)) for k, v in point.items()})
    if not np.isfinite(val.data).all():
        raise NonFiniteError("gradcheck: non-finite function value")
    return float(val.data.reshape(-1)[0]), rec.signature


def gradcheck(f: Callable[[dict], Tensor], point: Mapping[str, np.ndarray], h: float = 1e-5,
              kink_radius: float = 1e-3, max_coords: int | None = None,
              rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of named parameter tensors to a scalar tensor. The error
    per coordinate is ``|analytic - fd| / max(1, |analytic|)``. Coordinates
    whose branch pattern (ReLU masks, median selections, bound cases) changes
    within ``kink_radius`` are skipped.
    """
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    params = {k: Tensor(v, requires_grad=True) for k, v in point.items()}
    with Tape() as tape:
        out = f(params)
    if out.size != 1:
        raise ShapeError("gradcheck needs a scalar function")
    names = list(point)
    grads = dict(zip(names, tape.gradient(out, [params[k] for k in names])))

    coords = [(k, idx) for k in names for idx in np.ndindex(point[k].shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    _, base_sig = _evaluate(f, point)
    worst, checked = 0.0, 0
    for name, idx in coords:
        vals, sigs = {}, []
        for step in (-kink_radius, -h, h, kink_radius):
            probe = dict(point)
            arr = point[name].copy()
            arr[idx] += step
            probe[name] = arr
            vals[step], sig = _evaluate(f, probe)
            sigs.append(sig)
        if any(s != base_sig for s in sigs):
            continue
        fd = (vals[h] - vals[-h]) / (2 * h)
        an = grads[name][idx]
        worst = max(worst, abs(an - fd) / max(1.0, abs(an)))
        checked += 1
    if checked == 0:
        raise ValueError("gradcheck: every probed coordinate is within kink_radius of a kink")
    return worst


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape))


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape))
