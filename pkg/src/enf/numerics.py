"""Dense tensors with reverse-mode differentiation on explicit tapes.

Values are numpy-backed and immutable once created.  Every differentiable
operation records onto all tapes on the active stack, so nesting two tapes
and running the reverse pass of the inner one while the outer is still
active traces the gradient computation itself -- which is how the
second-order meta-learning path gets grad-of-grad without a separate
mechanism.

Broadcasting follows numpy's right-aligned (trailing-dimension) rules and
nothing more; incompatible shapes raise :class:`DimensionError` naming
both shapes.  Any operation whose result contains NaN/Inf raises
:class:`NonFiniteError` instead of propagating silently.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "Gradients",
    "NumericsError",
    "DimensionError",
    "NonFiniteError",
    "TapeError",
    "OracleError",
    "tensor",
    "zeros",
    "ones",
    "full",
    "zeros_like",
    "ones_like",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "pow_scalar",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "tanh",
    "relu",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "concat",
    "narrow",
    "take",
    "scatter_rows",
    "reduce_sum",
    "mean",
    "square",
    "stop_gradient",
    "softmax_with_bias",
    "softmax",
    "backward",
    "finite_difference_check",
    "FiniteDifferenceReport",
]

_DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

Axis = Union[None, int, tuple]


class NumericsError(Exception):
    """Base class for tensor-kernel failures."""


class DimensionError(NumericsError):
    """Shapes incompatible for the requested operation."""


class NonFiniteError(NumericsError):
    """An operation produced NaN or Inf."""


class TapeError(NumericsError):
    """Gradient-tape contract violated."""


class OracleError(NumericsError):
    """A test oracle's own preconditions do not hold."""


# --------------------------------------------------------------------------
# Tensor


class Tensor:
    """Immutable dense array participating in the gradient graph.

    ``data`` is a locked (non-writeable) numpy array of dtype float32 or
    float64.  ``requires_grad`` marks leaves to differentiate with respect
    to; it propagates to the outputs of operations with any marked input.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def numpy(self) -> np.ndarray:
        """The underlying (read-only) array."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_scalar(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"


def _lock(arr: np.ndarray) -> np.ndarray:
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if arr.flags.writeable and arr.flags.owndata:
        arr.flags.writeable = False
    elif arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


def _finish(arr: np.ndarray, op: str, requires_grad: bool) -> Tensor:
    # Fast path: a finite sum implies all entries finite.  A non-finite sum
    # can also be benign f32 overflow of large finite entries, so only then
    # pay for the exact elementwise check.
    with np.errstate(all="ignore"):
        total = arr.sum(dtype=np.float64) if arr.dtype == np.float32 else arr.sum()
    if not np.isfinite(total) and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return Tensor(_lock(arr), requires_grad)


def tensor(values, dtype: Optional[str] = None, requires_grad: bool = False) -> Tensor:
    """Create a tensor from array-like data.

    ``dtype`` is "f32" or "f64"; when omitted, float64 input arrays stay
    f64 and everything else becomes f32.
    """
    arr = np.asarray(values)
    if dtype is None:
        keep_f64 = isinstance(values, np.ndarray) and arr.dtype == np.float64
        np_dtype = np.float64 if keep_f64 else np.float32
    else:
        if dtype not in _DTYPES:
            raise ValueError(f"unknown dtype {dtype!r}; expected 'f32' or 'f64'")
        np_dtype = _DTYPES[dtype]
    arr = arr.astype(np_dtype, copy=True)
    return _finish(arr, "tensor", requires_grad)


def zeros(shape, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    return Tensor(_lock(np.zeros(shape, _DTYPES[dtype])), requires_grad)


def ones(shape, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    return Tensor(_lock(np.ones(shape, _DTYPES[dtype])), requires_grad)


def full(shape, value: float, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    return _finish(np.full(shape, value, _DTYPES[dtype]), "full", requires_grad)


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(_lock(np.zeros_like(t.data)), False)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(_lock(np.ones_like(t.data)), False)


def _as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return tensor(value, dtype=dtype)


def _pair(a, b) -> tuple:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = _as_tensor(a, like=b)
    elif not isinstance(a, Tensor):
        a, b = tensor(a), tensor(b)
    if a.data.dtype != b.data.dtype:
        raise DimensionError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# Tape


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


class GradientTape:
    """Ordered record of primitive operations for a single reverse pass.

    Used as a context manager; one training step owns one tape.  Tapes
    nest: an operation records on every tape currently on the stack.
    Replaying :func:`backward` on the same tape is bitwise reproducible.
    """

    def __init__(self):
        self._entries: list = []
        self._recording = True
        self._active = False
        self._used = False

    def __enter__(self) -> "GradientTape":
        if self._used:
            raise TapeError("a GradientTape cannot be re-entered")
        self._used = True
        self._active = True
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted: exiting a tape that is not on top")
        stack.pop()
        self._active = False

    def stop_recording(self):
        """Context manager that masks this tape without touching nested ones."""
        tape = self

        class _Pause:
            def __enter__(self_inner):
                tape._recording = False

            def __exit__(self_inner, exc_type, exc, tb):
                tape._recording = True

        return _Pause()

    def __len__(self) -> int:
        return len(self._entries)

    def gradients(self, loss: Tensor) -> "Gradients":
        return backward(loss, self)


def _record(out: Tensor, inputs: tuple, vjp: Callable) -> None:
    if not out.requires_grad:
        return
    for tape in _tape_stack():
        if tape._recording:
            tape._entries.append((out, inputs, vjp))


class Gradients:
    """Map from tensor to its gradient; unreached tensors read as zero."""

    def __init__(self, table: dict):
        self._table = table

    def __getitem__(self, t: Tensor) -> Tensor:
        got = self._table.get(t)
        return got if got is not None else zeros_like(t)

    get = __getitem__

    def __contains__(self, t: Tensor) -> bool:
        return t in self._table


def backward(loss: Tensor, tape: GradientTape) -> Gradients:
    """Run the reverse pass of ``tape`` seeded at scalar ``loss``.

    Returns gradients for every ``requires_grad`` tensor reachable from
    ``loss`` through the tape's entries; anything else reads as zeros.
    If an outer tape is still active the reverse pass itself is recorded,
    making the returned gradients differentiable.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._active:
        raise TapeError("backward on a tape that is still active; exit its context first")
    table: dict = {loss: ones_like(loss)}
    for out, inputs, vjp in reversed(tape._entries):
        g = table.get(out)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None:
                continue
            held = table.get(t)
            table[t] = gi if held is None else add(held, gi)
    return Gradients(table)


# --------------------------------------------------------------------------
# Primitive operations


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce a broadcast gradient back to ``shape`` by summing."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = reduce_sum(g, axis=tuple(range(lead)), keepdims=False)
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if squeeze:
        g = reduce_sum(g, axis=squeeze, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    with np.errstate(all="ignore"):
        raw = a.data + b.data
    out = _finish(raw, "add", a.requires_grad or b.requires_grad)

    def vjp(g: Tensor):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), vjp)
    return out


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    with np.errstate(all="ignore"):
        raw = a.data - b.data
    out = _finish(raw, "sub", a.requires_grad or b.requires_grad)

    def vjp(g: Tensor):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(neg(g), b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), vjp)
    return out


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    with np.errstate(all="ignore"):
        raw = a.data * b.data
    out = _finish(raw, "mul", a.requires_grad or b.requires_grad)

    def vjp(g: Tensor):
        return (
            _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
            _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None,
        )

    _record(out, (a, b), vjp)
    return out


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    with np.errstate(all="ignore"):
        raw = a.data / b.data
    out = _finish(raw, "div", a.requires_grad or b.requires_grad)

    def vjp(g: Tensor):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return (ga, gb)

    _record(out, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _finish(-a.data, "neg", a.requires_grad)
    _record(out, (a,), lambda g: (neg(g),))
    return out


def pow_scalar(a, exponent: float) -> Tensor:
    """Elementwise power with a python-number exponent."""
    a = _as_tensor(a)
    if isinstance(exponent, Tensor):
        raise DimensionError("pow_scalar exponent must be a python number")
    with np.errstate(all="ignore"):
        raw = a.data ** exponent
    out = _finish(raw, "pow", a.requires_grad)

    def vjp(g: Tensor):
        return (mul(g, mul(pow_scalar(a, exponent - 1), float(exponent))),)

    _record(out, (a,), vjp)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        raw = np.exp(a.data)
    out = _finish(raw, "exp", a.requires_grad)
    _record(out, (a,), lambda g: (mul(g, out),))
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        raw = np.log(a.data)
    out = _finish(raw, "log", a.requires_grad)
    _record(out, (a,), lambda g: (div(g, a),))
    return out


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = _finish(np.sin(a.data), "sin", a.requires_grad)
    _record(out, (a,), lambda g: (mul(g, cos(a)),))
    return out


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = _finish(np.cos(a.data), "cos", a.requires_grad)
    _record(out, (a,), lambda g: (neg(mul(g, sin(a))),))
    return out


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(all="ignore"):
        raw = np.sqrt(a.data)
    out = _finish(raw, "sqrt", a.requires_grad)
    _record(out, (a,), lambda g: (div(mul(g, 0.5), out),))
    return out


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = _finish(np.tanh(a.data), "tanh", a.requires_grad)
    _record(out, (a,), lambda g: (mul(g, sub(1.0, mul(out, out))),))
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _finish(np.maximum(a.data, 0), "relu", a.requires_grad)
    mask = Tensor(_lock((a.data > 0).astype(a.data.dtype)), False)
    _record(out, (a,), lambda g: (mul(g, mask),))
    return out


def square(a) -> Tensor:
    a = _as_tensor(a)
    return mul(a, a)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    with np.errstate(all="ignore"):
        raw = a.data @ b.data
    out = _finish(raw, "matmul", a.requires_grad or b.requires_grad)

    def vjp(g: Tensor):
        return (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )

    _record(out, (a, b), vjp)
    return out


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation for rank {a.ndim}")
    out = Tensor(_lock(np.transpose(a.data, axes)), a.requires_grad)
    inverse = tuple(int(i) for i in np.argsort(axes))
    _record(out, (a,), lambda g: (transpose(g, inverse),))
    return out


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        new = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    out = Tensor(_lock(new), a.requires_grad)
    old_shape = a.shape
    _record(out, (a,), lambda g: (reshape(g, old_shape),))
    return out


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        new = np.broadcast_to(a.data, shape)
    except ValueError:
        raise DimensionError(f"broadcast_to: {a.shape} does not expand to {tuple(shape)}") from None
    out = Tensor(_lock(np.array(new)), a.requires_grad)
    _record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    axis = axis % parts[0].ndim if parts[0].ndim else 0
    out_arr = np.concatenate([p.data for p in parts], axis=axis)
    out = Tensor(_lock(out_arr), any(p.requires_grad for p in parts))
    sizes = [p.shape[axis] for p in parts]

    def vjp(g: Tensor):
        grads, start = [], 0
        for p, size in zip(parts, sizes):
            grads.append(narrow(g, axis, start, size) if p.requires_grad else None)
            start += size
        return tuple(grads)

    _record(out, tuple(parts), vjp)
    return out


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = _as_tensor(a)
    axis = axis % a.ndim
    if start < 0 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.shape}"
        )
    index = tuple(slice(None) if i != axis else slice(start, start + length) for i in range(a.ndim))
    out = Tensor(_lock(a.data[index].copy()), a.requires_grad)

    def vjp(g: Tensor):
        before = list(a.shape)
        before[axis] = start
        after = list(a.shape)
        after[axis] = a.shape[axis] - start - length
        pieces = []
        if before[axis]:
            pieces.append(zeros(tuple(before), a.dtype))
        pieces.append(g)
        if after[axis]:
            pieces.append(zeros(tuple(after), a.dtype))
        return (concat(pieces, axis=axis) if len(pieces) > 1 else g,)

    _record(out, (a,), vjp)
    return out


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather rows ``indices`` (1-D integer array) along axis 0."""
    a = _as_tensor(a)
    if axis != 0:
        raise DimensionError("take supports axis 0 only; transpose or reshape first")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"take indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"take: index out of range for {a.shape[0]} rows")
    out = Tensor(_lock(a.data[idx]), a.requires_grad)
    n_rows = a.shape[0]
    _record(out, (a,), lambda g: (scatter_rows(g, idx, n_rows),))
    return out


def scatter_rows(src, indices, n_rows: int) -> Tensor:
    """Sum rows of ``src`` into a zero tensor of ``n_rows`` rows at ``indices``."""
    src = _as_tensor(src)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size != src.shape[0]:
        raise DimensionError(f"scatter_rows: {idx.shape} indices for {src.shape[0]} rows")
    acc = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    np.add.at(acc, idx, src.data)
    out = _finish(acc, "scatter_rows", src.requires_grad)
    _record(out, (src,), lambda g: (take(g, idx),))
    return out


def _normalize_axis(axis: Axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out_arr = np.sum(a.data, axis=axes, keepdims=keepdims)
    out = _finish(np.asarray(out_arr), "sum", a.requires_grad)
    in_shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def vjp(g: Tensor):
        gk = g if keepdims else reshape(g, kept)
        return (broadcast_to(gk, in_shape),)

    _record(out, (a,), vjp)
    return out


def mean(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / count)


def stop_gradient(a: Tensor) -> Tensor:
    """The same value cut out of the gradient graph."""
    return Tensor(a.data, False)


def softmax_with_bias(logits, bias) -> Tensor:
    """Row-wise softmax of ``logits + bias`` with max-subtraction.

    Rows sum to 1 for any finite input; the subtracted row maximum is a
    constant shift and does not participate in differentiation.
    """
    logits, bias = _pair(logits, bias)
    if logits.ndim != 2 or logits.shape != bias.shape:
        raise DimensionError(
            f"softmax_with_bias needs matching 2-D shapes, got {logits.shape} and {bias.shape}"
        )
    shifted_in = add(logits, bias)
    row_max = Tensor(_lock(np.max(shifted_in.data, axis=1, keepdims=True)), False)
    e = exp(sub(shifted_in, row_max))
    return div(e, reduce_sum(e, axis=1, keepdims=True))


def softmax(logits) -> Tensor:
    logits = _as_tensor(logits)
    return softmax_with_bias(logits, zeros_like(logits))


# --------------------------------------------------------------------------
# Finite-difference oracle


@dataclass
class FiniteDifferenceReport:
    """Per-parameter worst relative error of tape gradients vs central differences."""

    max_rel_err: float
    per_param: dict
    h: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self) -> str:
        lines = [f"finite-difference check (h={self.h:g}, tol={self.tol:g})"]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: max rel err {err:.3e}")
        lines.append(f"  overall: {self.max_rel_err:.3e} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def finite_difference_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> FiniteDifferenceReport:
    """Compare tape gradients of ``f(params)`` against central differences.

    ``f`` must be deterministic under fixed inputs (checked by double
    evaluation) and return a scalar tensor.  Relative error uses
    ``max(|analytic|, |numeric|, 1e-12)`` as denominator.
    """
    base1 = f(params).item()
    base2 = f(params).item()
    if base1 != base2:
        raise OracleError(
            f"f is not deterministic: repeated evaluations gave {base1!r} and {base2!r}"
        )

    with GradientTape() as tape:
        loss = f(params)
    grads = backward(loss, tape)

    per_param: dict = {}
    for name, p in params.items():
        analytic = grads[p].data
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            plus = dict(params)
            plus[name] = Tensor(_lock(bumped.reshape(p.shape)), p.requires_grad)
            bumped = flat.copy()
            bumped[i] = flat[i] - h
            minus = dict(params)
            minus[name] = Tensor(_lock(bumped.reshape(p.shape)), p.requires_grad)
            numeric = (f(plus).item() - f(minus).item()) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, abs(a - numeric) / denom)
        per_param[name] = worst
    overall = max(per_param.values()) if per_param else 0.0
    return FiniteDifferenceReport(overall, per_param, h, tol)
