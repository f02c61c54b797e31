# Copyright (c) 2025 Francis Bain
# SPDX-License-Identifier: Apache-2.0

"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` of the
calling thread whenever one of their inputs requires a gradient. Outside a
tape nothing is recorded, so inference code needs no special mode::

    with Tape():
        loss = sum(mul(x, x))
        loss.backward()      # x.grad == 2 * x

Broadcasting is limited to scalar-versus-tensor and equal shapes; anything
else must be spelled out with :func:`reshape`, :func:`repeat` or
:func:`bias_add`.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GradientError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

Operand = Union["Tensor", np.ndarray, float, int]
Adjoint = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Immutable n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    __array_priority__ = 1000

    def __init__(self, data: Operand, *, requires_grad: bool = False, name: Optional[str] = None):
        source = data.data if isinstance(data, Tensor) else data
        arr = np.array(source, copy=True)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> Tensor:
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}", shapes=[self.shape])
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def astype(self, dtype: np.dtype) -> Tensor:
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Replay the tape that produced this scalar and populate gradients."""
        if self._tape is None:
            if self.requires_grad:
                # a leaf loss: its own gradient is one
                self._check_scalar()
                self.grad = np.ones_like(self.data)
                return
            raise GradientError(
                "backward() called on a tensor that was not produced on a tape",
                context={"shape": self.shape},
            )
        self._tape.backward(self)

    def _check_scalar(self) -> None:
        if self.size != 1:
            raise GradientError(
                f"backward() needs a scalar loss, got shape {self.shape}",
                context={"shape": self.shape},
            )

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Operand) -> Tensor:
        return matmul(self, other)


@dataclass
class _Record:
    output: Tensor
    inputs: Tuple[Tensor, ...]
    adjoint: Adjoint


class Tape:
    """Ordered record of primitive operations for a single forward pass.

    A tape is single-use: :meth:`backward` consumes it. Re-running the forward
    pass inside a fresh ``with Tape():`` block rebuilds it.
    """

    def __init__(self) -> None:
        self._records: List[_Record] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], adjoint: Adjoint) -> None:
        if self.consumed:
            raise GradientError("cannot record on a tape that has already been replayed")
        self._records.append(_Record(output, inputs, adjoint))
        output._tape = self

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise GradientError("tape already replayed; run the forward pass again")
        loss._check_scalar()

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        seen: Dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self._records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            rec.output.grad = g
            for inp, gi in zip(rec.inputs, rec.adjoint(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                seen[key] = inp
                gi = np.asarray(gi, dtype=inp.data.dtype).reshape(inp.data.shape)
                grads[key] = grads[key] + gi if key in grads else gi

        # whatever is left belongs to leaves
        for key, g in grads.items():
            leaf = seen[key]
            leaf.grad = g if leaf.grad is None else leaf.grad + g

        logger.debug("tape replayed", extra={"records": len(self._records)})
        self._records.clear()
        self.consumed = True


_local = threading.local()


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(value: Operand, dtype: Optional[np.dtype] = None) -> Tensor:
    """Wrap ``value`` as a constant tensor; tensors pass through unchanged.

    Args:
        value: Tensor, array or scalar
        dtype: Float dtype for new arrays; non-float input defaults to float32

    Returns:
        A tensor sharing ``value``'s data where possible
    """
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(dtype or DEFAULT_DTYPE)
    return Tensor._wrap(arr)


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], adjoint: Adjoint) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        assert tape is not None
        tape.record(out, inputs, adjoint)
    return out


def zeros(shape: Sequence[int], *, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=dtype), requires_grad=requires_grad)


def ones(shape: Sequence[int], *, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor._wrap(np.ones(tuple(shape), dtype=dtype), requires_grad=requires_grad)


# -- elementwise -----------------------------------------------------------


def _pair(a: Operand, b: Operand, op: str) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        ta, tb = a, as_tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor):
        ta, tb = as_tensor(a, dtype=b.dtype), b
    else:
        ta = as_tensor(a)
        tb = as_tensor(b, dtype=ta.dtype)
    if ta.shape != tb.shape and ta.ndim != 0 and tb.ndim != 0:
        raise ShapeError(
            f"{op}: shapes {ta.shape} and {tb.shape} are not broadcast-compatible "
            "(only equal shapes or scalars are supported)",
            shapes=[ta.shape, tb.shape],
        )
    return ta, tb


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b, "add")
    return _result(
        ta.data + tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)),
    )


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b, "sub")
    return _result(
        ta.data - tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)),
    )


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b, "mul")
    return _result(
        ta.data * tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)),
    )


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = _pair(a, b, "div")
    return _result(
        ta.data / tb.data,
        (ta, tb),
        lambda g: (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        ),
    )


def neg(x: Operand) -> Tensor:
    t = as_tensor(x)
    return _result(-t.data, (t,), lambda g: (-g,))


def exp(x: Operand) -> Tensor:
    t = as_tensor(x)
    out = np.exp(t.data)
    return _result(out, (t,), lambda g: (g * out,))


def log(x: Operand) -> Tensor:
    t = as_tensor(x)
    return _result(np.log(t.data), (t,), lambda g: (g / t.data,))


def sqrt(x: Operand) -> Tensor:
    t = as_tensor(x)
    out = np.sqrt(t.data)
    return _result(out, (t,), lambda g: (g * 0.5 / out,))


def tanh(x: Operand) -> Tensor:
    t = as_tensor(x)
    out = np.tanh(t.data)
    return _result(out, (t,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x: Operand) -> Tensor:
    t = as_tensor(x)
    e = np.exp(-np.abs(t.data))
    out = np.where(t.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(t.dtype)
    return _result(out, (t,), lambda g: (g * out * (1.0 - out),))


def maximum(x: Operand, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)`` against a scalar."""
    t = as_tensor(x)
    out = np.maximum(t.data, t.dtype.type(floor))
    return _result(out, (t,), lambda g: (g * (t.data > floor),))


def relu(x: Operand) -> Tensor:
    return maximum(x, 0.0)


def clamp(
    x: Operand, low: Union[float, np.ndarray], high: Union[float, np.ndarray]
) -> Tensor:
    """Clip ``x`` into ``[low, high]``; bounds are scalars or arrays of ``x``'s shape."""
    t = as_tensor(x)
    for bound in (low, high):
        if np.ndim(bound) and np.shape(bound) != t.shape:
            raise ShapeError(
                f"clamp: bound shape {np.shape(bound)} does not match {t.shape}",
                shapes=[np.shape(bound), t.shape],
            )
    out = np.clip(t.data, low, high).astype(t.dtype)
    inside = (t.data >= low) & (t.data <= high)
    return _result(out, (t,), lambda g: (g * inside,))


def select(mask: np.ndarray, a: Operand, b: Operand) -> Tensor:
    """Per-element choice: ``a`` where ``mask`` is true, ``b`` elsewhere."""
    ta, tb = _pair(a, b, "select")
    shape = ta.shape if ta.ndim else tb.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError(
            f"select: mask shape {mask.shape} does not match {shape}", shapes=[mask.shape, shape]
        )
    out = np.where(mask, ta.data, tb.data)
    return _result(
        out,
        (ta, tb),
        lambda g: (
            _unbroadcast(np.where(mask, g, 0), ta.shape),
            _unbroadcast(np.where(mask, 0, g), tb.shape),
        ),
    )


# -- shape and reductions --------------------------------------------------


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    t = as_tensor(x)
    try:
        out = t.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {t.shape} as {tuple(shape)}", shapes=[t.shape]) from e
    return _result(out, (t,), lambda g: (g.reshape(t.shape),))


def _expand(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.asarray(g).reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: Operand, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    t = as_tensor(x)
    out = np.asarray(t.data.sum(axis=axis, keepdims=keepdims), dtype=t.dtype)
    return _result(out, (t,), lambda g: (_expand(g, t.shape, axis, keepdims),))


def mean(x: Operand, axis=None, keepdims: bool = False) -> Tensor:
    t = as_tensor(x)
    count = t.size if axis is None else int(np.prod([t.shape[a] for a in np.atleast_1d(axis)]))
    return div(sum(t, axis=axis, keepdims=keepdims), float(count))


def max(x: Operand, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient flows to the first maximal entry."""
    t = as_tensor(x)
    if axis is None:
        idx = int(np.argmax(t.data))
        out = np.asarray(t.data.reshape(-1)[idx])

        def adjoint(g):
            full = np.zeros(t.size, dtype=t.dtype)
            full[idx] = g
            return (full.reshape(t.shape),)

        return _result(out, (t,), adjoint)

    idx = np.expand_dims(np.argmax(t.data, axis=axis), axis)
    out = np.take_along_axis(t.data, idx, axis=axis).squeeze(axis)

    def adjoint_axis(g):
        full = np.zeros_like(t.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _result(out, (t,), adjoint_axis)


def concat(tensors: Sequence[Operand], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def repeat(x: Operand, n: int) -> Tensor:
    """Append a trailing axis of length ``n`` holding copies of ``x``."""
    t = as_tensor(x)
    out = np.repeat(t.data[..., None], n, axis=-1)
    return _result(out, (t,), lambda g: (g.sum(axis=-1),))


def roll(x: Operand, shift: Tuple[int, int]) -> Tensor:
    """Circular shift over the last two (spatial) axes."""
    t = as_tensor(x)
    dy, dx = int(shift[0]), int(shift[1])
    out = np.roll(t.data, (dy, dx), axis=(-2, -1))
    return _result(out, (t,), lambda g: (np.roll(g, (-dy, -dx), axis=(-2, -1)),))


def bias_add(x: Operand, bias: Operand) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    tx, tb = as_tensor(x), as_tensor(bias)
    if tb.ndim != 1 or tx.shape[-1:] != tb.shape:
        raise ShapeError(
            f"bias_add: bias {tb.shape} does not match last axis of {tx.shape}",
            shapes=[tx.shape, tb.shape],
        )
    lead = tuple(range(tx.ndim - 1))
    return _result(tx.data + tb.data, (tx, tb), lambda g: (g, g.sum(axis=lead)))


# -- linear algebra --------------------------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    """Matrix product of two 2-D tensors."""
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim != 2 or tb.ndim != 2 or ta.shape[1] != tb.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions differ for {ta.shape} and {tb.shape}",
            shapes=[ta.shape, tb.shape],
        )
    return _result(ta.data @ tb.data, (ta, tb), lambda g: (g @ tb.data.T, ta.data.T @ g))


def conv2d(
    x: Operand,
    kernels: Operand,
    bias: Optional[Operand] = None,
    *,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of ``x`` (``C×H×W`` or ``N×C×H×W``) with ``kernels``.

    Args:
        x: Input volume or batch
        kernels: ``[C_out, C_in, k, k]`` weights
        bias: Optional ``[C_out]`` bias
        stride: Step between output positions
        padding: Zero padding on every side

    Returns:
        ``C_out×H'×W'`` output, batched like ``x``

    Raises:
        ShapeError: Ranks or channel counts do not match
    """
    tx, tw = as_tensor(x), as_tensor(kernels)
    if tx.ndim not in (3, 4) or tw.ndim != 4:
        raise ShapeError(
            f"conv2d: expected C×H×W or N×C×H×W input and 4-D kernels, got {tx.shape} and {tw.shape}",
            shapes=[tx.shape, tw.shape],
        )
    xb = tx.data if tx.ndim == 4 else tx.data[None]
    n, c, h, w = xb.shape
    c_out, c_in, kh, kw = tw.shape
    if c_in != c:
        raise ShapeError(
            f"conv2d: kernels expect {c_in} channels, input has {c}", shapes=[tx.shape, tw.shape]
        )
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kh}×{kw} larger than padded input {hp}×{wp}",
            shapes=[tx.shape, tw.shape],
        )
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    out = np.einsum("nchwij,ocij->nohw", windows, tw.data, optimize=True)

    inputs: Tuple[Tensor, ...] = (tx, tw)
    tbias = None
    if bias is not None:
        tbias = as_tensor(bias)
        if tbias.shape != (c_out,):
            raise ShapeError(
                f"conv2d: bias {tbias.shape} does not match {c_out} output channels",
                shapes=[tbias.shape],
            )
        out = out + tbias.data[None, :, None, None]
        inputs = (tx, tw, tbias)
    out = out.astype(tx.dtype)
    if tx.ndim == 3:
        out = out[0]

    def adjoint(g):
        gb = g if g.ndim == 4 else g[None]
        dw = np.einsum("nohw,nchwij->ocij", gb, windows, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += np.einsum(
                    "nohw,oc->nchw", gb, tw.data[:, :, i, j], optimize=True
                )
        dx = dxp[:, :, padding : padding + h, padding : padding + w]
        if tx.ndim == 3:
            dx = dx[0]
        grads = [dx, dw]
        if tbias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)))
        return grads

    return _result(out, inputs, adjoint)


# -- probabilities -----------------------------------------------------------


def softmax(x: Operand, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    t = as_tensor(x)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(
        out, (t,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(x: Operand, axis: int = -1) -> Tensor:
    t = as_tensor(x)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    return _result(out, (t,), lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Operand, labels: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``[c]`` for one sample or ``[N, c]`` for a batch.
    """
    t = as_tensor(logits)
    lg = t.data if t.ndim == 2 else t.data[None]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if lg.shape[1] < 2 or y.shape != (lg.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {t.shape} do not match labels {y.shape}",
            shapes=[t.shape, y.shape],
        )
    z = lg - lg.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(lg.shape[0])
    out = np.asarray(-logp[rows, y].mean(), dtype=t.dtype)

    def adjoint(g):
        d = np.exp(logp)
        d[rows, y] -= 1.0
        d *= g / lg.shape[0]
        return (d if t.ndim == 2 else d[0],)

    return _result(out, (t,), adjoint)


# -- recurrent cell ----------------------------------------------------------


@dataclass
class GRUParams:
    """Gate weights of a GRU cell: input maps ``d×a``, recurrent maps ``a×a``, biases ``a``."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @property
    def input_dim(self) -> int:
        return self.w_z.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_z.shape[1]

    def tensors(self) -> Dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self) -> None:
        d, a = self.input_dim, self.hidden_dim
        expected = {"w": (d, a), "u": (a, a), "b": (a,)}
        for name, t in self.tensors().items():
            if t.shape != expected[name[0]]:
                raise ShapeError(
                    f"GRU parameter {name} has shape {t.shape}, expected {expected[name[0]]}",
                    shapes=[t.shape, expected[name[0]]],
                )


def gru_cell(x: Operand, h_prev: Operand, params: GRUParams) -> Tensor:
    """One GRU update ``h = (1 - z)∘h_prev + z∘h̃`` for ``[d]`` or ``[N, d]`` inputs."""
    params.validate()
    tx, th = as_tensor(x), as_tensor(h_prev)
    single = tx.ndim == 1
    if single:
        tx, th = reshape(tx, (1, -1)), reshape(th, (1, -1))
    if tx.ndim != 2 or tx.shape[1] != params.input_dim:
        raise ShapeError(
            f"gru_cell: input {tx.shape} does not match input dim {params.input_dim}",
            shapes=[tx.shape],
        )
    if th.shape != (tx.shape[0], params.hidden_dim):
        raise ShapeError(
            f"gru_cell: state {th.shape} does not match hidden dim {params.hidden_dim}",
            shapes=[th.shape],
        )

    z = sigmoid(bias_add(matmul(tx, params.w_z) + matmul(th, params.u_z), params.b_z))
    r = sigmoid(bias_add(matmul(tx, params.w_r) + matmul(th, params.u_r), params.b_r))
    candidate = tanh(bias_add(matmul(tx, params.w_h) + matmul(r * th, params.u_h), params.b_h))
    h_next = (1.0 - z) * th + z * candidate
    return reshape(h_next, (-1,)) if single else h_next


# -- gradient checking -------------------------------------------------------


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    *,
    coords: int = 20,
    step: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    atol: float = 1e-6,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from ``tensors`` on every call. The
    checked coordinates are drawn uniformly over all elements of ``tensors``.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    with Tape():
        fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    sizes = np.array([t.size for t in tensors])
    picks = rng.integers(0, sizes.sum(), size=min(coords, int(sizes.sum())))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        t, i = tensors[which], int(flat - offsets[which])
        h = step if step is not None else (1e-5 if t.dtype == np.float64 else 1e-3)
        if not t.data.flags.c_contiguous:
            raise GradientError("gradcheck needs contiguous leaf tensors", context={"shape": t.shape})
        flat_view = t.data.reshape(-1)
        orig = flat_view[i].copy()
        flat_view[i] = orig + h
        f_plus = fn().item()
        flat_view[i] = orig - h
        f_minus = fn().item()
        flat_view[i] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        exact = float(analytic[which].reshape(-1)[i])
        err = abs(exact - numeric) / np.max([abs(exact), abs(numeric), atol])
        worst = float(np.max([worst, err]))
    return worst
