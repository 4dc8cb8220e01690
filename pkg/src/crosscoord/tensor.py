"""Dense float64 tensors with reverse-mode automatic differentiation.

Gradients are recorded on a dynamic tape: every differentiable operation
appends one entry while a Tape is active, and Tape.backward walks the
entries in reverse creation order (creation order is already topological).
With no tape active the same ops run as plain numpy, which is the fast
path used for environment rollouts.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes,
scalars, or a leading-batch broadcast where one operand's shape is a
suffix of the other's (e.g. bias (d,) against batch (B, d)).  Anything
else must go through reshape()/expand() so every backward rule stays
auditable.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = ["Tensor", "Tape", "concat", "minimum", "no_tape_guard"]

_state = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of operations for one forward pass.

    Usage:
        with Tape() as tape:
            loss = ...
        tape.backward(loss)

    Single-threaded per tape; independent tapes may live on separate
    threads because the active tape is thread-local.
    """

    def __init__(self):
        self._ops: list[tuple[tuple[Tensor, ...], Tensor, Callable]] = []
        self._entered = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _state.tape = self
        self._entered = True
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def _record(self, inputs: tuple["Tensor", ...], out: "Tensor", backward: Callable):
        self._ops.append((inputs, out, backward))

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(tensor) into .grad of every requires_grad tensor.

        The loss must be a scalar produced on this tape; each recorded
        operation is visited exactly once, in reverse order.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        produced = {id(out) for _, out, _ in self._ops}
        if id(loss) not in produced:
            raise ValueError("loss is not connected to this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for inputs, out, backward in reversed(self._ops):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            # reverse creation order guarantees every consumer of `out` was
            # already visited, so g_out is the complete gradient
            out.grad = g_out if out.grad is None else out.grad + g_out
            for t, g in zip(inputs, backward(g_out)):
                if g is None:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
            for t in inputs:
                if t._leaf and t.requires_grad and id(t) in grads:
                    g = grads.pop(id(t))
                    t.grad = g.copy() if t.grad is None else t.grad + g


def no_tape_guard():
    """Raise if called while a tape is recording (guards pure-numpy paths)."""
    if _active_tape() is not None:
        raise RuntimeError("operation not differentiable: no tape may be active")


def _suffix_of(short: tuple, long: tuple) -> bool:
    return len(short) <= len(long) and long[len(long) - len(short):] == short


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes added by suffix broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    g = grad.sum(axis=tuple(range(extra))) if extra else grad
    if g.shape != shape:  # scalar operand
        g = g.sum().reshape(shape)
    return g


def _check_elementwise(a: "Tensor", b: "Tensor", op: str):
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or a.data.size == 1 or b.data.size == 1:
        return
    if _suffix_of(sa, sb) or _suffix_of(sb, sa):
        return
    raise ValueError(f"{op}: shapes {sa} and {sb} are not equal/scalar/suffix-broadcastable")


class Tensor:
    """A dense float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @classmethod
    def param(cls, data) -> "Tensor":
        return cls(data, requires_grad=True)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- op plumbing -------------------------------------------------------

    @staticmethod
    def _make(out_data: np.ndarray, inputs: tuple["Tensor", ...], backward: Callable) -> "Tensor":
        tape = _active_tape()
        track = tape is not None and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=track)
        if track:
            out._leaf = False
            tape._record(inputs, out, backward)
        return out

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))

    # -- elementwise arithmetic --------------------------------------------

    def add(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _check_elementwise(self, other, "add")
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

        return Tensor._make(a.data + b.data, (a, b), backward)

    def sub(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _check_elementwise(self, other, "sub")
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

        return Tensor._make(a.data - b.data, (a, b), backward)

    def mul(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _check_elementwise(self, other, "mul")
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape))

        return Tensor._make(a.data * b.data, (a, b), backward)

    def div(self, other) -> "Tensor":
        other = Tensor._lift(other)
        _check_elementwise(self, other, "div")
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g / b.data, a.data.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._make(a.data / b.data, (a, b), backward)

    def neg(self) -> "Tensor":
        a = self
        return Tensor._make(-a.data, (a,), lambda g: (-g,))

    __add__ = add
    __sub__ = sub
    __mul__ = mul
    __truediv__ = div
    __neg__ = neg

    def __radd__(self, other):
        return Tensor._lift(other).add(self)

    def __rsub__(self, other):
        return Tensor._lift(other).sub(self)

    def __rmul__(self, other):
        return Tensor._lift(other).mul(self)

    # -- matmul --------------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        """Matrix product on the last two axes.

        Supported: (m,k)@(k,n); (...,m,k)@(k,n); (...,m,k)@(...,k,n) with
        identical leading batch axes.  No implicit batch broadcasting.
        """
        other = Tensor._lift(other)
        a, b = self, other
        sa, sb = a.data.shape, b.data.shape
        if len(sa) < 2 or len(sb) < 2:
            raise ValueError(f"matmul needs >=2-d operands, got {sa} and {sb}")
        if sa[-1] != sb[-2]:
            raise ValueError(f"matmul: inner dims disagree for shapes {sa} and {sb}")
        if len(sb) > 2 and sa[:-2] != sb[:-2]:
            raise ValueError(f"matmul: batch axes disagree for shapes {sa} and {sb}")

        def backward(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if ga.shape != a.data.shape:  # b had more batch axes than a (impossible here)
                ga = ga.sum(axis=tuple(range(ga.ndim - a.data.ndim)))
            if gb.shape != b.data.shape:  # 2-d weight applied across a batch
                gb = gb.sum(axis=tuple(range(gb.ndim - b.data.ndim)))
            return ga, gb

        return Tensor._make(np.matmul(a.data, b.data), (a, b), backward)

    __matmul__ = matmul

    # -- nonlinearities -------------------------------------------------------

    def exp(self) -> "Tensor":
        a = self
        out_data = np.exp(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * out_data,))

    def log(self) -> "Tensor":
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def tanh(self) -> "Tensor":
        a = self
        out_data = np.tanh(a.data)
        return Tensor._make(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))

    def relu(self) -> "Tensor":
        a = self
        mask = a.data > 0.0
        return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))

    def clamp(self, lo: float, hi: float) -> "Tensor":
        """Clip to [lo, hi]; subgradient 0 at and beyond the boundaries."""
        a = self
        interior = (a.data > lo) & (a.data < hi)
        return Tensor._make(np.clip(a.data, lo, hi), (a,), lambda g: (g * interior,))

    def square(self) -> "Tensor":
        return self.mul(self)

    def softmax(self, axis: int = -1) -> "Tensor":
        """Numerically stable softmax along one axis (max-subtracted)."""
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            return ((g - inner) * out_data,)

        return Tensor._make(out_data, (a,), backward)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g.reshape(()), a.data.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, a.data.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        count = a.data.size if axis is None else a.data.shape[axis]

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g.reshape(()) / count, a.data.shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp / count, a.data.shape).copy(),)

        return Tensor._make(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),))

    def swap_last2(self) -> "Tensor":
        a = self
        return Tensor._make(np.swapaxes(a.data, -1, -2).copy(), (a,),
                            lambda g: (np.swapaxes(g, -1, -2),))

    def expand(self, *shape) -> "Tensor":
        """Explicitly broadcast size-1 axes (or prepend axes) to `shape`."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        src = a.data.shape
        if len(shape) < len(src):
            raise ValueError(f"expand: target {shape} has fewer axes than {src}")
        pad = len(shape) - len(src)
        for i, s in enumerate(src):
            if s != 1 and shape[pad + i] != s:
                raise ValueError(f"expand: cannot expand axis of size {s} to {shape[pad + i]}")
        expanded = tuple(i for i in range(len(shape))
                         if i < pad or (src[i - pad] == 1 and shape[i] != 1))

        def backward(g):
            if expanded:
                g = g.sum(axis=expanded, keepdims=True)
                g = g.reshape(src)
            return (g,)

        return Tensor._make(np.broadcast_to(a.data, shape).copy(), (a,), backward)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        """Contiguous slice [start, start+length) along one axis."""
        a = self
        idx = [slice(None)] * a.data.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)

        def backward(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)

        return Tensor._make(a.data[idx].copy(), (a,), backward)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along one axis; gradient splits back to each input."""
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        outs = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; on ties the gradient routes to the first input."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    _check_elementwise(a, b, "minimum")
    take_a = a.data <= b.data

    def backward(g):
        return (_unbroadcast(g * take_a, a.data.shape),
                _unbroadcast(g * ~take_a, b.data.shape))

    return Tensor._make(np.minimum(a.data, b.data), (a, b), backward)
