"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends a node to the active tape; ``backward``
replays the tape in reverse. Reductions and matrix products accumulate
strictly left to right so that reruns are bit-identical.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError, ShapeError

__all__ = [
    "Tensor", "Tape", "AdamState", "tensor", "parameter", "no_grad", "get_tape",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "swapaxes",
    "reshape", "concat", "index", "sum", "mean", "relu", "exp", "sqrt", "square",
    "softmax", "softmax_rows", "backward", "adam_step", "make_rng", "gaussian",
    "glorot_uniform", "count_multiplies",
]

class Tensor:
    """Row-major float64 array with an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` always carry a
    same-shape ``grad`` array. Intermediate results only receive a gradient
    internally during ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "__weakref__")

    def __init__(self, data, requires_grad=False, _leaf=True):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.is_leaf = _leaf
        self.grad = np.zeros_like(arr) if (requires_grad and _leaf) else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    return Tensor(data, requires_grad=True)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: object


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, out, inputs, backward_fn):
        self.nodes.append(_Node(out, inputs, backward_fn))

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


_TAPE = Tape()
_MULTIPLIES = [0]


def get_tape() -> Tape:
    return _TAPE


@contextlib.contextmanager
def no_grad():
    prev = _TAPE.enabled
    _TAPE.enabled = False
    try:
        yield
    finally:
        _TAPE.enabled = prev


class _MultiplyCounter:
    def __init__(self):
        self._start = _MULTIPLIES[0]
        self._stop = None

    @property
    def count(self):
        end = _MULTIPLIES[0] if self._stop is None else self._stop
        return end - self._start


@contextlib.contextmanager
def count_multiplies():
    """Count scalar multiplications performed by ``matmul`` inside the block."""
    counter = _MultiplyCounter()
    try:
        yield counter
    finally:
        counter._stop = _MULTIPLIES[0]


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr, opname):
    if not np.isfinite(arr).all():
        raise NumericalError(f"{opname} produced a non-finite value")


def _make(data, inputs, backward_fn, opname):
    _check_finite(data, opname)
    needs = _TAPE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _leaf=not needs)
    if needs:
        _TAPE.record(out, inputs, backward_fn)
    return out


def _ordered_sum(x, axis):
    """Sum along ``axis`` in strict left-to-right order."""
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        return np.zeros(x.shape[:axis] + x.shape[axis + 1:])
    return np.cumsum(x, axis=axis).take(-1, axis=axis)


def _ordered_sum_axes(x, axes, keepdims=False):
    axes = sorted({a % x.ndim for a in axes}, reverse=True)
    out = x
    for a in axes:
        out = _ordered_sum(out, a)
        if keepdims:
            out = np.expand_dims(out, a)
    return out


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = _ordered_sum_axes(grad, range(lead))
    axes = [i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1]
    if axes:
        grad = _ordered_sum_axes(grad, axes, keepdims=True)
    return grad.reshape(shape)


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), back, "div")


def neg(a):
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a):
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a):
    a = _as_tensor(a)
    if (a.data < 0).any():
        raise NumericalError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a):
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


# --- linear algebra ----------------------------------------------------------

def _ordered_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    k = a.shape[-1]
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}") from None
    out_shape = batch + (a.shape[-2], b.shape[-1])
    _MULTIPLIES[0] += int(np.prod(out_shape, dtype=np.int64)) * k
    if k == 0:
        return np.zeros(out_shape)
    # out[..., i, j] = (((a_i0 b_0j) + a_i1 b_1j) + ...) in the order of a naive loop
    out = a[..., :, 0:1] * b[..., 0:1, :]
    if out.shape != out_shape:
        out = np.broadcast_to(out, out_shape).copy()
    for j in range(1, k):
        out += a[..., :, j:j + 1] * b[..., j:j + 1, :]
    return out


def matmul(a, b):
    """Matrix product over the last two axes, batching over leading axes.

    Each output entry is accumulated over the inner index from left to
    right, exactly like a naive triple loop.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    out = _ordered_matmul(a.data, b.data)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_ordered_matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(_ordered_matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def transpose(a, axes=None):
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, i, j):
    a = _as_tensor(a)
    return _make(np.swapaxes(a.data, i, j), (a,),
                 lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=0):
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), back, "concat")


def index(a, key):
    """Basic (slice/int) indexing."""
    a = _as_tensor(a)
    out = a.data[key]

    def back(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _make(np.array(out), (a,), back, "index")


# --- reductions -------------------------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = _as_tensor(a)
    axes = tuple(range(a.ndim)) if axis is None else (
        (axis,) if isinstance(axis, int) else tuple(axis))
    out = _ordered_sum_axes(a.data, axes, keepdims=keepdims)
    norm = {ax % a.ndim for ax in axes}

    def back(g):
        g = np.asarray(g)
        if not keepdims:
            for ax in sorted(norm):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    axes = tuple(range(a.ndim)) if axis is None else (
        (axis,) if isinstance(axis, int) else tuple(axis))
    n = int(np.prod([a.shape[ax] for ax in axes]))
    return div(sum(a, axes, keepdims=keepdims), float(n))


def softmax(a, axis=-1):
    """Numerically stable softmax along ``axis``."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.expand_dims(_ordered_sum(e, axis), axis)

    def back(g):
        inner = np.expand_dims(_ordered_sum(g * out, axis), axis)
        return (out * (g - inner),)

    return _make(out, (a,), back, "softmax")


def softmax_rows(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows expects a rank-2 tensor, got shape {a.shape}")
    return softmax(a, axis=-1)


# --- backward ---------------------------------------------------------------

def backward(loss, retain_tape=False):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The tape is replayed in reverse recording order and cleared afterwards
    unless ``retain_tape`` is set.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    grads = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf:
        loss.grad += 1.0
        return
    for node in reversed(_TAPE.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            _check_finite(gi, "backward")
            if inp.is_leaf:
                inp.grad += gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if not retain_tape:
        _TAPE.clear()


# --- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState):
    """One bias-corrected Adam update over a name -> Tensor mapping.

    Gradients are zeroed and the tape is cleared afterwards.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad[...] = 0.0
    _TAPE.clear()


# --- randomness -------------------------------------------------------------

def make_rng(seed):
    """Philox-4x64 counter-based generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def gaussian(rng, shape, sigma=1.0):
    """Standard normal draws via the Box-Muller transform."""
    n = int(np.prod(shape, dtype=np.int64))
    pairs = (n + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return sigma * z[:n].reshape(shape)


def glorot_uniform(rng, shape, fan_in=None, fan_out=None):
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
