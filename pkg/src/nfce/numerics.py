"""Dense float64 tensors with a reverse-mode tape, Adam, and a finite-difference oracle.

Usage::

    tape = Tape()
    w = tape.param("w", np.ones(3))
    loss = ops.sum(w * w)
    grads = grad(tape, loss)        # {"w": array([2., 2., 2.])}

Every primitive computes its forward value eagerly with numpy and, when at
least one input lives on a tape, appends a node holding the closure that
maps the output cotangent back onto its inputs.  Constants are plain numpy
arrays (or tape-less ``Tensor`` objects) and never receive gradients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError

DTYPE = np.float64


class _Node:
    __slots__ = ("op", "parents", "backward", "shape", "name")

    def __init__(self, op, parents, backward, shape, name=None):
        self.op = op
        self.parents = parents
        self.backward = backward
        self.shape = shape
        self.name = name


class Tape:
    """Ordered record of primitive applications; parents always precede children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def param(self, name: str, value) -> "Tensor":
        """Register ``value`` as a differentiable leaf called ``name``."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice on one tape")
        data = np.asarray(value, dtype=DTYPE)
        idx = self._push("param", (), None, data.shape, name)
        self.params[name] = idx
        return Tensor(data, self, idx)

    def _push(self, op, parents, backward, shape, name=None) -> int:
        self.nodes.append(_Node(op, parents, backward, shape, name))
        return len(self.nodes) - 1


class Tensor:
    """Immutable float64 array, optionally bound to a tape node."""

    __slots__ = ("data", "tape", "index")
    __array_priority__ = 100

    def __init__(self, data, tape: Tape | None = None, index: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        where = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor(shape={self.shape}, {where})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __getitem__ = lambda a, key: getitem(a, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


ArrayLike = Tensor | np.ndarray | float | int


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _record(op: str, out: np.ndarray, inputs: Sequence, backward: Callable) -> Tensor:
    tape = None
    for x in inputs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ContractError("operands belong to different tapes")
            tape = x.tape
    if tape is None:
        return Tensor(out)
    parents = tuple(
        x.index if isinstance(x, Tensor) and x.tape is tape else None for x in inputs
    )
    idx = tape._push(op, parents, backward, out.shape)
    return Tensor(out, tape, idx)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    x, y = _data(a), _data(b)
    return _record("add", x + y, (a, b),
                   lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    x, y = _data(a), _data(b)
    return _record("sub", x - y, (a, b),
                   lambda g: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)))


def neg(a: ArrayLike) -> Tensor:
    return _record("neg", -_data(a), (a,), lambda g: (-g,))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    x, y = _data(a), _data(b)
    return _record("mul", x * y, (a, b),
                   lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))


def broadcast_to(a: ArrayLike, shape: tuple[int, ...]) -> Tensor:
    x = _data(a)
    out = np.broadcast_to(x, shape).copy()
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, x.shape),))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; a 2-D right operand is shared by every batch."""
    x, y = _data(a), _data(b)
    if x.ndim < 2 or y.ndim < 2:
        raise ContractError(f"matmul needs >=2-D operands, got {x.shape} and {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ContractError(f"matmul shape mismatch {x.shape} @ {y.shape}")

    shared = y.ndim == 2 and x.ndim > 2

    def backward(g):
        if shared:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ y.T).reshape(x.shape)
            gb = x.reshape(-1, x.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(y, -1, -2)
        if y.ndim == 2:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape)
        return _unbroadcast(ga, x.shape), gb

    # a shared 2-D right operand is one GEMM over the flattened batch
    out = (x.reshape(-1, x.shape[-1]) @ y).reshape(*x.shape[:-1], y.shape[-1]) if shared else x @ y
    return _record("matmul", out, (a, b), backward)


def transpose(a: ArrayLike, axes: Sequence[int] | None = None) -> Tensor:
    x = _data(a)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(x, axes), (a,),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = _data(a)
    return _record("reshape", x.reshape(tuple(shape)), (a,),
                   lambda g: (g.reshape(x.shape),))


def getitem(a: ArrayLike, key) -> Tensor:
    """Basic (view) slicing; fancy indexing is not part of the primitive set."""
    x = _data(a)
    out = x[key]

    def backward(g):
        full = np.zeros_like(x)
        full[key] = g
        return (full,)

    return _record("slice", np.array(out, dtype=DTYPE), (a,), backward)


def concat(items: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    arrays = [_data(t) for t in items]
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, tuple(items), backward)


def relu(a: ArrayLike) -> Tensor:
    x = _data(a)
    mask = x > 0
    return _record("relu", np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: ArrayLike) -> Tensor:
    y = np.tanh(_data(a))
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: ArrayLike) -> Tensor:
    x = _data(a)
    # split form avoids overflow of exp(-x) for large negative x
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a: ArrayLike) -> Tensor:
    """Softmax over the last axis."""
    x = _data(a)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (a,), backward)


def rsqrt(a: ArrayLike) -> Tensor:
    x = _data(a)
    if np.any(x <= 0):
        raise NumericError("rsqrt of a non-positive value")
    y = 1.0 / np.sqrt(x)
    return _record("rsqrt", y, (a,), lambda g: (-0.5 * g * y / x,))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _data(a)
    axes = _norm_axes(axis, x.ndim)
    out = x.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=DTYPE), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    x = _data(a)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes]))
    out = x.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record("mean", np.asarray(out, dtype=DTYPE), (a,), backward)


def var(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count)."""
    x = _data(a)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[ax] for ax in axes]))
    centered = x - x.mean(axis=axes, keepdims=True)
    out = (centered * centered).mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (2.0 * centered * g / count,)

    return _record("var", np.asarray(out, dtype=DTYPE), (a,), backward)


# ---------------------------------------------------------------- gradients


def grad(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns d loss / d param for every param."""
    if not isinstance(loss, Tensor) or loss.tape is not tape or loss.index is None:
        raise ContractError("loss must be a node on the given tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"loss node {loss.index} is not finite")

    cot: list[np.ndarray | None] = [None] * len(tape.nodes)
    cot[loss.index] = np.ones(loss.shape, dtype=DTYPE)
    for i in range(loss.index, -1, -1):
        g = cot[i]
        node = tape.nodes[i]
        if g is None or node.backward is None:
            continue
        if i != loss.index:
            cot[i] = None  # release intermediate cotangents early
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient at node {i} ({node.op})")
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent is None or pg is None:
                continue
            cot[parent] = pg if cot[parent] is None else cot[parent] + pg

    out = {}
    for name, idx in tape.params.items():
        g = cot[idx]
        out[name] = np.zeros(tape.nodes[idx].shape) if g is None else g
        if not np.isfinite(out[name]).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    return out


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x+h e_i) - f(x-h e_i)) / 2h`` for every coordinate."""
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    x = np.array(x, dtype=DTYPE)
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"objective not finite at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(x.shape)


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, |n|), the acceptance metric for gradient checks."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("Adam learning rate must be positive")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Moments are updated in place on ``state``."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    updated = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        updated[name] = p - state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return updated, state
