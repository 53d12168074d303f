"""Dense float32 tensors with reverse-mode and forward-mode differentiation.

Reverse mode is tape based: kernels executed while a `GradTape` is active
record pullback closures, and `backward` walks them once to produce a
gradient map for the tape's registered parameters.

Forward mode is dual-number based: every kernel accepts `DualTensor`
operands and propagates (primal, tangent) in a single pass, so `jvp` needs
no tape. When a tape *is* active during a dual pass, the primal half is
recorded normally and the tangent half stays off the tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform for the named kernel."""


class TapeError(RuntimeError):
    """Tape misuse: non-scalar loss, consumed tape, or similar."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where the contract forbids it."""


class UnsupportedKernelError(TypeError):
    """A kernel without a forward-mode rule was reached inside `jvp`."""


class Tensor:
    """Contiguous row-major float32 array plus a leaf-gradient flag."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor; `requires_grad` is flipped off to freeze it."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class DualTensor:
    """(primal, tangent) pair for forward-mode differentiation."""

    __slots__ = ("primal", "tangent")

    def __init__(self, primal: Tensor, tangent: Tensor):
        if primal.shape != tangent.shape:
            raise ShapeError(
                f"dual tensor: primal shape {primal.shape} != tangent shape {tangent.shape}"
            )
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self) -> tuple:
        return self.primal.shape


# Active tapes, innermost last. Training is single-threaded by contract, so
# a module-level stack is sufficient.
_TAPES: list["GradTape"] = []


class _Node:
    __slots__ = ("out", "inputs", "needs", "pullback")

    def __init__(self, out, inputs, needs, pullback):
        self.out = out
        self.inputs = inputs
        self.needs = needs
        self.pullback = pullback


class GradTape:
    """Records forward kernels and maps registered parameter names to grads."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: dict[str, Tensor] = {}
        self._tracked: set[int] = set()
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _TAPES and _TAPES[-1] is self
        _TAPES.pop()
        return False

    def watch(self, name: str, tensor: Tensor):
        self.params[name] = tensor

    def watch_params(self, params: dict):
        for name, p in params.items():
            self.watch(name, p)

    def _tracks(self, t) -> bool:
        return isinstance(t, Tensor) and (t.requires_grad or id(t) in self._tracked)


def active_tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


def record(out: Tensor, inputs: Sequence[Tensor], pullback: Callable):
    """Attach a node to the active tape if any input participates in grads.

    `pullback(g)` must return one cotangent array (or None) per input.
    Pullbacks that are expensive per input may accept `(g, needs)` and skip
    inputs whose flag is false; contributions for unneeded inputs are
    discarded either way.
    """
    tape = active_tape()
    if tape is None or tape.consumed:
        return
    needs = tuple(tape._tracks(t) for t in inputs)
    if not any(needs):
        return
    tape.nodes.append(_Node(out, tuple(inputs), needs, pullback))
    tape._tracked.add(id(out))


def needs_aware(pullback: Callable) -> Callable:
    """Mark a pullback as taking `(g, needs)` instead of just `g`."""
    pullback._needs_aware = True
    return pullback


def backward(loss: Tensor, tape: GradTape) -> dict[str, Tensor]:
    """Reverse sweep from a scalar loss; returns grads for registered params.

    The tape is consumed: a second backward on it raises. Registered
    parameters the loss never reached get zero gradients of matching shape.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        if getattr(node.pullback, "_needs_aware", False):
            contribs = node.pullback(g, node.needs)
        else:
            contribs = node.pullback(g)
        for t, gi, need in zip(node.inputs, contribs, node.needs):
            if not need or gi is None:
                continue
            key = id(t)
            acc = grads.get(key)
            if acc is None:
                grads[key] = gi
            else:
                acc += gi

    result = {}
    for name, p in tape.params.items():
        g = grads.get(id(p))
        result[name] = Tensor(g) if g is not None else Tensor(np.zeros_like(p.data))

    tape.consumed = True
    tape.nodes.clear()
    tape._tracked.clear()
    return result


def jvp(function: Callable, inputs: Sequence, tangents: Sequence):
    """Evaluate `function` and its directional derivative in one dual pass.

    Returns (value, J·v) as Tensors. Tangents must shape-match inputs.
    Works with or without an active tape; with one, only the primal half is
    recorded.
    """
    if len(inputs) != len(tangents):
        raise ShapeError(f"jvp: {len(inputs)} inputs but {len(tangents)} tangents")
    duals = []
    for x, v in zip(inputs, tangents):
        xt = x if isinstance(x, Tensor) else Tensor(x)
        vt = v if isinstance(v, Tensor) else Tensor(v)
        duals.append(DualTensor(xt, vt))
    out = function(*duals)
    if isinstance(out, DualTensor):
        return out.primal, out.tangent
    if isinstance(out, Tensor):
        # Function was constant in its dual arguments.
        return out, Tensor(np.zeros_like(out.data))
    raise UnsupportedKernelError("jvp: function returned a non-tensor result")


# ---------------------------------------------------------------------------
# kernel helpers


def _is_dual(*xs) -> bool:
    return any(isinstance(x, DualTensor) for x in xs)


def _split(x):
    """(primal Tensor, tangent array or None); None means an exact zero."""
    if isinstance(x, DualTensor):
        return x.primal, x.tangent.data
    return x, None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g, dtype=np.float32)


def _check_broadcast(kernel: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kernel}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise and linalg kernels


def add(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        p = add(ap, bp)
        if at is None:
            tan = np.broadcast_to(bt, p.shape).astype(np.float32)
        elif bt is None:
            tan = np.broadcast_to(at, p.shape).astype(np.float32)
        else:
            tan = at + bt
        return DualTensor(p, Tensor(tan))
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def subtract(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        p = subtract(ap, bp)
        if at is None:
            tan = np.broadcast_to(-bt, p.shape).astype(np.float32)
        elif bt is None:
            tan = np.broadcast_to(at, p.shape).astype(np.float32)
        else:
            tan = at - bt
        return DualTensor(p, Tensor(tan))
    _check_broadcast("subtract", a, b)
    out = Tensor(a.data - b.data)
    record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def multiply(a, b):
    """Hadamard product with numpy broadcast rules."""
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        p = multiply(ap, bp)
        tan = np.zeros(p.shape, dtype=np.float32)
        if at is not None:
            tan += at * bp.data
        if bt is not None:
            tan += ap.data * bt
        return DualTensor(p, Tensor(tan))
    _check_broadcast("multiply", a, b)
    out = Tensor(a.data * b.data)

    def pull(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    record(out, (a, b), pull)
    return out


def scale(x, s: float):
    """Multiply by a python scalar."""
    s = float(s)
    if _is_dual(x):
        return DualTensor(scale(x.primal, s), Tensor(x.tangent.data * s))
    out = Tensor(x.data * s)
    record(out, (x,), lambda g: (g * s,))
    return out


def negate(x):
    return scale(x, -1.0)


def matmul(a, b):
    if _is_dual(a, b):
        ap, at = _split(a)
        bp, bt = _split(b)
        p = matmul(ap, bp)
        tan = np.zeros(p.shape, dtype=np.float32)
        if at is not None:
            tan += at @ bp.data
        if bt is not None:
            tan += ap.data @ bt
        return DualTensor(p, Tensor(tan))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.data @ b.data)

    @needs_aware
    def pull(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return (ga, gb)

    record(out, (a, b), pull)
    return out


def relu(x):
    if _is_dual(x):
        p = relu(x.primal)
        mask = x.primal.data > 0
        return DualTensor(p, Tensor(x.tangent.data * mask))
    out = Tensor(np.maximum(x.data, 0.0))
    record(out, (x,), lambda g: (g * (out.data > 0),))
    return out


def sin(x):
    if _is_dual(x):
        return DualTensor(sin(x.primal), Tensor(np.cos(x.primal.data) * x.tangent.data))
    out = Tensor(np.sin(x.data))
    record(out, (x,), lambda g: (g * np.cos(x.data),))
    return out


def cos(x):
    if _is_dual(x):
        return DualTensor(cos(x.primal), Tensor(-np.sin(x.primal.data) * x.tangent.data))
    out = Tensor(np.cos(x.data))
    record(out, (x,), lambda g: (g * -np.sin(x.data),))
    return out


def reshape(x, shape):
    if _is_dual(x):
        return DualTensor(reshape(x.primal, shape), Tensor(x.tangent.data.reshape(shape)))
    try:
        out = Tensor(x.data.reshape(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {shape}") from None
    in_shape = x.shape
    record(out, (x,), lambda g: (g.reshape(in_shape),))
    return out


def flatten(x, start_axis: int = 0):
    """Collapse axes from `start_axis` onward into one."""
    shape = x.shape[:start_axis] + (-1,)
    return reshape(x, shape)


def permute(x, axes):
    if _is_dual(x):
        return DualTensor(
            permute(x.primal, axes), Tensor(np.ascontiguousarray(x.tangent.data.transpose(axes)))
        )
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = np.argsort(axes)
    record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))
    return out


def transpose_last2(x):
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    if isinstance(x, DualTensor) or x.ndim >= 2:
        return permute(x, axes)
    raise ShapeError(f"transpose_last2: needs rank >= 2, got shape {x.shape}")


def _reduce(x, axes, keepdims, op_name):
    if axes is None:
        axes_t = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes_t = (axes,)
    else:
        axes_t = tuple(axes)
    for ax in axes_t:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"{op_name}: axis {ax} out of range for shape {x.shape}")
    return tuple(ax % x.ndim for ax in axes_t)


def _expand_like(g, in_shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def sum_over(x, axes=None, keepdims: bool = False):
    if _is_dual(x):
        p = sum_over(x.primal, axes, keepdims)
        axes_t = _reduce(x.primal, axes, keepdims, "sum")
        return DualTensor(p, Tensor(x.tangent.data.sum(axis=axes_t, keepdims=keepdims)))
    axes_t = _reduce(x, axes, keepdims, "sum")
    out = Tensor(x.data.sum(axis=axes_t, keepdims=keepdims))
    in_shape = x.shape
    record(out, (x,), lambda g: (np.ascontiguousarray(_expand_like(g, in_shape, axes_t, keepdims)),))
    return out


def mean_over(x, axes=None, keepdims: bool = False):
    if _is_dual(x):
        p = mean_over(x.primal, axes, keepdims)
        axes_t = _reduce(x.primal, axes, keepdims, "mean")
        return DualTensor(p, Tensor(x.tangent.data.mean(axis=axes_t, keepdims=keepdims)))
    axes_t = _reduce(x, axes, keepdims, "mean")
    out = Tensor(x.data.mean(axis=axes_t, keepdims=keepdims))
    in_shape = x.shape
    count = 1
    for ax in axes_t:
        count *= in_shape[ax]
    inv = np.float32(1.0 / count)

    def pull(g):
        return (np.ascontiguousarray(_expand_like(g, in_shape, axes_t, keepdims)) * inv,)

    record(out, (x,), pull)
    return out


def concat(xs: Sequence, axis: int = 0):
    if any(isinstance(x, DualTensor) for x in xs):
        prims, tans = [], []
        for x in xs:
            p, t = _split(x)
            prims.append(p)
            tans.append(t if t is not None else np.zeros(p.shape, dtype=np.float32))
        return DualTensor(concat(prims, axis), Tensor(np.concatenate(tans, axis=axis)))
    base = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(base) or any(
            i != axis % len(base) and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(f"concat: shape {tuple(other)} incompatible with {tuple(base)}")
    out = Tensor(np.concatenate([x.data for x in xs], axis=axis))
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    record(out, tuple(xs), pull)
    return out


def require_finite(x: Tensor, what: str):
    if not np.all(np.isfinite(x.data)):
        raise NumericalError(f"non-finite values in {what}")
    return x
