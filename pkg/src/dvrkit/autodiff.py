"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every differentiable value is a :class:`Tensor`.  Tensors created through a
:class:`Tape` carry a node id; tensors without one are constants.  Forward
values are computed eagerly when an op is recorded, and :func:`backward`
walks the tape once in reverse insertion order.

Ops that cannot be expressed with the built-in set (the surface-depth
operator, for example) are recorded with :meth:`Tape.custom` and supply
their own backward rule through :meth:`Tape.register_custom`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "constant",
    "record",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "sigmoid",
    "sum",
    "scale",
    "concat",
    "slice_",
    "add_bias",
    "log",
    "power",
    "transpose",
    "absolute",
    "mean",
]


class AutodiffError(ValueError):
    """Raised for malformed ops: shape mismatches, foreign tapes, bad rules."""


class Tensor:
    """A dense float64 array, optionally linked to a node on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def is_constant(self) -> bool:
        return self.node is None

    def __repr__(self):
        kind = "const" if self.node is None else f"node={self.node}"
        return f"Tensor(shape={self.shape}, {kind})"

    # Operator sugar; all of it routes through record().
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    shapes: tuple[tuple[int, ...], ...]
    out_shape: tuple[int, ...]
    ctx: Any = None


@dataclass
class Tape:
    """Append-only op record.  Single writer; not thread safe."""

    nodes: list[_Node] = field(default_factory=list)
    custom_rules: dict[str, Callable] = field(default_factory=dict)
    # Nodes created on tapes spawned by custom backward rules.
    child_nodes: int = 0

    def __len__(self):
        return len(self.nodes)

    @property
    def total_nodes(self) -> int:
        return len(self.nodes) + self.child_nodes

    def leaf(self, data) -> Tensor:
        """Register a differentiable input (parameter, coordinate, ...)."""
        data = np.asarray(data, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), (), data.shape))
        return Tensor(data, self, len(self.nodes) - 1)

    def register_custom(self, kind: str, rule: Callable) -> None:
        """Attach ``rule(ctx, grad_out, tape) -> list of input grads`` to ``kind``."""
        if kind in _BUILTIN or kind == "leaf":
            raise AutodiffError(f"op kind {kind!r} is built in")
        if kind in self.custom_rules:
            raise AutodiffError(f"custom op {kind!r} already registered")
        self.custom_rules[kind] = rule

    def child(self) -> "Tape":
        """Scratch tape whose node count is charged to this one."""
        return Tape(custom_rules=self.custom_rules)

    def custom(self, kind: str, inputs: Sequence[Tensor], forward, ctx=None) -> Tensor:
        """Record an op whose backward is supplied by a registered rule."""
        return _append(self, kind, inputs, np.asarray(forward, dtype=np.float64), ctx)


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise AutodiffError("inputs belong to different tapes")
    return tape


def _append(tape, kind, inputs, out, ctx) -> Tensor:
    if tape is None:
        return Tensor(out)
    tape.nodes.append(
        _Node(kind, tuple(t.node for t in inputs), tuple(t.shape for t in inputs), out.shape, ctx)
    )
    return Tensor(out, tape, len(tape.nodes) - 1)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise AutodiffError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# --- forward definitions -------------------------------------------------
# Each entry: forward(*arrays, **kw) -> (out, ctx); backward(ctx, g, shapes) -> grads


def _fw_add(a, b):
    return a + b, None


def _bw_add(ctx, g, shapes):
    return [_unbroadcast(g, shapes[0]), _unbroadcast(g, shapes[1])]


def _fw_sub(a, b):
    return a - b, None


def _bw_sub(ctx, g, shapes):
    return [_unbroadcast(g, shapes[0]), -_unbroadcast(g, shapes[1])]


def _fw_mul(a, b):
    return a * b, (a, b)


def _bw_mul(ctx, g, shapes):
    a, b = ctx
    return [_unbroadcast(g * b, shapes[0]), _unbroadcast(g * a, shapes[1])]


def _fw_matmul(a, b):
    return a @ b, (a, b)


def _bw_matmul(ctx, g, shapes):
    a, b = ctx
    return [g @ b.T, a.T @ g]


def _fw_relu(a):
    mask = a > 0
    return np.where(mask, a, 0.0), mask


def _bw_relu(mask, g, shapes):
    return [np.where(mask, g, 0.0)]


def _fw_sigmoid(a):
    out = _sigmoid(a)
    return out, out


def _bw_sigmoid(out, g, shapes):
    return [g * out * (1.0 - out)]


def _fw_sum(a, axis=None):
    return np.sum(a, axis=axis), axis


def _bw_sum(axis, g, shapes):
    (shape,) = shapes
    if axis is None:
        return [np.broadcast_to(g, shape).copy()]
    return [np.broadcast_to(np.expand_dims(g, axis), shape).copy()]


def _fw_scale(a, factor=1.0):
    return a * factor, factor


def _bw_scale(factor, g, shapes):
    return [g * factor]


def _fw_concat(*arrays, axis=-1):
    return np.concatenate(arrays, axis=axis), (axis, [x.shape[axis] for x in arrays])


def _bw_concat(ctx, g, shapes):
    axis, sizes = ctx
    return np.split(g, np.cumsum(sizes)[:-1], axis=axis)


def _fw_slice(a, index=None):
    return a[index], index


def _bw_slice(index, g, shapes):
    out = np.zeros(shapes[0])
    np.add.at(out, index, g)
    return [out]


def _fw_add_bias(x, b):
    return x + b, None


def _bw_add_bias(ctx, g, shapes):
    return [g, g.sum(axis=tuple(range(g.ndim - 1)))]


def _fw_log(a, clamp=0.0):
    lo = clamp
    hi = 1.0 - clamp if clamp > 0 else np.inf
    inside = (a >= lo) & (a <= hi) if clamp > 0 else np.ones(a.shape, bool)
    c = np.clip(a, lo, hi) if clamp > 0 else a
    return np.log(c), (c, inside)


def _bw_log(ctx, g, shapes):
    c, inside = ctx
    return [np.where(inside, g / c, 0.0)]


def _fw_power(a, exponent=1.0):
    out = a**exponent
    return out, (a, exponent)


def _bw_power(ctx, g, shapes):
    # Where the derivative blows up (a = 0 with p < 1) use 0, the same
    # convention as relu at its kink.
    a, p = ctx
    with np.errstate(divide="ignore", invalid="ignore"):
        d = p * a ** (p - 1.0)
    return [g * np.where(np.isfinite(d), d, 0.0)]


def _fw_transpose(a):
    return a.T, None


def _bw_transpose(ctx, g, shapes):
    return [g.T]


_BUILTIN = {
    "add": (_fw_add, _bw_add),
    "sub": (_fw_sub, _bw_sub),
    "mul": (_fw_mul, _bw_mul),
    "matmul": (_fw_matmul, _bw_matmul),
    "relu": (_fw_relu, _bw_relu),
    "sigmoid": (_fw_sigmoid, _bw_sigmoid),
    "sum": (_fw_sum, _bw_sum),
    "scale": (_fw_scale, _bw_scale),
    "concat": (_fw_concat, _bw_concat),
    "slice": (_fw_slice, _bw_slice),
    "add_bias": (_fw_add_bias, _bw_add_bias),
    "log": (_fw_log, _bw_log),
    "power": (_fw_power, _bw_power),
    "transpose": (_fw_transpose, _bw_transpose),
}


def _sigmoid(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _check_shapes(kind, inputs, kw):
    if kind in ("add", "sub", "mul"):
        _broadcast_shape(kind, *inputs)
    elif kind == "matmul":
        a, b = inputs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    elif kind == "add_bias":
        x, b = inputs
        if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
            raise AutodiffError(f"add_bias: incompatible shapes {x.shape} and {b.shape}")
    elif kind == "concat":
        axis = kw.get("axis", -1)
        ref = list(inputs[0].shape)
        for x in inputs[1:]:
            other = list(x.shape)
            if len(other) != len(ref):
                raise AutodiffError(f"concat: rank mismatch {[t.shape for t in inputs]}")
            ref_ax = axis % len(ref)
            if other[:ref_ax] + other[ref_ax + 1 :] != ref[:ref_ax] + ref[ref_ax + 1 :]:
                raise AutodiffError(f"concat: incompatible shapes {[t.shape for t in inputs]}")
    elif kind == "transpose":
        if inputs[0].ndim != 2:
            raise AutodiffError(f"transpose: expected a matrix, got shape {inputs[0].shape}")


def record(kind: str, *inputs: Tensor, **kw) -> Tensor:
    """Evaluate a built-in op eagerly and append it to the inputs' tape."""
    if kind not in _BUILTIN:
        raise AutodiffError(f"unknown op {kind!r}; custom ops go through Tape.custom")
    inputs = tuple(_as_tensor(t) for t in inputs)
    tape = _tape_of(inputs)
    arrays = [t.data for t in inputs]
    _check_shapes(kind, arrays, kw)
    forward = _BUILTIN[kind][0]
    out, ctx = forward(*arrays, **kw)
    out = np.asarray(out, dtype=np.float64)
    return _append(tape, kind, inputs, out, ctx)


def backward(output: Tensor, seed: float | np.ndarray = 1.0) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``output``.

    Returns a map from every leaf node id on the tape to its gradient; leaves
    not reachable from ``output`` get zeros.
    """
    if output.tape is None:
        raise AutodiffError("backward: output is a constant, not on a tape")
    if output.data.size != 1:
        raise AutodiffError(f"backward: output must be scalar, got shape {output.shape}")
    tape = output.tape
    grads: dict[int, np.ndarray] = {
        output.node: np.broadcast_to(np.asarray(seed, dtype=np.float64), output.shape).copy()
    }
    leaves: dict[int, np.ndarray] = {}
    for i in range(output.node, -1, -1):
        node = tape.nodes[i]
        if node.kind == "leaf":
            g = grads.pop(i, None)
            leaves[i] = g if g is not None else np.zeros(node.out_shape)
            continue
        g = grads.pop(i, None)
        if g is None:
            continue
        if node.kind in _BUILTIN:
            in_grads = _BUILTIN[node.kind][1](node.ctx, g, node.shapes)
        else:
            rule = tape.custom_rules.get(node.kind)
            if rule is None:
                raise AutodiffError(f"backward: no rule registered for custom op {node.kind!r}")
            in_grads = list(rule(node.ctx, g, tape))
            if len(in_grads) != len(node.inputs):
                raise AutodiffError(
                    f"custom op {node.kind!r}: rule returned {len(in_grads)} grads "
                    f"for {len(node.inputs)} inputs"
                )
            for gi, shape in zip(in_grads, node.shapes):
                if gi is not None and np.shape(gi) != shape:
                    raise AutodiffError(
                        f"custom op {node.kind!r}: gradient shape {np.shape(gi)} "
                        f"does not match input shape {shape}"
                    )
        for src, gi in zip(node.inputs, in_grads):
            if src is None or gi is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = np.asarray(gi, dtype=np.float64)
    for i in range(output.node + 1, len(tape.nodes)):
        if tape.nodes[i].kind == "leaf":
            leaves[i] = np.zeros(tape.nodes[i].out_shape)
    return leaves


# --- op helpers ----------------------------------------------------------


def add(a, b):
    return record("add", a, b)


def sub(a, b):
    return record("sub", a, b)


def mul(a, b):
    return record("mul", a, b)


def matmul(a, b):
    return record("matmul", a, b)


def relu(a):
    return record("relu", a)


def sigmoid(a):
    return record("sigmoid", a)


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    return record("sum", a, axis=axis)


def scale(a, factor: float):
    return record("scale", a, factor=float(factor))


def concat(tensors, axis=-1):
    return record("concat", *tensors, axis=axis)


def slice_(a, index):
    return record("slice", a, index=index)


def add_bias(x, b):
    return record("add_bias", x, b)


def log(a, clamp: float = 0.0):
    """Natural log; with ``clamp`` > 0 the input is clipped to [clamp, 1-clamp]
    and the gradient is zero where clipping was active."""
    return record("log", a, clamp=float(clamp))


def power(a, exponent: float):
    return record("power", a, exponent=float(exponent))


def transpose(a):
    return record("transpose", a)


def absolute(a):
    # |x| = relu(x) + relu(-x); subgradient 0 at x = 0.
    return add(relu(a), relu(scale(a, -1.0)))


def mean(a):
    return scale(sum(a), 1.0 / max(a.data.size, 1))
