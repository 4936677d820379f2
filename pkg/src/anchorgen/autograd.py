"""Dense float64 tensors with recorded reverse-mode differentiation.

The engine is define-by-run: opening a :class:`Tape` makes it the active
recorder for the current thread, every primitive applied to a tensor that
requires gradients appends one record, and :func:`backward` replays the
records in reverse. Tapes are rebuilt per forward pass and are confined to
one thread; parameter tensors may be shared read-only across threads.

Primitives are registered in ``OP_REGISTRY`` and invoked either through
:func:`apply` or the thin module-level wrappers (``matmul``, ``softmax``,
...). Hot inner loops delegate to :mod:`anchorgen.kernels`.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import (
    ContractViolation,
    NondeterministicFunctionError,
    ShapeMismatchError,
    UnknownOperationError,
)

LOG_CLAMP = 1e-12

_uid_counter = itertools.count(1)
_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def current_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array, optionally tracked on the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_uid_counter)
        self.tape: Optional[Tape] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=np.float64))


@dataclass
class TapeRecord:
    op_kind: str
    inputs: tuple
    output: Tensor
    ctx: tuple
    attrs: dict


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._records: list[TapeRecord] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def _record(self, op_kind, inputs, output, ctx, attrs):
        self._records.append(TapeRecord(op_kind, tuple(inputs), output, ctx, attrs))
        output.tape = self

    def gradients(self, loss: Tensor, wrt: Optional[Sequence[Tensor]] = None):
        """Replay the tape backward from a scalar loss.

        Returns a map ``node_id -> gradient array`` covering every recorded
        node reachable from ``loss``. Tensors listed in ``wrt`` that were not
        reached receive explicit zeros. Gradients accumulate additively
        across fan-out; each record is visited exactly once.
        """
        if loss.shape != ():
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        # A first contribution may alias an upstream gradient array; entries
        # are only mutated in place once they are owned (freshly allocated
        # by the accumulation below), so aliased arrays stay untouched.
        owned: set[int] = set()
        for rec in reversed(self._records):
            g_out = grads.get(rec.output.node_id)
            if g_out is None:
                continue
            op = OP_REGISTRY[rec.op_kind]
            in_grads = op.backward(rec.ctx, g_out, rec.attrs)
            for tensor, gi in zip(rec.inputs, in_grads):
                if gi is None or not tensor.requires_grad:
                    continue
                nid = tensor.node_id
                acc = grads.get(nid)
                if acc is None:
                    grads[nid] = gi
                elif nid in owned:
                    acc += gi
                else:
                    grads[nid] = acc + gi
                    owned.add(nid)
        for rec in self._records:
            g = grads.get(rec.output.node_id)
            if g is not None:
                rec.output.grad = g
            for tensor in rec.inputs:
                if tensor.requires_grad:
                    g = grads.get(tensor.node_id)
                    if g is not None:
                        tensor.grad = g
        if wrt is not None:
            for tensor in wrt:
                if tensor.node_id not in grads:
                    grads[tensor.node_id] = np.zeros(tensor.shape, dtype=np.float64)
                tensor.grad = grads[tensor.node_id]
        return grads


def backward(loss: Tensor, wrt: Optional[Sequence[Tensor]] = None):
    """Backpropagate from ``loss`` over the tape that recorded it."""
    if loss.tape is None:
        raise ContractViolation("loss was not recorded on any tape")
    return loss.tape.gradients(loss, wrt=wrt)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpDef:
    forward: Callable
    backward: Callable


OP_REGISTRY: dict[str, OpDef] = {}


def _register(name):
    def deco(pair):
        fwd, bwd = pair()
        OP_REGISTRY[name] = OpDef(fwd, bwd)
        return pair

    return deco


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


@_register("matmul")
def _op_matmul():
    def fwd(inputs, attrs):
        a, b = inputs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeMismatchError("matmul", a.shape, b.shape)
        return a @ b, (a, b)

    def bwd(ctx, g, attrs):
        a, b = ctx
        return g @ b.T, a.T @ g

    return fwd, bwd


@_register("add")
def _op_add():
    def fwd(inputs, attrs):
        a, b = inputs
        _check_broadcast("add", a, b)
        return a + b, (a.shape, b.shape)

    def bwd(ctx, g, attrs):
        sa, sb = ctx
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return fwd, bwd


@_register("subtract")
def _op_subtract():
    def fwd(inputs, attrs):
        a, b = inputs
        _check_broadcast("subtract", a, b)
        return a - b, (a.shape, b.shape)

    def bwd(ctx, g, attrs):
        sa, sb = ctx
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return fwd, bwd


@_register("multiply")
def _op_multiply():
    def fwd(inputs, attrs):
        a, b = inputs
        _check_broadcast("multiply", a, b)
        return a * b, (a, b)

    def bwd(ctx, g, attrs):
        a, b = ctx
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@_register("scale")
def _op_scale():
    def fwd(inputs, attrs):
        (a,) = inputs
        c = float(attrs["c"])
        return c * a, (c,)

    def bwd(ctx, g, attrs):
        (c,) = ctx
        return (c * g,)

    return fwd, bwd


@_register("softmax")
def _op_softmax():
    # Row softmax over the last axis with row-max subtraction. 1-D input is
    # treated as a single row.
    def fwd(inputs, attrs):
        (x,) = inputs
        if x.ndim == 1:
            y = kernels.softmax_rows(x[None, :])[0]
        elif x.ndim == 2:
            y = kernels.softmax_rows(x)
        else:
            raise ShapeMismatchError("softmax", x.shape)
        return y, (y,)

    def bwd(ctx, g, attrs):
        (y,) = ctx
        if y.ndim == 1:
            return (kernels.softmax_rows_grad(y[None, :], g[None, :])[0],)
        return (kernels.softmax_rows_grad(y, g),)

    return fwd, bwd


@_register("log")
def _op_log():
    # Inputs are clamped to >= LOG_CLAMP before the log; in the clamped
    # region the output is flat so the gradient there is zero.
    def fwd(inputs, attrs):
        (x,) = inputs
        xc = np.maximum(x, LOG_CLAMP)
        return np.log(xc), (x, xc)

    def bwd(ctx, g, attrs):
        x, xc = ctx
        return (np.where(x >= LOG_CLAMP, g / xc, 0.0),)

    return fwd, bwd


@_register("exp")
def _op_exp():
    def fwd(inputs, attrs):
        (x,) = inputs
        y = np.exp(x)
        return y, (y,)

    def bwd(ctx, g, attrs):
        (y,) = ctx
        return (g * y,)

    return fwd, bwd


@_register("relu")
def _op_relu():
    def fwd(inputs, attrs):
        (x,) = inputs
        mask = x > 0.0
        return np.where(mask, x, 0.0), (mask,)

    def bwd(ctx, g, attrs):
        (mask,) = ctx
        return (np.where(mask, g, 0.0),)

    return fwd, bwd


@_register("sigmoid")
def _op_sigmoid():
    def fwd(inputs, attrs):
        (x,) = inputs
        y = 1.0 / (1.0 + np.exp(-x))
        return y, (y,)

    def bwd(ctx, g, attrs):
        (y,) = ctx
        return (g * y * (1.0 - y),)

    return fwd, bwd


@_register("tanh")
def _op_tanh():
    def fwd(inputs, attrs):
        (x,) = inputs
        y = np.tanh(x)
        return y, (y,)

    def bwd(ctx, g, attrs):
        (y,) = ctx
        return (g * (1.0 - y * y),)

    return fwd, bwd


@_register("gather_rows")
def _op_gather_rows():
    # Embedding lookup: out[i] = x[idx[i]]. Backward scatter-adds into a
    # zero table, so repeated indices accumulate.
    def fwd(inputs, attrs):
        (x,) = inputs
        idx = np.asarray(attrs["indices"], dtype=np.int64)
        if idx.ndim != 1:
            raise ContractViolation("gather_rows indices must be 1-D")
        if x.ndim < 1:
            raise ShapeMismatchError("gather_rows", x.shape)
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ContractViolation(
                f"gather_rows index out of range for table with {x.shape[0]} rows"
            )
        return x[idx], (x.shape, idx)

    def bwd(ctx, g, attrs):
        shape, idx = ctx
        gx = np.zeros(shape, dtype=np.float64)
        if gx.ndim == 2:
            kernels.scatter_add_rows(gx, idx, np.ascontiguousarray(g))
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return fwd, bwd


@_register("concat")
def _op_concat():
    def fwd(inputs, attrs):
        axis = int(attrs["axis"])
        ndim = inputs[0].ndim
        if axis < 0 or axis >= ndim:
            raise ContractViolation(f"concat axis {axis} out of range for rank {ndim}")
        for x in inputs[1:]:
            if x.ndim != ndim:
                raise ShapeMismatchError("concat", inputs[0].shape, x.shape)
            for d in range(ndim):
                if d != axis and x.shape[d] != inputs[0].shape[d]:
                    raise ShapeMismatchError("concat", inputs[0].shape, x.shape)
        sizes = [x.shape[axis] for x in inputs]
        return np.concatenate(inputs, axis=axis), (axis, sizes)

    def bwd(ctx, g, attrs):
        axis, sizes = ctx
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return fwd, bwd


@_register("add_mask")
def _op_add_mask():
    # Adds a constant additive mask (e.g. -1e9 on disallowed attention
    # positions). The mask never receives gradient.
    def fwd(inputs, attrs):
        (x,) = inputs
        mask = np.asarray(attrs["mask"], dtype=np.float64)
        _check_broadcast("add_mask", x, mask)
        if np.broadcast_shapes(x.shape, mask.shape) != x.shape:
            raise ShapeMismatchError("add_mask", x.shape, mask.shape)
        return x + mask, ()

    def bwd(ctx, g, attrs):
        return (g,)

    return fwd, bwd


@_register("layer_norm")
def _op_layer_norm():
    def fwd(inputs, attrs):
        x, gain, bias = inputs
        eps = float(attrs.get("eps", 1e-5))
        if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
            raise ShapeMismatchError("layer_norm", x.shape, gain.shape, bias.shape)
        y, xhat, inv_std = kernels.layernorm_rows(x, gain, bias, eps)
        return y, (xhat, inv_std, gain)

    def bwd(ctx, g, attrs):
        xhat, inv_std, gain = ctx
        return kernels.layernorm_rows_grad(xhat, inv_std, gain, np.ascontiguousarray(g))

    return fwd, bwd


@_register("mean")
def _op_mean():
    def fwd(inputs, attrs):
        (x,) = inputs
        return np.asarray(x.mean(), dtype=np.float64), (x.shape, x.size)

    def bwd(ctx, g, attrs):
        shape, size = ctx
        return (np.full(shape, float(g) / size, dtype=np.float64),)

    return fwd, bwd


@_register("sum")
def _op_sum():
    def fwd(inputs, attrs):
        (x,) = inputs
        return np.asarray(x.sum(), dtype=np.float64), (x.shape,)

    def bwd(ctx, g, attrs):
        (shape,) = ctx
        return (np.full(shape, float(g), dtype=np.float64),)

    return fwd, bwd


@_register("transpose")
def _op_transpose():
    def fwd(inputs, attrs):
        (x,) = inputs
        if x.ndim != 2:
            raise ShapeMismatchError("transpose", x.shape)
        return x.T.copy(), ()

    def bwd(ctx, g, attrs):
        return (g.T,)

    return fwd, bwd


def apply(op_kind: str, inputs: Sequence[Tensor], attrs: Optional[dict] = None) -> Tensor:
    """Apply a registered primitive, recording it on the active tape.

    The op is recorded only when a tape is open and at least one input
    requires gradients; otherwise this is a pure evaluation.
    """
    op = OP_REGISTRY.get(op_kind)
    if op is None:
        raise UnknownOperationError(
            f"unknown op kind '{op_kind}'; known: {sorted(OP_REGISTRY)}"
        )
    inputs = [_as_tensor(x) for x in inputs]
    attrs = attrs or {}
    out_data, ctx = op.forward([t.data for t in inputs], attrs)
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._record(op_kind, inputs, out, ctx, attrs)
    return out


# Thin wrappers; `apply` remains the generic entry point.


def matmul(a, b):
    return apply("matmul", [a, b])


def add(a, b):
    return apply("add", [a, b])


def subtract(a, b):
    return apply("subtract", [a, b])


def multiply(a, b):
    return apply("multiply", [a, b])


def scale(a, c: float):
    return apply("scale", [a], {"c": c})


def softmax(x):
    return apply("softmax", [x])


def log(x):
    return apply("log", [x])


def exp(x):
    return apply("exp", [x])


def relu(x):
    return apply("relu", [x])


def sigmoid(x):
    return apply("sigmoid", [x])


def tanh(x):
    return apply("tanh", [x])


def gather_rows(x, indices):
    return apply("gather_rows", [x], {"indices": np.asarray(indices, dtype=np.int64)})


def concat(tensors, axis: int):
    return apply("concat", list(tensors), {"axis": axis})


def add_mask(x, mask):
    return apply("add_mask", [x], {"mask": np.asarray(mask, dtype=np.float64)})


def layer_norm(x, gain, bias, eps: float = 1e-5):
    return apply("layer_norm", [x, gain, bias], {"eps": eps})


def mean_all(x):
    return apply("mean", [x])


def sum_all(x):
    return apply("sum", [x])


def transpose(x):
    return apply("transpose", [x])


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Compare analytic gradients of ``f`` at ``x`` with central differences.

    ``f`` must be a deterministic tensor-to-scalar function; this is probed
    by evaluating it twice and requiring bit-identical results. Returns the
    max over elements of |analytic - numeric| / max(|analytic|, |numeric|,
    1e-8).
    """
    if step <= 0:
        raise ContractViolation("grad_check step must be positive")

    def eval_scalar() -> float:
        out = f(x)
        if not isinstance(out, Tensor) or out.shape != ():
            raise ContractViolation("grad_check requires a scalar-tensor function")
        return out.item()

    probe_a = eval_scalar()
    probe_b = eval_scalar()
    if probe_a != probe_b:
        raise NondeterministicFunctionError(
            f"f(x) returned {probe_a!r} then {probe_b!r} on identical input"
        )

    saved_flag = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            out = f(x)
        grads = tape.gradients(out)
        analytic = grads.get(x.node_id)
        if analytic is None:
            analytic = np.zeros(x.shape, dtype=np.float64)
        analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)

        flat = x.data.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = eval_scalar()
            flat[i] = orig - step
            f_minus = eval_scalar()
            flat[i] = orig
            numeric[i] = (f_plus - f_minus) / (2.0 * step)
    finally:
        x.requires_grad = saved_flag

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
