"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`GradTape` is active are appended to it
whenever one of their inputs is a requires-grad leaf or an output of an
earlier recorded op. ``tape.backward(loss)`` replays the records in reverse.

Backward rules live in :data:`BACKWARD_RULES`, keyed by op name, so a single
rule can be audited (or deliberately broken in a test) in isolation.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DetachedTensor, InvalidAxis, NotScalar, ShapeMismatch

__all__ = [
    "Tensor",
    "GradTape",
    "no_grad",
    "backward",
    "elementwise_unary",
    "elementwise_binary",
    "relu",
    "sigmoid",
    "tanh",
    "absolute",
    "neg",
    "add",
    "sub",
    "mul",
    "matmul",
    "einsum",
    "graph_mix",
    "node_matmul",
    "softmax_rows",
    "concat",
    "reduce",
    "reshape",
    "take",
    "finite_diff_check",
    "numerical_gradient",
    "BACKWARD_RULES",
]

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array plus its position on a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "_gen", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: GradTape | None = None
        self._gen = -1
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node_id = None
        t._tape = None
        t._gen = -1
        t.name = None
        return t

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
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


class _Record:
    __slots__ = ("name", "in_ids", "out_id", "saved")

    def __init__(self, name, in_ids, out_id, saved):
        self.name = name
        self.in_ids = in_ids
        self.out_id = out_id
        self.saved = saved


class GradTape:
    """Ordered log of differentiable operations for one forward pass.

    Use as a context manager; the tape is consumed by :meth:`backward`.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_id = 0
        self._gen = 0

    def __enter__(self) -> GradTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _on_tape(self, t: Tensor) -> bool:
        return t._tape is self and t._gen == self._gen

    def _id_for(self, t: Tensor) -> int | None:
        if self._on_tape(t):
            return t.node_id
        if t.requires_grad:
            nid = self._next_id
            self._next_id += 1
            t.node_id, t._tape, t._gen = nid, self, self._gen
            self._leaves[nid] = t
            return nid
        return None

    def record(self, name: str, inputs: Sequence[Tensor], out: Tensor, saved: tuple) -> None:
        in_ids = tuple(self._id_for(t) for t in inputs)
        out.node_id, out._tape, out._gen = self._next_id, self, self._gen
        self._next_id += 1
        self.records.append(_Record(name, in_ids, out.node_id, saved))

    def reset(self) -> None:
        self.records = []
        self._leaves = {}
        self._next_id = 0
        self._gen += 1

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Propagate d(loss)/d(leaf) for every requires-grad leaf on the tape.

        Each leaf's ``.grad`` is set (zeros if the loss does not depend on
        it); the returned dict maps leaf node ids to gradient tensors.
        """
        if loss.ndim != 0:
            raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._on_tape(loss):
            raise DetachedTensor("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out_id, None)
            if g is None:
                continue
            in_grads = BACKWARD_RULES[rec.name](g, *rec.saved)
            for nid, ig in zip(rec.in_ids, in_grads):
                if nid is None or ig is None:
                    continue
                prev = grads.get(nid)
                grads[nid] = ig if prev is None else prev + ig
        out = {}
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            out[nid] = Tensor._wrap(g)
        self.reset()
        return out


class no_grad:
    """Context in which no op is recorded, even inside an outer tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def backward(loss: Tensor) -> dict[int, Tensor]:
    if loss.ndim != 0:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise DetachedTensor("loss is not on any gradient tape")
    return loss._tape.backward(loss)


def _emit(name: str, inputs: Sequence[Tensor], out_data: np.ndarray, saved: tuple) -> Tensor:
    out = Tensor._wrap(out_data)
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad or tape._on_tape(t):
                tape.record(name, inputs, out, saved)
                break
    return out


# -- unary ------------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), (mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return _emit("sigmoid", (x,), y, (y,))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, (y,))


def absolute(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _emit("abs", (x,), np.abs(x.data), (np.sign(x.data),))


def neg(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    return _emit("neg", (x,), -x.data, ())


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "abs": absolute, "neg": neg}


def elementwise_unary(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown unary op {kind!r}") from None
    return fn(x)


# -- binary -----------------------------------------------------------------


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b:
        return
    small, big = (b, a) if len(b) <= len(a) else (a, b)
    if len(small) == 0 or big[len(big) - len(small):] == small:
        return
    raise ShapeMismatch(f"cannot broadcast {a} with {b} (only scalar or trailing-axis broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _emit("add", (a, b), a.data + b.data, (a.shape, b.shape))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _emit("sub", (a, b), a.data - b.data, (a.shape, b.shape))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _emit("mul", (a, b), a.data * b.data, (a.data, b.data))


_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise_binary(a, b, kind: str) -> Tensor:
    try:
        fn = _BINARY[kind]
    except KeyError:
        raise ValueError(f"unknown binary op {kind!r}") from None
    return fn(a, b)


# -- contractions -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of rank >= 2 (leading axes are batch) and rank-2 ``b``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank>=2 @ rank-2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), a.data @ b.data, (a.data, b.data))


def _parse_einsum(spec: str) -> tuple[str, str, str]:
    try:
        lhs, out = spec.replace(" ", "").split("->")
        sa, sb = lhs.split(",")
    except ValueError:
        raise ValueError(f"einsum spec must look like 'ab,bc->ac', got {spec!r}") from None
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ValueError(f"repeated index within one operand in {spec!r}")
    for s, other in ((sa, sb), (sb, sa)):
        for c in s:
            if c not in other and c not in out:
                raise ValueError(f"index {c!r} is summed out of a single operand in {spec!r}")
    for c in out:
        if c not in sa and c not in sb:
            raise ValueError(f"output index {c!r} absent from inputs in {spec!r}")
    return sa, sb, out


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand Einstein summation, e.g. ``einsum("nm,bmc->bnc", A, X)``.

    Every index of each operand must appear in the other operand or in the
    output, which keeps the backward rule a pair of einsums.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb, so = _parse_einsum(spec)
    if a.ndim != len(sa) or b.ndim != len(sb):
        raise ShapeMismatch(f"einsum {spec!r} got ranks {a.ndim}, {b.ndim}")
    sizes: dict[str, int] = {}
    for s, shape in ((sa, a.shape), (sb, b.shape)):
        for c, n in zip(s, shape):
            if sizes.setdefault(c, n) != n:
                raise ShapeMismatch(f"index {c!r} has sizes {sizes[c]} and {n} in {spec!r}")
    out = np.einsum(f"{sa},{sb}->{so}", a.data, b.data)
    return _emit("einsum", (a, b), out, (sa, sb, so, a.data, b.data))


def graph_mix(A, X) -> Tensor:
    """``A @ X[b]`` for every batch item: A is N x N, X is B x N x C."""
    A, X = _as_tensor(A), _as_tensor(X)
    if A.ndim != 2 or X.ndim != 3 or A.shape[1] != X.shape[1]:
        raise ShapeMismatch(f"graph_mix needs N x N and B x N x C, got {A.shape}, {X.shape}")
    return _emit("graph_mix", (A, X), np.matmul(A.data, X.data), (A.data, X.data))


def node_matmul(X, Wn) -> Tensor:
    """Per-node matrix product: X is B x N x I, Wn is N x I x O, result B x N x O."""
    X, Wn = _as_tensor(X), _as_tensor(Wn)
    if X.ndim != 3 or Wn.ndim != 3 or X.shape[1:] != Wn.shape[:2]:
        raise ShapeMismatch(f"node_matmul needs B x N x I and N x I x O, got {X.shape}, {Wn.shape}")
    xt = X.data.transpose(1, 0, 2)
    out = np.matmul(xt, Wn.data).transpose(1, 0, 2)
    return _emit("node_matmul", (X, Wn), out, (xt, Wn.data))


# -- structural ------------------------------------------------------------------


def softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeMismatch(f"softmax_rows needs a rank-2 tensor, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)
    return _emit("softmax_rows", (x,), y, (y,))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of an empty list")
    ref = tensors[0].shape
    if not -len(ref) <= axis < len(ref):
        raise InvalidAxis(f"axis {axis} out of range for shape {ref}")
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeMismatch(f"concat shapes disagree off axis {axis}: {ref} vs {t.shape}")
    extents = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _emit("concat", tensors, out, (ax, extents))


def reduce(x, kind: str = "sum", axes: int | Iterable[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes_t = tuple(range(x.ndim))
    else:
        axes_t = (axes,) if isinstance(axes, int) else tuple(axes)
        for ax in axes_t:
            if not -x.ndim <= ax < x.ndim:
                raise InvalidAxis(f"axis {ax} out of range for shape {x.shape}")
        axes_t = tuple(sorted({ax % x.ndim for ax in axes_t}))
    if kind == "sum":
        out = x.data.sum(axis=axes_t)
        scale = 1.0
    elif kind == "mean":
        count = int(np.prod([x.shape[a] for a in axes_t])) if axes_t else 1
        out = x.data.sum(axis=axes_t) / count
        scale = 1.0 / count
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _emit("reduce", (x,), np.asarray(out), (x.shape, axes_t, scale))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    return _emit("reshape", (x,), x.data.reshape(shape), (x.shape,))


def take(x, index) -> Tensor:
    """Basic (int/slice) indexing; the gradient scatters back into zeros."""
    x = _as_tensor(x)
    return _emit("take", (x,), x.data[index], (x.shape, index))


# -- backward rules -----------------------------------------------------------


def _bw_relu(g, mask):
    return (g * mask,)


def _bw_sigmoid(g, y):
    return (g * y * (1.0 - y),)


def _bw_tanh(g, y):
    return (g * (1.0 - y * y),)


def _bw_abs(g, sign):
    return (g * sign,)


def _bw_neg(g):
    return (-g,)


def _bw_add(g, sa, sb):
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def _bw_sub(g, sa, sb):
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def _bw_mul(g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _bw_matmul(g, a, b):
    ga = g @ b.T
    gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return ga, gb


def _bw_einsum(g, sa, sb, so, a, b):
    return np.einsum(f"{so},{sb}->{sa}", g, b), np.einsum(f"{so},{sa}->{sb}", g, a)


def _bw_graph_mix(g, A, X):
    B, N, C = X.shape
    gA = g.transpose(1, 0, 2).reshape(N, B * C) @ X.transpose(1, 0, 2).reshape(N, B * C).T
    return gA, np.matmul(A.T, g)


def _bw_node_matmul(g, xt, Wn):
    gt = g.transpose(1, 0, 2)
    gX = np.matmul(gt, Wn.transpose(0, 2, 1)).transpose(1, 0, 2)
    gW = np.matmul(xt.transpose(0, 2, 1), gt)
    return gX, gW


def _bw_softmax_rows(g, y):
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _bw_concat(g, axis, extents):
    cuts = np.cumsum(extents)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _bw_reduce(g, shape, axes, scale):
    keep = list(shape)
    for ax in axes:
        keep[ax] = 1
    return (np.broadcast_to(g.reshape(keep) * scale, shape).copy(),)


def _bw_reshape(g, shape):
    return (g.reshape(shape),)


def _bw_take(g, shape, index):
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out, index, g)
    return (out,)


BACKWARD_RULES: dict[str, Callable[..., tuple]] = {
    "relu": _bw_relu,
    "sigmoid": _bw_sigmoid,
    "tanh": _bw_tanh,
    "abs": _bw_abs,
    "neg": _bw_neg,
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "matmul": _bw_matmul,
    "einsum": _bw_einsum,
    "graph_mix": _bw_graph_mix,
    "node_matmul": _bw_node_matmul,
    "softmax_rows": _bw_softmax_rows,
    "concat": _bw_concat,
    "reduce": _bw_reduce,
    "reshape": _bw_reshape,
    "take": _bw_take,
}


# -- finite differences ---------------------------------------------------------


# Extended precision (80-bit on x86) for the perturbed coordinate: ops keep
# the widest input dtype, so everything downstream of x is evaluated with
# ~2000x less roundoff and tiny gradient entries stay resolvable at eps=1e-6.
ORACLE_DTYPE = np.longdouble


def _scalar(v):
    return np.asarray(v.data if isinstance(v, Tensor) else v, dtype=ORACLE_DTYPE)[()]


def numerical_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``; no tape is used."""
    base = np.array(x.data, dtype=ORACLE_DTYPE)
    grad = np.empty(base.shape, dtype=np.float64)
    with no_grad():
        for i in range(base.size):
            xp = base.copy()
            xp.flat[i] += eps
            xm = base.copy()
            xm.flat[i] -= eps
            diff = _scalar(f(Tensor._wrap(xp))) - _scalar(f(Tensor._wrap(xm)))
            grad.flat[i] = diff / (xp.flat[i] - xm.flat[i])
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    leaf = Tensor(x.data, requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
    tape.backward(y)
    return leaf.grad


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1e-12, |analytic| + |numeric|)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ana = analytic_gradient(f, x)
    num = numerical_gradient(f, x, eps)
    rel = np.abs(ana - num) / np.maximum(1e-12, np.abs(ana) + np.abs(num))
    return float(rel.max()) if rel.size else 0.0
