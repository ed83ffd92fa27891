"""Small dense tensor library with reverse-mode autodiff.

Values are float64 numpy arrays. Operations are recorded on the active
:class:`Tape` whenever one of their inputs is tracked on it. Gradients can be
taken with ``create_graph=True``, in which case the backward pass is itself
recorded and can be differentiated again (needed for exact MAML).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ContractError",
    "GenerationError",
    "NonFiniteError",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "transpose",
    "sum_to",
    "broadcast_to",
    "total",
    "relu",
    "tanh",
    "exp",
    "log_softmax",
    "softmax",
    "softmax_cross_entropy",
    "mse",
    "backward",
    "grad",
]


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class GenerationError(RuntimeError):
    """Raised when a tensor from an invalidated tape generation is used."""


class NonFiniteError(FloatingPointError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _recording_disabled() -> bool:
    return getattr(_state, "no_record", 0) > 0


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Immutable array value, optionally tracked on a tape.

    ``node`` is the index of the tensor's node on ``tape``; ``gen`` the tape
    generation it was recorded in.
    """

    __slots__ = ("data", "tape", "node", "gen")
    __array_priority__ = 100

    def __init__(self, data, tape: Optional["Tape"] = None, node: int = -1, gen: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.gen = gen

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class _Node:
    __slots__ = ("parents", "vjp")

    def __init__(self, parents: tuple, vjp: Optional[Callable]):
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations on tensors tracked by the active
    tape are appended in execution order, so parents always precede children.
    A non-retaining backward pass clears the record and bumps ``generation``;
    tensors from older generations then raise :class:`GenerationError`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self.generation = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def watch(self, t) -> Tensor:
        """Return a tracked leaf holding the same values as ``t``."""
        t = tensor(t)
        self.nodes.append(_Node((), None))
        leaf = Tensor(t.data, self, len(self.nodes) - 1, self.generation)
        self.leaves.append(leaf)
        return leaf

    def _record(self, data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
        self.nodes.append(_Node(parents, vjp))
        return Tensor(data, self, len(self.nodes) - 1, self.generation)

    def invalidate(self) -> None:
        self.nodes = []
        self.leaves = []
        self.generation += 1

    def grad(
        self,
        loss: Tensor,
        wrt: Sequence[Tensor],
        create_graph: bool = False,
        retain_graph: Optional[bool] = None,
    ) -> list[Tensor]:
        if retain_graph is None:
            retain_graph = create_graph
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        if loss.gen != self.generation:
            raise GenerationError("loss belongs to an invalidated tape generation")
        for w in wrt:
            if w.tape is not None and w.gen != self.generation:
                raise GenerationError("gradient target from an invalidated generation")

        if create_graph and active_tape() is not self:
            raise ContractError("create_graph requires this tape to be active")

        wanted = {w.node for w in wrt if w.tape is self}
        stop = min(wanted, default=loss.node + 1)
        grads: dict[int, Tensor] = {loss.node: Tensor(np.ones_like(loss.data))}
        if not create_graph:
            _state.no_record = getattr(_state, "no_record", 0) + 1
        try:
            # nodes below the earliest target cannot contribute to any target
            for idx in range(loss.node, stop, -1):
                g = grads.get(idx)
                if g is None:
                    continue
                node = self.nodes[idx]
                if node.vjp is None:
                    continue
                if idx not in wanted:
                    del grads[idx]
                parent_grads = node.vjp(g)
                for p, pg in zip(node.parents, parent_grads):
                    if pg is None or p.tape is not self:
                        continue
                    prev = grads.get(p.node)
                    grads[p.node] = pg if prev is None else add(prev, pg)
        finally:
            if not create_graph:
                _state.no_record -= 1

        out = []
        for w in wrt:
            g = grads.get(w.node) if w.tape is self else None
            if g is None:
                g = Tensor(np.zeros_like(w.data))
            elif g.shape != w.shape:
                g = Tensor(np.broadcast_to(g.data, w.shape).copy())
            if not np.all(np.isfinite(g.data)):
                raise NonFiniteError("non-finite gradient")
            out.append(g)
        if not retain_graph:
            self.invalidate()
        return out


def _record_target(*inputs) -> Optional[Tape]:
    """Tape to record on, or None when the op is a constant computation."""
    if _recording_disabled():
        return None
    tape = active_tape()
    found = None
    for t in inputs:
        tp = t.tape
        if tp is None:
            continue
        if tp.generation != t.gen:
            raise GenerationError("tensor used after its tape generation was invalidated")
        if tp is tape:
            found = tape
    return found


def _make(data: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    tape = _record_target(*parents)
    if tape is None:
        return Tensor(data)
    return tape._record(data, parents, vjp)


# ---------------------------------------------------------------- primitives


def _unbroadcast(data: np.ndarray, shape: tuple) -> np.ndarray:
    if data.shape == shape:
        return data
    nlead = data.ndim - len(shape)
    out = data.sum(axis=tuple(range(nlead))) if nlead > 0 else data
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and out.shape[i] != 1)
    if axes:
        out = out.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def sum_to(a, shape: tuple) -> Tensor:
    a = tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _make(_unbroadcast(a.data, shape), (a,), lambda g: (broadcast_to(g, a.shape),))


def broadcast_to(a, shape: tuple) -> Tensor:
    a = tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(data, (a,), lambda g: (sum_to(g, a.shape),))


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    return _make(a.data + b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    return _make(
        a.data - b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape))
    )


def neg(a) -> Tensor:
    a = tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _broadcast_shape(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    return _make(
        a.data @ b.data, (a, b), lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    )


def transpose(a) -> Tensor:
    a = tensor(a)
    return _make(a.data.T.copy(), (a,), lambda g: (transpose(g),))


def total(a) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    a = tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (broadcast_to(g, a.shape),))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),))


def tanh(a) -> Tensor:
    a = tensor(a)
    out_data = np.tanh(a.data)
    holder: list[Tensor] = []

    def vjp(g):
        y = holder[0]
        return (mul(g, sub(1.0, mul(y, y))),)

    out = _make(out_data, (a,), vjp)
    holder.append(out)
    return out


def exp(a) -> Tensor:
    a = tensor(a)
    holder: list[Tensor] = []
    out = _make(np.exp(a.data), (a,), lambda g: (mul(g, holder[0]),))
    holder.append(out)
    return out


def _log_softmax_data(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax of a 2-d tensor."""
    a = tensor(a)
    if a.data.ndim != 2:
        raise DimensionError("log_softmax expects a 2-d tensor")
    holder: list[Tensor] = []

    def vjp(g):
        y = holder[0]
        rows = sum_to(g, (a.shape[0], 1))
        return (sub(g, mul(exp(y), rows)),)

    out = _make(_log_softmax_data(a.data), (a,), vjp)
    holder.append(out)
    return out


def softmax(a) -> Tensor:
    return exp(log_softmax(a))


def _one_hot(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"labels must lie in [0, {n_classes})")
    onehot = np.zeros((n_rows, n_classes))
    onehot[np.arange(n_rows), labels.astype(np.int64)] = 1.0
    return onehot


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError("logits must be 2-d")
    n, c = logits.shape
    onehot = _one_hot(labels, n, c)
    logp = _log_softmax_data(logits.data)
    value = -(onehot * logp).sum() / n
    if not np.isfinite(value):
        raise NonFiniteError("non-finite cross-entropy")

    def vjp(g):
        probs = softmax(logits)
        return (mul(g, mul(sub(probs, Tensor(onehot)), 1.0 / n)),)

    return _make(np.asarray(value), (logits,), vjp)


def mse(pred, target) -> Tensor:
    pred, target = tensor(pred), tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes {pred.shape} and {target.shape} differ")
    diff = sub(pred, target)
    out = mul(total(mul(diff, diff)), 1.0 / diff.data.size)
    if not np.isfinite(out.data):
        raise NonFiniteError("non-finite mean squared error")
    return out


# -------------------------------------------------------------- entry points


def grad(
    loss: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    retain_graph: Optional[bool] = None,
) -> list[Tensor]:
    if loss.tape is None:
        raise ContractError("loss is not on a tape")
    return loss.tape.grad(loss, wrt, create_graph=create_graph, retain_graph=retain_graph)


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> dict:
    """Gradients of a scalar loss with respect to tracked leaves.

    Without ``leaves`` every watched leaf recorded before ``loss`` is
    included. The tape generation advances afterwards.
    """
    if loss.tape is None:
        raise ContractError("loss is not on a tape")
    if leaves is None:
        leaves = [leaf for leaf in loss.tape.leaves if leaf.node < loss.node]
    leaves = list(leaves)
    grads = loss.tape.grad(loss, leaves)
    return {leaf: g.data for leaf, g in zip(leaves, grads)}
