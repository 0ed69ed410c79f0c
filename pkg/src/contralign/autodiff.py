"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: an explicit gradient tape, the operator set
needed by the training losses, and a finite-difference checker. Tapes record
operations in execution order, so parents always precede children and the
backward sweep is a single reverse pass over node ids. Tensors are float64
throughout; there is no dtype negotiation.

Usage pattern: build the forward computation inside ``with Tape() as tape:``,
then call ``backward(loss, tape)`` to get a dict mapping each requires_grad
leaf to its gradient array. Tensors touched outside any active tape are plain
values and the ops skip recording entirely.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateVectorError, DimensionError, EvaluationError

Array = np.ndarray

# Row norms below this are treated as degenerate in cosine similarities.
NORM_FLOOR = 1e-12

_STACK = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_STACK, "stack", None)
    if stack is None:
        stack = []
        _STACK.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally linked into the active gradient tape.

    ``tape``/``tape_id`` are bookkeeping managed by the ops; user code only
    ever sets ``requires_grad`` (on leaves) and reads ``values``.
    """

    __slots__ = ("values", "requires_grad", "tape", "tape_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values: Array = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Small amount of operator sugar; everything routes through the module
    # ops so recording stays in one place.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents: tuple, backward_fn):
        self.parents = parents  # node ids; None marks an untracked operand
        self.backward_fn = backward_fn  # grad -> per-parent grads; None on leaves


class Tape:
    """Operation record in execution order.

    Creation order is already topological (an op's operands exist before the
    op runs), so backward is a reverse iteration, no sort needed.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: list[tuple[int, Tensor]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a tape that is not innermost")
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def _on_tape(self, t: Tensor) -> bool:
        return t.tape is self and t.tape_id is not None

    def _register_leaf(self, t: Tensor) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node((), None))
        self._leaves.append((node_id, t))
        t.tape = self
        t.tape_id = node_id
        return node_id

    def _ensure(self, t: Tensor) -> int | None:
        """Node id for an operand; requires_grad leaves register lazily.

        Returns None for constants, which simply do not participate in the
        backward sweep.
        """
        if self._on_tape(t):
            return t.tape_id
        if t.requires_grad:
            return self._register_leaf(t)
        return None


def _record(out: Tensor, operands: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is None:
        return out
    ids = tuple(tape._ensure(t) for t in operands)
    if all(i is None for i in ids):
        return out
    node_id = len(tape.nodes)
    tape.nodes.append(_Node(ids, backward_fn))
    out.tape = tape
    out.tape_id = node_id
    return out


def stop_gradient(a: Tensor) -> Tensor:
    """Identity forward; the result is a constant on every tape."""
    return Tensor(a.values)


# ---------------------------------------------------------------------------
# Operator set


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = Tensor(av @ bv)

    def backward(g: Array):
        return g @ bv.T, av.T @ g

    return _record(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        out = Tensor(av + bv)

        def backward(g: Array):
            return g, g

    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        # matrix + row-vector bias
        out = Tensor(av + bv[None, :])

        def backward(g: Array):
            return g, g.sum(axis=0)

    elif bv.ndim == 0:
        out = Tensor(av + bv)

        def backward(g: Array):
            return g, np.asarray(np.sum(g))

    elif av.ndim == 0:
        out = Tensor(av + bv)

        def backward(g: Array):
            return np.asarray(np.sum(g)), g

    else:
        raise DimensionError(f"add: incompatible shapes {av.shape} + {bv.shape}")
    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        out = Tensor(av - bv)

        def backward(g: Array):
            return g, -g

    elif bv.ndim == 0:
        out = Tensor(av - bv)

        def backward(g: Array):
            return g, np.asarray(-np.sum(g))

    else:
        raise DimensionError(f"sub: incompatible shapes {av.shape} - {bv.shape}")
    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape arrays."""
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise DimensionError(f"mul: incompatible shapes {av.shape} * {bv.shape}")
    out = Tensor(av * bv)

    def backward(g: Array):
        return g * bv, g * av

    return _record(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.values * c)

    def backward(g: Array):
        return (g * c,)

    return _record(out, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    ev = np.exp(a.values)
    out = Tensor(ev)

    def backward(g: Array):
        return (g * ev,)

    return _record(out, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = Tensor(np.log(av))

    def backward(g: Array):
        return (g / av,)

    return _record(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0.0  # subgradient at the kink is 0
    out = Tensor(np.where(mask, a.values, 0.0))

    def backward(g: Array):
        return (g * mask,)

    return _record(out, (a,), backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.values)  # sign(0) = 0, matching the relu kink policy
    out = Tensor(np.abs(a.values))

    def backward(g: Array):
        return (g * sign,)

    return _record(out, (a,), backward)


def log_softmax(a) -> Tensor:
    """Row-wise log softmax of a 2-D array, max-shifted for stability."""
    a = as_tensor(a)
    av = a.values
    if av.ndim != 2:
        raise DimensionError(f"log_softmax needs a 2-D input, got shape {av.shape}")
    shifted = av - av.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_v = shifted - lse
    out = Tensor(out_v)
    softmax = np.exp(out_v)

    def backward(g: Array):
        return (g - softmax * g.sum(axis=1, keepdims=True),)

    return _record(out, (a,), backward)


def row_sum(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    if av.ndim != 2:
        raise DimensionError(f"row_sum needs a 2-D input, got shape {av.shape}")
    out = Tensor(av.sum(axis=1))

    def backward(g: Array):
        return (np.broadcast_to(g[:, None], av.shape),)

    return _record(out, (a,), backward)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    out = Tensor(np.asarray(av.sum()))

    def backward(g: Array):
        return (np.broadcast_to(g, av.shape),)

    return _record(out, (a,), backward)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    if av.size == 0:
        raise ContractError("mean_all of an empty array")
    out = Tensor(np.asarray(av.mean()))
    inv = 1.0 / av.size

    def backward(g: Array):
        return (np.broadcast_to(g * inv, av.shape),)

    return _record(out, (a,), backward)


def take_per_row(a, indices) -> Tensor:
    """out[i] = a[i, indices[i]] for a 2-D input; indices is a constant."""
    a = as_tensor(a)
    av = a.values
    idx = np.asarray(indices, dtype=np.int64)
    if av.ndim != 2 or idx.ndim != 1 or idx.shape[0] != av.shape[0]:
        raise DimensionError(
            f"take_per_row: input {av.shape} with indices {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= av.shape[1]):
        raise ContractError(
            f"take_per_row: index out of range for {av.shape[1]} columns"
        )
    rows = np.arange(av.shape[0])
    out = Tensor(av[rows, idx])

    def backward(g: Array):
        z = np.zeros_like(av)
        z[rows, idx] = g
        return (z,)

    return _record(out, (a,), backward)


def take_rows(a, indices) -> Tensor:
    """Row gather from a 2-D input; indices is a constant, repeats allowed."""
    a = as_tensor(a)
    av = a.values
    idx = np.asarray(indices, dtype=np.int64)
    if av.ndim != 2 or idx.ndim != 1:
        raise DimensionError(f"take_rows: input {av.shape} with indices {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= av.shape[0]):
        raise ContractError(f"take_rows: index out of range for {av.shape[0]} rows")
    out = Tensor(av[idx, :])

    def backward(g: Array):
        z = np.zeros_like(av)
        np.add.at(z, idx, g)
        return (z,)

    return _record(out, (a,), backward)


def cosine_similarity_matrix(a, b) -> Tensor:
    """All-pairs cosine similarity between the rows of two 2-D arrays.

    Rows with norm below NORM_FLOOR raise DegenerateVectorError naming the
    offending row; a zero vector here is always an upstream bug and must not
    be clamped into silence.
    """
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise DimensionError(
            f"cosine_similarity_matrix: incompatible shapes {av.shape}, {bv.shape}"
        )
    na = np.linalg.norm(av, axis=1)
    nb = np.linalg.norm(bv, axis=1)
    for side, norms in (("left", na), ("right", nb)):
        bad = np.where(norms < NORM_FLOOR)[0]
        if bad.size:
            raise DegenerateVectorError(
                f"cosine_similarity_matrix: {side} row {int(bad[0])} has norm "
                f"{norms[bad[0]]:.3e} (< {NORM_FLOOR:g})"
            )
    ahat = av / na[:, None]
    bhat = bv / nb[:, None]
    s = ahat @ bhat.T
    out = Tensor(s)

    def backward(g: Array):
        ga = (g @ bhat - (g * s).sum(axis=1, keepdims=True) * ahat) / na[:, None]
        gb = (g.T @ ahat - (g * s).sum(axis=0)[:, None] * bhat) / nb[:, None]
        return ga, gb

    return _record(out, (a, b), backward)


# ---------------------------------------------------------------------------
# Backward sweep


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, Array]:
    """Gradients of a scalar loss w.r.t. every requires_grad leaf on the tape.

    Leaves that the loss does not reach (including anything cut off by
    stop_gradient) map to zero arrays, so optimizer code can iterate the
    result without special cases.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not tape or loss.tape_id is None:
        raise ContractError("backward: loss was not recorded on this tape")
    buffers: list[Array | None] = [None] * len(tape.nodes)
    buffers[loss.tape_id] = np.ones_like(loss.values)
    for nid in range(loss.tape_id, -1, -1):
        g = buffers[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            if buffers[pid] is None:
                buffers[pid] = np.array(pg, dtype=np.float64)
            else:
                buffers[pid] += pg
    grads: dict[Tensor, Array] = {}
    for node_id, leaf in tape._leaves:
        buf = buffers[node_id]
        grads[leaf] = np.zeros_like(leaf.values) if buf is None else buf
    return grads


# ---------------------------------------------------------------------------
# Finite-difference checking


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a deterministic zero-argument closure that reads the given
    parameter tensors and returns a scalar. The analytic gradient is taken
    once on a fresh tape; finite differences then re-evaluate ``fn`` with no
    tape active, perturbing one coordinate at a time. Coordinates with
    |value| < 10*eps are skipped: a perturbation there can cross the relu /
    abs kink and the two-sided difference stops being meaningful.
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"grad_check: eps must be in (0, 1e-2], got {eps}")
    with Tape() as tape:
        loss = fn()
        if not isinstance(loss, Tensor) or loss.values.size != 1:
            raise ContractError("grad_check: fn must return a scalar Tensor")
        if not np.isfinite(loss.values).all():
            raise EvaluationError("grad_check: loss is non-finite at the base point")
        grads = backward(loss, tape)

    def forward_value() -> float:
        v = fn()
        val = float(v.values)
        if not np.isfinite(val):
            raise EvaluationError("grad_check: non-finite loss during perturbation")
        return val

    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.values)
        for index in np.ndindex(p.values.shape):
            x0 = p.values[index]
            if abs(x0) < 10.0 * eps:
                continue
            p.values[index] = x0 + eps
            f_plus = forward_value()
            p.values[index] = x0 - eps
            f_minus = forward_value()
            p.values[index] = x0
            fd = (f_plus - f_minus) / (2.0 * eps)
            ad = float(analytic[index])
            rel = abs(fd - ad) / max(abs(fd), abs(ad), 1e-8)
            worst = max(worst, rel)
    return worst
