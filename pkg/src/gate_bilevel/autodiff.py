"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation whose inputs include a tracked
tensor.  Tensors built from plain arrays are constants: operations on
constants only compute values and never touch a tape, which keeps the
outer loop (gradient w.r.t. the transfer ratios only) cheap.

Broadcasting is deliberately absent except for scalar-times-tensor; the
row-wise bias add lives in its own ``affine`` op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "GradientMap",
    "ShapeError",
    "backward",
    "constant",
    "detach",
    "grad_check",
    "add",
    "add_n",
    "sub",
    "mul",
    "matmul",
    "affine",
    "tanh",
    "mean_sq_diff",
    "segment_msd",
    "norm",
    "row_norm",
    "sum",
    "dot",
    "gather",
    "take_rows",
    "slice_rows",
    "concat_rows",
    "tile_rows",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op kind."""


@dataclass
class _Node:
    op: str
    parents: tuple[int | None, ...]
    backward: Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]] | None
    shape: tuple[int, ...]
    leaf: bool = False
    name: str | None = None


@dataclass
class Tape:
    """Append-only record of operations.  Parents always precede children."""

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[int, str | None] = field(default_factory=dict)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        arr = np.array(value, dtype=np.float64)
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, arr.shape, leaf=True, name=name))
        self.leaves[nid] = name
        return Tensor(arr, self, nid)

    def _record(self, op, parents, value, backward_fn) -> "Tensor":
        nid = len(self.nodes)
        pids = tuple(p.node if p.tape is self else None for p in parents)
        self.nodes.append(_Node(op, pids, backward_fn, value.shape))
        return Tensor(value, self, nid)

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A value array, optionally tied to a node on a tape."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100

    def __init__(self, value, tape: Tape | None = None, node: int | None = None):
        self.value = value if isinstance(value, np.ndarray) else np.array(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class GradientMap(dict):
    """Leaf node id -> gradient array.  Also indexable by the leaf tensor."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return super().__getitem__(key)


def constant(value) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _tape_of(op: str, tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{op}: operands recorded on different tapes")
            tape = t.tape
    return tape


def _emit(op, inputs, value, backward_fn) -> Tensor:
    tape = _tape_of(op, inputs)
    if tape is None:
        return Tensor(value)
    return tape._record(op, inputs, value, backward_fn)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.value + b.value, lambda g, need: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value, lambda g, need: (g, -g if need[1] else None))


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of same-shaped tensors.  Scalars are summed exactly (fsum)."""
    terms = [_as_tensor(t) for t in terms]
    if not terms:
        raise ValueError("add_n: no terms")
    shape = terms[0].shape
    for t in terms[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n: shape mismatch {shape} vs {t.shape}")
    if int(np.prod(shape)) == 1:
        value = np.array(math.fsum(t.item() for t in terms)).reshape(shape)
    else:
        value = np.sum(np.stack([t.value for t in terms]), axis=0)
    n = len(terms)
    return _emit("add_n", terms, value, lambda g, need: (g,) * n)


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or scalar times tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    if a.shape == b.shape:
        return _emit("mul", (a, b), av * bv, lambda g, need: (g * bv, g * av))
    if av.size == 1:
        s = av.reshape(())

        def back(g, need):
            return (
                np.reshape(np.sum(g * bv), a.shape) if need[0] else None,
                g * s if need[1] else None,
            )

        return _emit("mul", (a, b), s * bv, back)
    if bv.size == 1:
        s = bv.reshape(())

        def back(g, need):
            return (
                g * s if need[0] else None,
                np.reshape(np.sum(g * av), b.shape) if need[1] else None,
            )

        return _emit("mul", (a, b), av * s, back)
    raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.value)
    return _emit("tanh", (a,), y, lambda g, need: (g * (1.0 - y * y),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value

    def back(g, need):
        return (g @ bv.T if need[0] else None, av.T @ g if need[1] else None)

    return _emit("matmul", (a, b), av @ bv, back)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` added to every row of the product."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.value.ndim != 2 or w.value.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"affine: shape mismatch {x.shape} vs {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} vs {(w.shape[1],)}")
    xv, wv = x.value, w.value

    def back(g, need):
        return (
            g @ wv.T if need[0] else None,
            xv.T @ g if need[1] else None,
            g.sum(axis=0) if need[2] else None,
        )

    return _emit("affine", (x, w, b), xv @ wv + b.value, back)


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _emit("dot", (a, b), np.array(np.dot(av, bv)), lambda g, need: (g * bv, g * av))


# ---------------------------------------------------------------- reductions


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = _as_tensor(a)
    shape = a.shape
    return _emit("sum", (a,), np.array(np.sum(a.value)), lambda g, need: (np.full(shape, g),))


def mean_sq_diff(a, b) -> Tensor:
    """Mean over all elements of ``(a - b)**2``."""
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mean_sq_diff", a, b)
    if a.value.size == 0:
        raise ShapeError("mean_sq_diff: empty operands")
    d = a.value - b.value
    n = d.size

    def back(g, need):
        ga = (2.0 / n) * g * d
        return (ga, -ga if need[1] else None)

    return _emit("mean_sq_diff", (a, b), np.array(np.mean(d * d)), back)


def segment_msd(a, b, n_segments: int) -> Tensor:
    """Per-segment mean squared difference.

    Rows of ``a`` and ``b`` are cut into ``n_segments`` equal contiguous
    blocks; the result is a vector with one mean per block.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("segment_msd", a, b)
    rows = a.shape[0]
    if n_segments < 1 or rows % n_segments:
        raise ShapeError(f"segment_msd: {rows} rows not divisible into {n_segments} segments")
    d = a.value - b.value
    blocks = d.reshape(n_segments, -1)
    per = blocks.shape[1]

    def back(g, need):
        ga = ((2.0 / per) * g[:, None] * blocks).reshape(d.shape)
        return (ga, -ga if need[1] else None)

    return _emit("segment_msd", (a, b), np.mean(blocks * blocks, axis=1), back)


def norm(a) -> Tensor:
    """Euclidean norm of all elements."""
    a = _as_tensor(a)
    av = a.value
    r = float(np.sqrt(np.sum(av * av)))

    def back(g, need):
        if r == 0.0:
            return (np.zeros_like(av),)
        return (g * av / r,)

    return _emit("norm", (a,), np.array(r), back)


def row_norm(a) -> Tensor:
    """Euclidean norm of each row of a matrix; zero rows get zero gradient."""
    a = _as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"row_norm: expected matrix, got {a.shape}")
    av = a.value
    r = np.sqrt(np.sum(av * av, axis=1))

    def back(g, need):
        safe = np.where(r > 0.0, r, 1.0)
        scale = np.where(r > 0.0, g / safe, 0.0)
        return (av * scale[:, None],)

    return _emit("row_norm", (a,), r, back)


# ---------------------------------------------------------------- indexing


def gather(a, flat_index) -> Tensor:
    """Vector of elements picked from ``a`` by flat index."""
    a = _as_tensor(a)
    idx = np.asarray(flat_index, dtype=np.intp)
    shape = a.shape

    def back(g, need):
        out = np.zeros(int(np.prod(shape)) if shape else 1)
        np.add.at(out, idx, g)
        return (out.reshape(shape),)

    return _emit("gather", (a,), a.value.reshape(-1)[idx], back)


def take_rows(a, rows) -> Tensor:
    a = _as_tensor(a)
    idx = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def back(g, need):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take_rows", (a,), a.value[idx], back)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def back(g, need):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _emit("slice_rows", (a,), a.value[start:stop], back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows: no parts")
    tail = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != tail:
            raise ShapeError(f"concat_rows: shape mismatch {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g, need):
        return tuple(g[bounds[i] : bounds[i + 1]] if need[i] else None for i in range(len(parts)))

    return _emit("concat_rows", parts, np.concatenate([p.value for p in parts], axis=0), back)


def tile_rows(a, reps: int) -> Tensor:
    """Stack ``reps`` copies of ``a`` along the first axis."""
    a = _as_tensor(a)
    shape = a.shape

    def back(g, need):
        return (g.reshape((reps,) + shape).sum(axis=0),)

    return _emit("tile_rows", (a,), np.concatenate([a.value] * reps, axis=0), back)


def detach(a) -> Tensor:
    """Same values; gradient never flows to ``a``'s ancestors."""
    a = _as_tensor(a)
    return _emit("detach", (a,), a.value.copy(), lambda g, need: (None,))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> GradientMap:
    """Gradients of a scalar ``loss`` w.r.t. every leaf registered on ``tape``."""
    if loss.value.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.node is None:
        raise ValueError("backward: loss is not recorded on this tape")
    nodes = tape.nodes
    grads: list[np.ndarray | None] = [None] * (loss.node + 1)
    grads[loss.node] = np.ones(loss.shape)
    for k in range(loss.node, -1, -1):
        g = grads[k]
        if g is None:
            continue
        node = nodes[k]
        if node.leaf:
            continue
        need = tuple(p is not None for p in node.parents)
        pgs = node.backward(g, need)
        for pid, pg in zip(node.parents, pgs):
            if pid is None or pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        grads[k] = None
    out = GradientMap()
    for nid in tape.leaves:
        g = grads[nid] if nid < len(grads) else None
        out[nid] = np.zeros(nodes[nid].shape) if g is None else np.asarray(g, dtype=np.float64)
    return out


def grad_check(
    f: Callable[[Tape, list[Tensor]], Tensor],
    leaves: Iterable,
    epsilon: float = 1e-5,
    entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backward and central differences.

    ``f(tape, leaf_tensors)`` must build a scalar loss.  With ``entries`` set,
    only that many randomly chosen leaf entries are probed.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"grad_check: epsilon {epsilon} outside (0, 1e-2]")
    values = [np.array(v, dtype=np.float64) for v in leaves]
    tape = Tape()
    ts = [tape.leaf(v) for v in values]
    grads = backward(f(tape, ts), tape)
    analytic = [grads[t] for t in ts]

    def evaluate(vals):
        out = f(Tape(), [constant(v) for v in vals]).item()
        if not math.isfinite(out):
            raise FloatingPointError("grad_check: non-finite loss at probe point")
        return out

    probes = [(i, j) for i, v in enumerate(values) for j in range(v.size)]
    if entries is not None and entries < len(probes):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(probes), size=entries, replace=False)
        probes = [probes[k] for k in sorted(pick)]
    worst = 0.0
    for i, j in probes:
        base = values[i].reshape(-1)[j]
        plus = [v.copy() for v in values]
        minus = [v.copy() for v in values]
        plus[i].reshape(-1)[j] = base + epsilon
        minus[i].reshape(-1)[j] = base - epsilon
        central = (evaluate(plus) - evaluate(minus)) / (2.0 * epsilon)
        a = analytic[i].reshape(-1)[j]
        worst = max(worst, abs(a - central) / (abs(a) + abs(central) + 1e-12))
    return worst
