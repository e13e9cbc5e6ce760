"""Tape-based reverse-mode differentiation over 2-D float64 arrays.

Every operation appends one :class:`Value` to the :class:`Tape` of its
inputs and stores a vector-Jacobian product. :func:`backward` walks the tape
in reverse creation order, so gradient accumulation order is fixed.

Only the operations the graph models need are provided. There is no general
broadcasting: shapes must match exactly unless an op says otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .exceptions import ConfigError, ContractError, DomainError, GraphRangeError, SegmentationError, ShapeError

# Names of deliberately broken backward rules, for mutation testing of the
# verification suite. Empty in normal operation.
FAULTS: set[str] = set()


class Value:
    """A node of the computation: a 2-D array plus how it was produced."""

    __slots__ = ("data", "tape", "parents", "vjp", "requires_grad", "name", "grad", "__weakref__")

    def __init__(self, data, tape, parents=(), vjp=None, requires_grad=False, name=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeError(f"values are 2-D, got shape {data.shape}")
        self.data = data
        self.tape = tape
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 value, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of one forward pass. Single owner; not thread-safe."""

    def __init__(self):
        self.nodes: list[Value] = []

    def variable(self, data, name=None) -> Value:
        """A leaf that receives a gradient."""
        v = Value(np.array(data, dtype=np.float64, ndmin=2), self, requires_grad=True, name=name)
        self.nodes.append(v)
        return v

    def constant(self, data, name=None) -> Value:
        # no copy: constants are never written through
        v = Value(np.atleast_2d(np.asarray(data, dtype=np.float64)), self, requires_grad=False, name=name)
        self.nodes.append(v)
        return v

    def record(self, data, parents: Sequence[Value], vjp) -> Value:
        requires = any(p.requires_grad for p in parents)
        v = Value(data, self, parents, vjp if requires else None, requires_grad=requires)
        self.nodes.append(v)
        return v

    def __len__(self):
        return len(self.nodes)


def _tape_of(*values) -> Tape:
    for v in values:
        if isinstance(v, Value):
            return v.tape
    raise ContractError("at least one operand must be a Value")


def _lift(x, tape: Tape) -> Value:
    if isinstance(x, Value):
        if x.tape is not tape:
            raise ContractError("operands belong to different tapes")
        return x
    return tape.constant(x)


@dataclass(frozen=True, eq=False)
class SegmentIndex:
    """Contiguous grouping of ``E`` edge-indexed rows into ``S`` segments."""

    offsets: np.ndarray

    def __post_init__(self):
        off = np.ascontiguousarray(self.offsets, dtype=np.int64)
        if off.ndim != 1 or len(off) < 1 or off[0] != 0:
            raise SegmentationError("segment offsets must be a 1-D array starting at 0")
        if (np.diff(off) < 0).any():
            raise SegmentationError("segment offsets must be nondecreasing")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @classmethod
    def from_sizes(cls, sizes) -> "SegmentIndex":
        return cls(np.concatenate([[0], np.cumsum(np.asarray(sizes, dtype=np.int64))]))

    @property
    def num_segments(self) -> int:
        return len(self.offsets) - 1

    @property
    def num_elements(self) -> int:
        return int(self.offsets[-1])

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @cached_property
    def segment_ids(self) -> np.ndarray:
        """Segment number of every element."""
        return np.repeat(np.arange(self.num_segments), self.sizes)

    @cached_property
    def summation(self) -> sp.csr_matrix:
        """``[S, E]`` 0/1 matrix summing the elements of each segment."""
        e = self.num_elements
        return sp.csr_matrix((np.ones(e), np.arange(e), self.offsets), shape=(self.num_segments, e))

    def segment_sum(self, x: np.ndarray) -> np.ndarray:
        """Sum rows of ``x`` within each segment (empty segments give 0)."""
        return np.asarray(self.summation @ x)


def _scatter_rows(x: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """``out[idx[e]] += x[e]`` via a sparse product (deterministic order)."""
    m = sp.csr_matrix((np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx)))
    return np.asarray(m @ x)


# --------------------------------------------------------------------------
# linear algebra and structural ops


def matmul(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return tape.record(
        A @ B, (a, b), lambda g: (g @ B.T if need_a else None, A.T @ g if need_b else None)
    )


def sparse_matmul(x: sp.csr_matrix, b: Value) -> Value:
    """Constant sparse ``x`` times ``b``; only ``b`` receives a gradient."""
    if x.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {x.shape} @ {b.shape}")
    return b.tape.record(np.asarray(x @ b.data), (b,), lambda g: (np.asarray(x.T @ g),))


def sparse_dropout(x: sp.csr_matrix, p: float, rng, training: bool) -> sp.csr_matrix:
    """Inverted dropout on the stored entries of a constant sparse matrix."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.nnz) >= p) / (1.0 - p)
    out = x.copy()
    out.data = out.data * keep
    return out


def add(a, b) -> Value:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape:
        raise ShapeError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return tape.record(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Value:
    """Elementwise product of equal-shape values."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape != b.shape:
        raise ShapeError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return tape.record(A * B, (a, b), lambda g: (g * B, g * A))


def scale(x: Value, c: float) -> Value:
    return x.tape.record(x.data * c, (x,), lambda g: (g * c,))


def total(x: Value) -> Value:
    """Sum of all entries as a 1x1 value."""
    shape = x.shape
    return x.tape.record(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def row_sum(x: Value) -> Value:
    """Sum across columns: ``[m, n] -> [m, 1]``."""
    n = x.shape[1]
    return x.tape.record(x.data.sum(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g, n, axis=1),))


def concat_cols(parts: Sequence[Value]) -> Value:
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols needs equal row counts, got {sorted(rows)}")
    tape = _tape_of(*parts)
    parts = [_lift(p, tape) for p in parts]
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])
    return tape.record(
        np.concatenate([p.data for p in parts], axis=1),
        parts,
        lambda g: tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))),
    )


def slice_cols(x: Value, start: int, stop: int) -> Value:
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return x.tape.record(x.data[:, start:stop], (x,), vjp)


def slice_rows(x: Value, start: int, stop: int) -> Value:
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return x.tape.record(x.data[start:stop], (x,), vjp)


def gather_rows(x: Value, idx) -> Value:
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise GraphRangeError(f"gather index out of range [0, {n})")
    return x.tape.record(x.data[idx], (x,), lambda g: (_scatter_rows(g, idx, n),))


def segment_weighted_sum(values: Value, weights: Value, seg: SegmentIndex) -> Value:
    """``out[s] = sum_{e in s} weights[e] * values[e]`` -> ``[S, F]``."""
    if values.shape[0] != seg.num_elements or weights.shape != (seg.num_elements, 1):
        raise ShapeError(
            f"segment_weighted_sum: values {values.shape}, weights {weights.shape}, {seg.num_elements} elements"
        )
    tape = _tape_of(values, weights)
    V, w, ids = values.data, weights.data, seg.segment_ids

    def vjp(g):
        ge = g[ids]
        return ge * w, np.einsum("ef,ef->e", ge, V)[:, None]

    return tape.record(seg.segment_sum(w * V), (values, weights), vjp)


def pair_dots(x: Value, left, right) -> Value:
    """Row inner products ``out[e] = <x[left[e]], x[right[e]]>`` -> ``[E, 1]``."""
    left = np.asarray(left, dtype=np.int64)
    right = np.asarray(right, dtype=np.int64)
    n = x.shape[0]
    for idx in (left, right):
        if len(idx) and (idx.min() < 0 or idx.max() >= n):
            raise GraphRangeError(f"pair index out of range [0, {n})")
    X = x.data
    L, R = X[left], X[right]

    def vjp(g):
        return (_scatter_rows(g * R, left, n) + _scatter_rows(g * L, right, n),)

    return x.tape.record(np.einsum("ef,ef->e", L, R)[:, None], (x,), vjp)


def neighbor_aggregate(x: Value, weights: Value, seg: SegmentIndex, idx) -> Value:
    """Fused ``segment_weighted_sum(gather_rows(x, idx), weights, seg)``.

    Runs as one sparse matrix product, avoiding the ``[E, F]`` intermediate.
    """
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if len(idx) != seg.num_elements or weights.shape != (seg.num_elements, 1):
        raise ShapeError("neighbor_aggregate: idx and weights must have one entry per element")
    if len(idx) and (idx.min() < 0 or idx.max() >= n):
        raise GraphRangeError(f"gather index out of range [0, {n})")
    tape = _tape_of(x, weights)
    X, ids = x.data, seg.segment_ids
    # elements are already grouped by segment, so the CSR arrays can be used as is
    A = sp.csr_matrix((weights.data[:, 0], idx, seg.offsets), shape=(seg.num_segments, n))

    def vjp(g):
        return np.asarray(A.T @ g), np.einsum("ef,ef->e", g[ids], X[idx])[:, None]

    return tape.record(np.asarray(A @ X), (x, weights), vjp)


def segment_softmax(scores: Value, seg: SegmentIndex) -> Value:
    """Softmax of an ``[E, 1]`` column computed independently per segment."""
    if scores.shape != (seg.num_elements, 1):
        raise ShapeError(f"segment_softmax expects [{seg.num_elements}, 1], got {scores.shape}")
    if seg.num_segments and (seg.sizes == 0).any():
        raise SegmentationError(f"segment {int(np.argmax(seg.sizes == 0))} is empty")
    s = scores.data[:, 0]
    ids = seg.segment_ids
    if len(s):
        seg_max = np.maximum.reduceat(s, seg.offsets[:-1])
    else:
        seg_max = np.zeros(0)
    e = np.exp(s - seg_max[ids])
    denom = np.bincount(ids, weights=e, minlength=seg.num_segments)
    y = (e / denom[ids])[:, None]

    def vjp(g):
        inner = np.bincount(ids, weights=(g * y)[:, 0], minlength=seg.num_segments)
        return (y * (g - inner[ids][:, None]),)

    return scores.tape.record(y, (scores,), vjp)


# --------------------------------------------------------------------------
# elementwise nonlinearities


def leaky_relu(x: Value, slope: float = 0.2) -> Value:
    X = x.data
    # kink convention: the x >= 0 branch owns x == 0
    d = np.where(X >= 0, 1.0, slope)
    if "leaky_relu_sign" in FAULTS:
        d = -d
    return x.tape.record(np.where(X >= 0, X, slope * X), (x,), lambda g: (g * d,))


def relu(x: Value) -> Value:
    X = x.data
    d = (X >= 0).astype(np.float64)
    return x.tape.record(np.maximum(X, 0.0), (x,), lambda g: (g * d,))


def elu(x: Value) -> Value:
    """ELU with alpha = 1."""
    X = x.data
    neg = np.expm1(np.minimum(X, 0.0))
    y = np.where(X > 0, X, neg)
    d = np.where(X > 0, 1.0, neg + 1.0)
    return x.tape.record(y, (x,), lambda g: (g * d,))


def sigmoid(x: Value) -> Value:
    y = expit(x.data)
    return x.tape.record(y, (x,), lambda g: (g * y * (1.0 - y),))


def softplus(x: Value) -> Value:
    """``log(1 + exp(x))`` evaluated without overflow."""
    X = x.data
    return x.tape.record(np.logaddexp(0.0, X), (x,), lambda g: (g * expit(X),))


def log(x: Value) -> Value:
    X = x.data
    if (X <= 0).any():
        raise DomainError("log of a nonpositive value; clamp or use a log-space form")
    return x.tape.record(np.log(X), (x,), lambda g: (g / X,))


def dropout(x: Value, p: float, rng: np.random.Generator | None, training: bool) -> Value:
    """Inverted dropout: survivors are scaled by ``1 / (1 - p)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x.tape.record(x.data * mask, (x,), lambda g: (g * mask,))


def cross_entropy_rows(logits: Value, labels, rows) -> Value:
    """Summed ``-log softmax(logits[r])[labels[r]]`` over ``rows`` (1x1 value).

    Uses the log-sum-exp form, so large logits do not overflow.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        raise ContractError("cross-entropy needs at least one row")
    Z = logits.data[rows]
    y = np.asarray(labels, dtype=np.int64)[rows]
    zmax = Z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(Z - zmax).sum(axis=1))
    loss = float(np.sum(lse - Z[np.arange(len(rows)), y]))
    shape = logits.shape

    def vjp(g):
        probs = np.exp(Z - lse[:, None])
        probs[np.arange(len(rows)), y] -= 1.0
        out = np.zeros(shape)
        np.add.at(out, rows, probs * g[0, 0])
        return (out,)

    return logits.tape.record(np.array([[loss]]), (logits,), vjp)


# --------------------------------------------------------------------------
# reverse pass and checking


def backward(tape: Tape, loss: Value, leaves: Sequence[Value] | None = None) -> dict[Value, np.ndarray]:
    """Accumulate ``d loss / d leaf`` for every gradient-requiring leaf.

    Leaves unreachable from ``loss`` get zero arrays. Each leaf's ``grad``
    attribute is set as well as being returned in the mapping.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.get(id(node))
        if g is None or node.is_leaf or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64)
    if leaves is None:
        leaves = [n for n in tape.nodes if n.is_leaf and n.requires_grad]
    out = {}
    for leaf in leaves:
        leaf.grad = grads.get(id(leaf), np.zeros(leaf.shape))
        out[leaf] = leaf.grad
    return out


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and numeric gradients."""

    errors: dict[str, float]
    tol: float
    step: float
    label: str = ""
    failures: list[str] = field(init=False)

    def __post_init__(self):
        self.failures = [k for k, e in self.errors.items() if not e < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.label} max_rel_err={self.max_error:.2e} tol={self.tol:.0e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``max |a - n| / max(|a|, |n|, floor)`` over all entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(
    build_fn: Callable[[Tape, dict], Value],
    params: dict[str, np.ndarray],
    step: float = 1e-4,
    tol: float = 1e-4,
    label: str = "",
) -> GradCheckReport:
    """Compare :func:`backward` against central differences.

    ``build_fn(tape, leaves)`` must rebuild the scalar loss from the leaf
    values in ``leaves`` (name -> Value) deterministically.
    """
    params = {k: np.array(v, dtype=np.float64, ndmin=2) for k, v in params.items()}

    def evaluate(values):
        tape = Tape()
        leaves = {k: tape.variable(v, name=k) for k, v in values.items()}
        return tape, leaves, build_fn(tape, leaves)

    tape, leaves, loss = evaluate(params)
    analytic = backward(tape, loss, list(leaves.values()))

    errors = {}
    for name, base in params.items():
        numeric = np.zeros_like(base)
        for i in np.ndindex(base.shape):
            values = dict(params)
            bumped = base.copy()
            bumped[i] = base[i] + step
            values[name] = bumped
            up = evaluate(values)[2].item()
            bumped[i] = base[i] - step
            down = evaluate(values)[2].item()
            numeric[i] = (up - down) / (2 * step)
        errors[name] = relative_error(analytic[leaves[name]], numeric)
    return GradCheckReport(errors, tol, step, label)
