"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded when any
input is a trainable leaf or was itself recorded on that tape. ``backward``
replays the tape in reverse, accumulating gradients over fan-out.

Forward reductions (matmul, sum, segment_sum) accumulate strictly left to
right along the reduced axis. That fixes the floating point summation order,
so results are bit-reproducible and comparable against plain loops. Call
``set_fast_matmul(True)`` to route matmul through BLAS instead.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import (
    DetachedLoss,
    InvalidSegmentIds,
    NonFiniteGradient,
    NonFiniteInput,
    NotScalarLoss,
    ShapeMismatch,
)

_ACTIVE: list["Tape"] = []
_FAST_MATMUL = False


def set_fast_matmul(enabled: bool) -> None:
    global _FAST_MATMUL
    _FAST_MATMUL = bool(enabled)


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, check_finite: bool = False):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if check_finite and not np.all(np.isfinite(arr)):
            raise NonFiniteInput("tensor data contains NaN or infinity")
        self.data = arr
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


class Parameter(Tensor):
    """Named trainable leaf."""

    def __init__(self, name: str, data, requires_grad: bool = True, dtype=None):
        super().__init__(np.array(data, dtype=dtype, copy=True), requires_grad=requires_grad, dtype=dtype)
        self.name = name
        self.grad: np.ndarray | None = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations are recorded on the innermost
    active tape only.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self) -> None:
        """Drop recorded nodes (breaks tensor/tape reference cycles)."""
        for node in self.nodes:
            node.out.tape = None
            node.out.tape_id = None
        self.nodes.clear()

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        out.tape = self
        out.tape_id = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))


def current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def no_grad():
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t.tape is tape


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward value with a user-supplied backward rule.

    ``backward(grad_out)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        tape.record(out, tuple(inputs), backward)
    return out


_op = custom_op


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _ordered_sum(x: np.ndarray, axis: int) -> np.ndarray:
    if x.shape[axis] == 0:
        return np.zeros(np.delete(x.shape, axis), dtype=x.dtype)
    return np.take(np.add.accumulate(x, axis=axis), -1, axis=axis)


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; bare scalars adopt the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return a, b


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _op(a.data / b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    if _FAST_MATMUL or a.shape[1] == 0:
        out = a.data @ b.data
    else:
        # a dense-as-CSR product accumulates each row over k in order, no FMA
        A = a.data
        n, k = A.shape
        op = sp.csr_matrix((A.reshape(-1), np.tile(np.arange(k), n), np.arange(0, n * k + 1, k)), shape=A.shape)
        out = np.asarray(op @ b.data, dtype=np.result_type(A, b.data))

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _op(out, (a, b), backward)


def sum_(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        out = _ordered_sum(x.data.reshape(-1), 0)

        def backward(g):
            return (np.broadcast_to(g, x.shape).copy(),)
    else:
        axis = axis % x.ndim
        out = _ordered_sum(x.data, axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _op(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return div(sum_(x, axis), float(n))


def mean_rows(x: Tensor) -> Tensor:
    return mean(x, axis=0)


# ------------------------------------------------------------------ shaping

def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    return _op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _op(out, (x,), lambda g: (np.transpose(g, inv),))


def slice_(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _op(np.array(out), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _op(out, tuple(tensors), backward)


def row_gather(x: Tensor, indices) -> Tensor:
    """``x[indices]`` along axis 0; backward scatters with accumulation."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeMismatch(f"gather index out of range for {x.shape[0]} rows")
    out = x.data[idx]

    def backward(g):
        return (_scatter_add(g, idx, x.shape[0]),)

    return _op(out, (x,), backward)


def _scatter_add(values: np.ndarray, idx: np.ndarray, n_rows: int) -> np.ndarray:
    """Deterministic ``out[idx[i]] += values[i]`` (stable sort + reduceat)."""
    full = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    if len(idx) == 0:
        return full
    if np.all(idx[1:] >= idx[:-1]):
        order = None
        sidx = idx
    else:
        order = np.argsort(idx, kind="stable")
        sidx = idx[order]
    starts = np.r_[0, np.nonzero(np.diff(sidx))[0] + 1]
    vals = values if order is None else values[order]
    full[sidx[starts]] = np.add.reduceat(vals, starts, axis=0)
    return full


# -------------------------------------------------------------- elementwise

def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)
    return _op(out, (x,), lambda g: (np.where(mask, g, slope * g),))


def elu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(mask, x.data, neg)
    return _op(out, (x,), lambda g: (np.where(mask, g, g * (neg + 1.0)),))


def identity(x: Tensor) -> Tensor:
    return as_tensor(x)


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _op(out, (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _op(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(x: Tensor) -> Tensor:
    """Stable ``log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|))``."""
    x = as_tensor(x)
    out = np.minimum(x.data, 0.0) - np.log1p(np.exp(-np.abs(x.data)))
    return _op(out, (x,), lambda g: (g * _sigmoid(-x.data),))


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _op(np.log(x.data), (x,), lambda g: (g / x.data,))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _op(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-p); identity when not training."""
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _op(x.data * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------------- segments

def _check_segments(ids: np.ndarray, n_values: int, n_segments: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or len(ids) != n_values:
        raise InvalidSegmentIds(f"need one segment id per row ({n_values}), got shape {ids.shape}")
    if len(ids):
        if ids[0] < 0 or ids[-1] >= n_segments:
            raise InvalidSegmentIds("segment id out of range")
        if np.any(np.diff(ids) < 0):
            raise InvalidSegmentIds("segment ids must be sorted non-decreasing")
    return ids


def _segment_layout(ids: np.ndarray, n_segments: int):
    counts = np.bincount(ids, minlength=n_segments)
    starts = np.zeros(n_segments, dtype=np.int64)
    np.cumsum(counts[:-1], out=starts[1:])
    return counts, starts


def _segment_matrix(ids: np.ndarray, n_segments: int, weights: np.ndarray | None = None,
                    columns: np.ndarray | None = None, n_columns: int | None = None):
    """CSR operator whose row s holds the entries of segment s, in stored order.

    SciPy's CSR products accumulate every row strictly in stored order
    starting from zero, which is the fixed order the forward pass relies on.
    """
    counts, _ = _segment_layout(ids, n_segments)
    indptr = np.zeros(n_segments + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    if columns is None:
        columns = np.arange(len(ids), dtype=np.int64)
        n_columns = len(ids)
    if weights is None:
        weights = np.ones(len(ids))
    return sp.csr_matrix((weights, columns, indptr), shape=(n_segments, n_columns))


def _ordered_segment_sum(values: np.ndarray, ids: np.ndarray, n_segments: int) -> np.ndarray:
    if len(ids) == 0:
        return np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
    op = _segment_matrix(ids, n_segments, np.ones(len(ids), dtype=values.dtype))
    flat = values.reshape(len(ids), -1)
    return np.asarray(op @ flat).reshape((n_segments,) + values.shape[1:])


def segment_sum(values: Tensor, segment_ids, n_segments: int) -> Tensor:
    values = as_tensor(values)
    ids = _check_segments(segment_ids, values.shape[0], n_segments)
    out = _ordered_segment_sum(values.data, ids, n_segments)
    return _op(out, (values,), lambda g: (g[ids],))


def segment_max(values: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Per-segment elementwise max; empty segments yield 0. Ties send gradient to the first row."""
    values = as_tensor(values)
    ids = _check_segments(segment_ids, values.shape[0], n_segments)
    counts, starts = _segment_layout(ids, n_segments)
    out = np.zeros((n_segments,) + values.shape[1:], dtype=values.dtype)
    nonempty = np.nonzero(counts)[0]
    if len(ids) == 0:
        return _op(out, (values,), lambda g: (np.zeros_like(values.data),))
    out[nonempty] = np.maximum.reduceat(values.data, starts[nonempty], axis=0)
    hit = values.data == out[ids]
    pos = np.arange(len(ids)).reshape((-1,) + (1,) * (values.ndim - 1))
    pos = np.where(hit, pos, len(ids))
    first = np.minimum.reduceat(pos, starts[nonempty], axis=0)

    def backward(g):
        full = np.zeros_like(values.data)
        trailing = np.indices(first.shape)[1:]
        full[(first,) + tuple(trailing)] = g[nonempty]
        return (full,)

    return _op(out, (values,), backward)


def segment_softmax(scores: Tensor, segment_ids, n_segments: int) -> Tensor:
    """Softmax over rows sharing a segment id (max-shifted)."""
    scores = as_tensor(scores)
    ids = _check_segments(segment_ids, scores.shape[0], n_segments)
    counts, starts = _segment_layout(ids, n_segments)
    seg_max = np.full((n_segments,) + scores.shape[1:], -np.inf, dtype=scores.dtype)
    nonempty = np.nonzero(counts)[0]
    if len(ids):
        seg_max[nonempty] = np.maximum.reduceat(scores.data, starts[nonempty], axis=0)
    ex = np.exp(scores.data - seg_max[ids])
    denom = _ordered_segment_sum(ex, ids, n_segments)
    out = ex / denom[ids]

    def backward(g):
        dot = _ordered_segment_sum(g * out, ids, n_segments)
        return (out * (g - dot[ids]),)

    return _op(out, (scores,), backward)


def weighted_segment_sum(weights: Tensor, values: Tensor, src, segment_ids, n_segments: int) -> Tensor:
    """``out[s, k] = sum over rows e of segment s of weights[e, k] * values[src[e], k]``.

    ``weights`` is (E, K), ``values`` is (m, K, F); the result is (n, K, F).
    Equivalent to ``segment_sum(row_gather(values, src) * weights[..., None])``
    without materialising the (E, K, F) gather.
    """
    weights, values = as_tensor(weights), as_tensor(values)
    src = np.asarray(src, dtype=np.int64)
    if weights.ndim != 2 or values.ndim != 3 or weights.shape[1] != values.shape[1]:
        raise ShapeMismatch(f"weights {weights.shape} incompatible with values {values.shape}")
    if src.shape != (weights.shape[0],):
        raise ShapeMismatch("need one source index per weight row")
    if src.size and (src.min() < 0 or src.max() >= values.shape[0]):
        raise ShapeMismatch("source index out of range")
    ids = _check_segments(segment_ids, weights.shape[0], n_segments)
    m, K, F = values.shape
    out = np.zeros((n_segments, K, F), dtype=values.dtype)
    ops = []
    for k in range(K):
        op = _segment_matrix(ids, n_segments, weights.data[:, k], src, m)
        ops.append(op)
        if len(ids):
            out[:, k, :] = op @ values.data[:, k, :]

    def backward(g):
        gv = np.zeros_like(values.data)
        for k in range(K):
            gv[:, k, :] = ops[k].T @ g[:, k, :]
        gw = np.einsum("ekf,ekf->ek", g[ids], values.data[src])
        return gw, gv

    return _op(out, (weights, values), backward)


# ----------------------------------------------------------------- backward

def _reverse(tape: Tape, loss: Tensor) -> tuple[dict[int, np.ndarray], dict[int, Tensor]]:
    if loss.data.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss.tape is not tape or loss.tape_id is None:
        raise DetachedLoss("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.tape_id + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not (inp.requires_grad or inp.tape is tape):
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
            if inp.tape is not tape:
                leaves[key] = inp
    return grads, leaves


def backward(tape: Tape, loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Reverse pass from a scalar ``loss``.

    Returns ``{name: grad}`` for every parameter in ``params`` (default: all
    parameters seen on the tape); unreachable parameters get zeros. Each
    parameter's ``grad`` attribute is set as well.
    """
    grads, leaves = _reverse(tape, loss)
    if params is None:
        params = [t for t in leaves.values() if isinstance(t, Parameter)]
    out = {}
    for p in params:
        g = grads.get(id(p))
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g
        out[p.name] = g
    return out


def leaf_gradients(tape: Tape, loss: Tensor, tensors: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for arbitrary leaf tensors, returned positionally."""
    grads, _ = _reverse(tape, loss)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in tensors]


def gradient_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    Error per entry is ``|a - n| / max(1, |a|, |n|)``.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    inputs = [as_tensor(x) for x in inputs]
    saved = [x.requires_grad for x in inputs]
    for x in inputs:
        x.requires_grad = True
    try:
        with Tape() as tape:
            out = f(*inputs)
        analytic = leaf_gradients(tape, out, inputs)
    finally:
        for x, s in zip(inputs, saved):
            x.requires_grad = s

    worst = 0.0
    with no_grad():
        for x, a in zip(inputs, analytic):
            if not np.all(np.isfinite(a)):
                raise NonFiniteGradient("analytic gradient is not finite")
            flat = x.data.reshape(-1)
            a_flat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                if not np.isfinite(num):
                    raise NonFiniteGradient("numeric gradient is not finite")
                err = abs(a_flat[i] - num) / max(1.0, abs(a_flat[i]), abs(num))
                worst = max(worst, err)
    return worst
