"""Reverse-mode automatic differentiation over dense 2-D float64 tensors.

Define-by-run: a :class:`Tape` records every primitive applied to tracked
tensors, and :func:`backward` walks the records in reverse to accumulate
gradients. The record list is a topological order by construction, so the
accumulation order is deterministic. Tapes are rebuilt for every training
step, which keeps forward replays bit-identical for identical inputs.

All tensors are 2-D with float64 storage. Row vectors are 1xC, column
vectors Rx1, scalars 1x1. There is no broadcasting beyond the dedicated
row-vector primitives.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

Array = np.ndarray


def _as_matrix(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got ndim={arr.ndim}")
    return arr


class Tensor:
    """Dense 2-D float64 matrix, optionally tracked on a tape.

    Untracked tensors (node is None) participate in every primitive as
    constants: values flow forward, no gradient is accumulated for them.
    """

    __slots__ = ("data", "tape", "node")

    def __init__(self, values, tape: "Tape | None" = None, node: int | None = None):
        self.data = _as_matrix(values)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Record:
    """One tape entry: output node, input nodes, and the local backward map."""

    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: int, inputs: tuple[int | None, ...],
                 backward: Callable[[Array], tuple[Array | None, ...]]):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of primitives, plus the node-id counter.

    Every op record's inputs precede it in the list, so iterating the
    records in reverse is a valid reverse-topological traversal.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._n_nodes = 0

    def _new_node(self) -> int:
        node = self._n_nodes
        self._n_nodes += 1
        return node

    def watch(self, values) -> Tensor:
        """Track a leaf tensor. The tensor aliases `values` when it is
        already a float64 2-D array, so callers may keep mutating the
        array between tapes (never between forward and backward)."""
        return Tensor(values, tape=self, node=self._new_node())

    def _emit(self, out_data: Array, inputs: Sequence[Tensor],
              backward: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
        out = Tensor(out_data, tape=self, node=self._new_node())
        self.records.append(_Record(out.node, tuple(t.node for t in inputs), backward))
        return out

    def __len__(self) -> int:
        return len(self.records)


def _result(inputs: Sequence[Tensor], out_data: Array,
            backward: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    """Wrap an op result, recording it when any input is tracked."""
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ContractError("operands belong to different tapes")
    if tape is None:
        return Tensor(out_data)
    return tape._emit(out_data, inputs, backward)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g: Array):
        return g @ b.data.T, a.data.T @ g

    return _result((a, b), out, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _result((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _result((a, b), a.data - b.data, lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain (untracked) scalar constant."""
    c = float(c)
    return _result((a,), a.data * c, lambda g: (g * c,))


def add_row_vector(a: Tensor, v: Tensor) -> Tensor:
    """Add a 1xC row vector to every row of an RxC matrix."""
    if v.rows != 1 or v.cols != a.cols:
        raise ShapeError(f"add_row_vector: {a.shape} + {v.shape}")
    return _result((a, v), a.data + v.data,
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_mul: {a.shape} vs {b.shape}")
    return _result((a, b), a.data * b.data,
                   lambda g: (g * b.data, g * a.data))


def elementwise_div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_div: {a.shape} vs {b.shape}")
    out = a.data / b.data

    def back(g: Array):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _result((a, b), out, back)


def mul_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry by a tracked 1x1 scalar tensor."""
    if s.shape != (1, 1):
        raise ShapeError(f"mul_scalar: scalar must be 1x1, got {s.shape}")
    c = s.data[0, 0]

    def back(g: Array):
        return g * c, np.array([[float(np.sum(g * a.data))]])

    return _result((a, s), a.data * c, back)


def add_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Add a tracked 1x1 scalar tensor to every entry."""
    if s.shape != (1, 1):
        raise ShapeError(f"add_scalar: scalar must be 1x1, got {s.shape}")
    return _result((a, s), a.data + s.data[0, 0],
                   lambda g: (g, np.array([[float(np.sum(g))]])))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result((a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _result((a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _result((a,), np.abs(a.data), lambda g: (g * sign,))


def transpose(a: Tensor) -> Tensor:
    return _result((a,), a.data.T.copy(), lambda g: (g.T,))


def row_sum(a: Tensor) -> Tensor:
    n, c = a.shape
    out = a.data.sum(axis=1, keepdims=True)
    return _result((a,), out, lambda g: (np.broadcast_to(g, (n, c)).copy(),))


def row_mean(a: Tensor) -> Tensor:
    n, c = a.shape
    out = a.data.mean(axis=1, keepdims=True)
    return _result((a,), out, lambda g: (np.broadcast_to(g / c, (n, c)).copy(),))


def row_std(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Population standard deviation of each row, sqrt(var + eps)."""
    if eps <= 0.0:
        raise ContractError("row_std: eps must be positive")
    n, c = a.shape
    centered = a.data - a.data.mean(axis=1, keepdims=True)
    out = np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    # d std / d a_ij = (a_ij - mean_i) / (c * std_i); the mean term cancels
    return _result((a,), out, lambda g: (g * centered / (c * out),))


def col_mean(a: Tensor) -> Tensor:
    n, c = a.shape
    out = a.data.mean(axis=0, keepdims=True)
    return _result((a,), out, lambda g: (np.broadcast_to(g / n, (n, c)).copy(),))


def col_std(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Population standard deviation of each column, sqrt(var + eps)."""
    if eps <= 0.0:
        raise ContractError("col_std: eps must be positive")
    n, c = a.shape
    centered = a.data - a.data.mean(axis=0, keepdims=True)
    out = np.sqrt((centered * centered).mean(axis=0, keepdims=True) + eps)
    return _result((a,), out, lambda g: (g * centered / (n * out),))


def row_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g: Array):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result((a,), p, back)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Sum of the elementwise product, as a 1x1 tensor."""
    if a.shape != b.shape:
        raise ShapeError(f"dot: {a.shape} vs {b.shape}")
    out = np.array([[float(np.sum(a.data * b.data))]])
    return _result((a, b), out, lambda g: (g[0, 0] * b.data, g[0, 0] * a.data))


def l2_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit L2 norm, with sqrt(|row|^2 + eps) in the
    denominator so zero rows stay finite."""
    if eps <= 0.0:
        raise ContractError("l2_normalize: eps must be positive")
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True) + eps)
    out = a.data / norms

    def back(g: Array):
        inner = (g * a.data).sum(axis=1, keepdims=True)
        return (g / norms - a.data * inner / (norms ** 3),)

    return _result((a,), out, back)


def sum_all(a: Tensor) -> Tensor:
    n, c = a.shape
    out = np.array([[float(a.data.sum())]])
    return _result((a,), out, lambda g: (np.full((n, c), g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n, c = a.shape
    out = np.array([[float(a.data.mean())]])
    return _result((a,), out, lambda g: (np.full((n, c), g[0, 0] / (n * c)),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack tensors vertically. All parts must share the column count."""
    if not parts:
        raise ContractError("concat_rows: empty input")
    cols = parts[0].cols
    for t in parts:
        if t.cols != cols:
            raise ShapeError("concat_rows: column counts differ")
    out = np.vstack([t.data for t in parts])
    row_counts = [t.rows for t in parts]

    def back(g: Array):
        grads = []
        start = 0
        for r in row_counts:
            grads.append(g[start:start + r])
            start += r
        return tuple(grads)

    return _result(tuple(parts), out, back)


def gradient_reversal(x: Tensor, active: bool = True) -> Tensor:
    """Identity in the forward pass. When active, the backward pass
    multiplies the upstream gradient by exactly -1; when inactive the node
    is an identity in both directions."""
    if active:
        return _result((x,), x.data.copy(), lambda g: (-g,))
    return _result((x,), x.data.copy(), lambda g: (g,))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over rows of -log softmax at the true class, stabilized by
    max-subtraction. Returns a 1x1 tensor."""
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if y.shape[0] != n:
        raise ShapeError(f"labels length {y.shape[0]} != batch size {n}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ContractError(f"label out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    log_p = z - np.log(e.sum(axis=1, keepdims=True))
    out = np.array([[float(-log_p[np.arange(n), y].mean())]])

    def back(g: Array):
        grad = p.copy()
        grad[np.arange(n), y] -= 1.0
        return (g[0, 0] * grad / n,)

    return _result((logits,), out, back)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(tape: Tape, loss: Tensor) -> dict[int, Array]:
    """Accumulate gradients of a scalar loss for every tracked node.

    Records are replayed strictly in reverse creation order, so the
    accumulation order is deterministic. Returns a map from node id to
    gradient array; leaves that the loss does not depend on are absent.
    """
    if loss.tape is not tape or not loss.tracked:
        raise ContractError("loss is not tracked on this tape")
    if loss.shape != (1, 1):
        raise ContractError(f"loss must be a 1x1 scalar, got {loss.shape}")
    grads: dict[int, Array] = {loss.node: np.ones((1, 1))}
    for rec in reversed(tape.records):
        g = grads.get(rec.out)
        if g is None:
            continue
        for node, gin in zip(rec.inputs, rec.backward(g)):
            if node is None or gin is None:
                continue
            if node in grads:
                grads[node] = grads[node] + gin
            else:
                grads[node] = np.array(gin, dtype=np.float64)
    return grads


def finite_difference_check(
    loss_fn: Callable[[Mapping[str, Array]], tuple[float, Mapping[str, Array]]],
    params: Mapping[str, Array],
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients against central finite differences.

    `loss_fn(params)` must be deterministic and return the loss value
    together with the analytic gradient for each parameter array. Every
    coordinate is perturbed by +-step in place; the relative error uses
    max(|fd|, |analytic|, 1e-12) as denominator. Returns the worst
    relative error over all coordinates.
    """
    if step <= 0.0:
        raise ContractError("finite_difference_check: step must be positive")
    base, grads = loss_fn(params)
    if not np.isfinite(base):
        raise NumericError(f"loss is not finite: {base}")
    worst = 0.0
    for name, arr in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            f_plus = loss_fn(params)[0]
            arr[idx] = orig - step
            f_minus = loss_fn(params)[0]
            arr[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"perturbed loss not finite at {name}{idx}")
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-12)
            worst = max(worst, err)
    return worst
