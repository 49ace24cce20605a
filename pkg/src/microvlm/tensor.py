"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every forward op runs on plain numpy arrays. While a :class:`Tape` is active
(see :func:`recording`), each op that touches a grad-requiring tensor pushes a
record with its backward rule; :func:`backward` replays the tape in reverse
and populates ``.grad`` buffers on the leaf tensors.

Everything is 64-bit: the stack is a correctness artifact and the gradient
checks need the headroom. Broadcasting is deliberately restricted to
trailing-axis affine parameters (bias rows, layer-norm gains) so shape rules
stay auditable.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeMismatchError(ValueError):
    """Operand shapes violate an op contract."""


class Tensor:
    """A dense row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ValueError(f"item() on non-scalar tensor of shape {self.shape}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# A backward rule maps the output gradient to per-input gradients (None for
# inputs that need no gradient).
BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class TapeRecord:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardRule):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of executed ops, topologically sorted by construction."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: BackwardRule) -> None:
        self.records.append(TapeRecord(inputs, output, backward))

    def __len__(self) -> int:
        return len(self.records)


_tape_stack: list[Tape] = []


@contextmanager
def recording(tape: Tape | None = None):
    """Activate a tape so that subsequent ops record backward rules onto it."""
    t = tape if tape is not None else Tape()
    _tape_stack.append(t)
    try:
        yield t
    finally:
        _tape_stack.pop()


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _emit(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward: BackwardRule) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.record(inputs, out, backward)
    return out


def _sum_to_trailing(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a full-shape gradient onto a trailing-axis parameter shape."""
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd(g: np.ndarray):
        ga = g @ np.swapaxes(b_data, -1, -2) if need_a else None
        gb = np.swapaxes(a_data, -1, -2) @ g if need_b else None
        return ga, gb

    return _emit((a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may also match a trailing slice of `a`'s shape
    (bias rows, position tables), the only broadcasting the kernel allows."""
    if not (b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape):
        raise ShapeMismatchError(f"add: incompatible shapes {a.shape} and {b.shape}")
    b_shape = b.shape

    def bwd(g: np.ndarray):
        return g, _sum_to_trailing(g, b_shape)

    return _emit((a, b), a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    a_data, b_data = a.data, b.data

    def bwd(g: np.ndarray):
        return g * b_data, g * a_data

    return _emit((a, b), a_data * b_data, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar constant."""
    s = float(s)

    def bwd(g: np.ndarray):
        return (g * s,)

    return _emit((a,), a.data * s, bwd)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = a.shape

    def bwd(g: np.ndarray):
        return (np.full(shape, float(g), dtype=np.float64),)

    return _emit((a,), np.asarray(a.data.sum()), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = tuple(int(i) for i in np.argsort(axes))

    def bwd(g: np.ndarray):
        return (g.transpose(inverse),)

    return _emit((a,), a.data.transpose(axes), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def bwd(g: np.ndarray):
        return (g.reshape(old),)

    return _emit((a,), a.data.reshape(shape), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; trailing dimensions must agree."""
    if not parts:
        raise ShapeMismatchError("concat_rows: empty input")
    tail = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != tail:
            raise ShapeMismatchError(
                f"concat_rows: trailing dims differ: {p.shape} vs {parts[0].shape}")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g: np.ndarray):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _emit(tuple(parts), np.concatenate([p.data for p in parts], axis=0), bwd)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not parts:
        raise ShapeMismatchError("stack_rows: empty input")
    shape = parts[0].shape
    for p in parts:
        if p.shape != shape:
            raise ShapeMismatchError(f"stack_rows: shapes differ: {p.shape} vs {shape}")

    def bwd(g: np.ndarray):
        return tuple(g[i] for i in range(len(parts)))

    return _emit(tuple(parts), np.stack([p.data for p in parts], axis=0), bwd)


def take_row(t: Tensor, i: int) -> Tensor:
    """Select index `i` along axis 0 (inverse of one stack_rows slot)."""
    if not 0 <= i < t.shape[0]:
        raise ShapeMismatchError(f"take_row: index {i} out of range for shape {t.shape}")
    shape = t.shape

    def bwd(g: np.ndarray):
        out = np.zeros(shape, dtype=np.float64)
        out[i] = g
        return (out,)

    return _emit((t,), t.data[i], bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: ids of any shape index axis 0 of `table`."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding: id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}")
    v, ids_flat = table.shape[0], ids.reshape(-1)
    tail = table.shape[1:]

    def bwd(g: np.ndarray):
        gt = np.zeros((v,) + tail, dtype=np.float64)
        np.add.at(gt, ids_flat, g.reshape((-1,) + tail))
        return (gt,)

    return _emit((table,), table.data[ids], bwd)


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error linear unit, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    half_1pt = 0.5 * (1.0 + t)
    out = xd * half_1pt
    # derivative of 0.5 x (1 + tanh(u)), u = c (x + 0.044715 x^3); fused here
    # so the backward pass is a single multiply
    deriv = half_1pt + 0.5 * xd * (1.0 - t * t) * (_GELU_C * (1.0 + 0.134145 * x2))

    def bwd(g: np.ndarray):
        return (g * deriv,)

    return _emit((x,), out, bwd)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g: np.ndarray):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((g - dot) * out,)

    return _emit((x,), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(
            f"layer_norm: gamma/beta must be ({d},), got {gamma.shape} and {beta.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    g_data = gamma.data

    def bwd(g: np.ndarray):
        dxhat = g * g_data
        dx = inv_std * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to_trailing(g * xhat, (d,)), _sum_to_trailing(g, (d,))

    return _emit((x, gamma, beta), xhat * g_data + beta.data, bwd)


def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood of `targets` under `logits`.

    `logits` is [T, V]; positions where `ignore_mask` is true are excluded
    from the mean. Raises if every position is masked or an unmasked target
    falls outside [0, V).
    """
    if logits.ndim != 2:
        raise ShapeMismatchError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    t_count, vocab = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t_count,):
        raise ShapeMismatchError(
            f"cross_entropy: targets shape {targets.shape} does not match logits rows {t_count}")
    if ignore_mask is None:
        keep = np.ones(t_count, dtype=bool)
    else:
        ignore_mask = np.asarray(ignore_mask, dtype=bool)
        if ignore_mask.shape != (t_count,):
            raise ShapeMismatchError(
                f"cross_entropy: mask shape {ignore_mask.shape} does not match logits rows {t_count}")
        keep = ~ignore_mask
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("cross_entropy: every position is masked")
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= vocab:
        raise ValueError(
            f"cross_entropy: target out of range [0, {vocab}): "
            f"min={kept_targets.min()}, max={kept_targets.max()}")

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(t_count)
    nll = lse - shifted[rows, targets.clip(0, vocab - 1)]
    loss = nll[keep].mean()

    def bwd(g: np.ndarray):
        p = np.exp(shifted - lse[:, None])
        p[rows, targets.clip(0, vocab - 1)] -= 1.0
        p[~keep] = 0.0
        return (p * (float(g) / n_keep),)

    return _emit((logits,), np.asarray(loss), bwd)


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay the tape in reverse, populating `.grad` on leaf tensors.

    Each recorded op is visited exactly once. Gradients are overwritten, not
    accumulated across calls.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not any(rec.output is loss for rec in tape.records):
        raise ValueError("backward: loss is not an output recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            leaves[key] = t
    for key, t in leaves.items():
        if key in grads:
            t.grad = grads[key]
