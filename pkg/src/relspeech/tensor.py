"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array. While a ``Tape`` is active,
every operation appends a record (output node, parent nodes, backward
closure) in creation order; ``Tape.backward`` replays the records in
exact reverse order, accumulating gradients into ``Tensor.grad``.
Outside a tape, operations compute values only, which is what inference
uses.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class ConfigError(ValueError):
    """Invalid hyperparameter or mode."""


_ACTIVE_TAPE = None
_NODE_COUNTER = 0


class Tensor:
    __slots__ = ("data", "grad", "node_id")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"empty dimension in shape {arr.shape}")
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        global _NODE_COUNTER
        self.data = arr
        self.grad = None
        _NODE_COUNTER += 1
        self.node_id = _NODE_COUNTER

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def grad_or_zeros(self) -> np.ndarray:
        return self.grad if self.grad is not None else np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, id={self.node_id})"

    # arithmetic builds the graph; see module-level ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, neg_of(other))

    def __rsub__(self, other):
        return add(neg_of(self), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of one forward pass, replayed in reverse for gradients.

    Single-writer: one forward/backward pass owns a tape exclusively.
    Gradients accumulate (``+=``) into ``Tensor.grad``, so parameters
    shared across several tapes collect summed gradients until cleared.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        global _ACTIVE_TAPE
        self._previous = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._previous
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, parents, backward_fn) -> None:
        self._records.append((out, parents, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) to every node recorded on this tape.

        ``loss`` must be a scalar. Nodes reachable from the loss receive
        gradients; leaves that never contributed keep ``grad=None`` (read
        them through ``grad_or_zeros``).
        """
        if loss.data.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        loss.accumulate_grad(np.ones((), dtype=np.float64))
        for out, _parents, backward_fn in reversed(self._records):
            if out.grad is not None:
                backward_fn(out.grad)

    def clear_grads(self) -> None:
        for out, parents, _fn in self._records:
            out.grad = None
            for p in parents:
                p.grad = None


def _emit(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def neg_of(x):
    if isinstance(x, Tensor):
        return scale(x, -1.0)
    return -x


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=np.float64))
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return _emit(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def backward(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _emit(data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        a.accumulate_grad(g * s)

    return _emit(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or stacked 3-D operands (equal batch)."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    else:
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.ndim == 2:
            a.accumulate_grad(g @ b.data.T)
            b.accumulate_grad(a.data.T @ g)
        else:
            a.accumulate_grad(np.matmul(g, b.data.transpose(0, 2, 1)))
            b.accumulate_grad(np.matmul(a.data.transpose(0, 2, 1), g))

    return _emit(data, (a, b), backward)


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a.accumulate_grad(g.transpose(inverse))

    return _emit(a.data.transpose(axes), (a,), backward)


def transpose2d(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose2d: expected matrix, got shape {a.shape}")
    return permute(a, (1, 0))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    in_shape = a.shape

    def backward(g):
        a.accumulate_grad(g.reshape(in_shape))

    return _emit(a.data.reshape(shape), (a,), backward)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at exactly 0 is 0."""
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0.0))

    return _emit(data, (a,), backward)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise softmax over the last axis, numerically stabilized.

    ``mask`` is a boolean array broadcastable to ``a`` (True = keep).
    Masked entries come out exactly 0; a fully masked row is an error
    because it would describe an empty attention context.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: fully masked row")
        x = np.where(mask, x, -1e9)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        a.accumulate_grad(y * (g - inner))

    return _emit(y, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    soft = np.exp(y)

    def backward(g):
        a.accumulate_grad(g - soft * g.sum(axis=-1, keepdims=True))

    return _emit(y, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then elementwise affine."""
    if eps <= 0.0:
        raise ConfigError(f"layer_norm: eps must be > 0, got {eps}")
    d = a.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm: last axis must have >= 2 entries, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        gain.accumulate_grad((g * xhat).sum(axis=reduce_axes))
        bias.accumulate_grad(g.sum(axis=reduce_axes))
        gx = g * gain.data
        mean_gx = gx.mean(axis=-1, keepdims=True)
        mean_gx_xhat = (gx * xhat).mean(axis=-1, keepdims=True)
        a.accumulate_grad(inv * (gx - mean_gx - xhat * mean_gx_xhat))

    return _emit(data, (a, gain, bias), backward)


def apply_dropout_mask(x: Tensor, mask: np.ndarray | None, p: float) -> Tensor:
    """Inverted dropout with an externally sampled keep-mask.

    Kept entries are scaled by 1/(1-p) so evaluation (``mask=None``) is
    the identity. A [D] mask broadcasts over leading axes, zeroing the
    same feature columns at every time step (shared-mask dropout).
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if mask is None:
        return x
    keep = np.asarray(mask, dtype=np.float64) / (1.0 - p)
    return mul(x, Tensor(keep))


def embed_rows(weight: Tensor, ids) -> Tensor:
    """Look up rows of ``weight`` [V x D] by integer id; grads scatter-add."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.ndim != 1:
        raise ShapeError(f"embed_rows: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError(
            f"embed_rows: id out of range [0, {weight.shape[0]}): {ids.min()}..{ids.max()}"
        )
    data = weight.data[ids]

    def backward(g):
        if weight.grad is None:
            weight.grad = np.zeros_like(weight.data)
        np.add.at(weight.grad, ids, g)

    return _emit(data, (weight,), backward)


def take_per_row(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a matrix ``a``; grads scatter-add."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    data = a.data[rows, idx]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (rows, idx), g)

    return _emit(data, (a,), backward)


def take_last_axis(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis of a [H x K x L] tensor with a [K x J] index.

    out[h, i, j] = a[h, i, idx[i, j]]. Pure re-indexing; the backward
    pass scatter-adds, so repeated indices accumulate correctly.
    """
    idx = np.asarray(idx, dtype=np.intp)
    h, k, _l = a.shape
    rows = np.arange(k)[:, None]
    data = a.data[:, rows, idx]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        heads = np.arange(h)[:, None, None]
        np.add.at(a.grad, (heads, rows[None, :, :], idx[None, :, :]), g)

    return _emit(data, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        a.accumulate_grad(np.full(a.shape, g, dtype=np.float64))

    return _emit(a.data.sum(), (a,), backward)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    """Glorot-uniform initialized parameter tensor."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=shape))


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape))
