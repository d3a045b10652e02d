"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure propagating the upstream gradient into them.
:func:`backward` linearises the graph into a :class:`Tape` (topological order)
and replays it in reverse.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

DTYPE = np.float64

# Incremented whenever a softmax row has no finite logit (all keys masked).
diagnostics: Counter = Counter()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its preconditions."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def detach(self):
        return Tensor(self.data.copy())

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, scalar):
        return mul_scalar(self, scalar)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op):
    """Wrap `data`; record the backward closure only if some parent needs grad."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_same(a, b, name):
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise

def add(a, b):
    """Sum of two tensors; ``b`` may be a constant array broadcast onto ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.shape))

    return _result(out, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a.accumulate(g)
        if b.requires_grad:
            b.accumulate(-g)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul_scalar(x, c):
    x = as_tensor(x)
    c = float(c)

    def backward(g):
        x.accumulate(g * c)

    return _result(x.data * c, (x,), backward, "mul_scalar")


def mul_const(x, const):
    """Elementwise product with a constant array (dropout masks)."""
    x = as_tensor(x)
    const = np.asarray(const, dtype=DTYPE)

    def backward(g):
        x.accumulate(_unbroadcast(g * const, x.shape))

    return _result(x.data * const, (x,), backward, "mul_const")


def relu(x):
    x = as_tensor(x)
    on = x.data > 0

    def backward(g):
        x.accumulate(g * on)

    return _result(np.where(on, x.data, 0.0), (x,), backward, "relu")


def mean_all(x):
    x = as_tensor(x)
    n = x.size

    def backward(g):
        x.accumulate(np.full(x.shape, float(g) / n))

    return _result(np.array(x.data.mean()), (x,), backward, "mean_all")


def sum_all(x):
    x = as_tensor(x)

    def backward(g):
        x.accumulate(np.full(x.shape, float(g)))

    return _result(np.array(x.data.sum()), (x,), backward, "sum_all")


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(x, shape):
    x = as_tensor(x)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from exc

    def backward(g):
        x.accumulate(g.reshape(x.shape))

    return _result(out, (x,), backward, "reshape")


def transpose(x, axes=()):
    x = as_tensor(x)
    axes = tuple(axes) or tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        x.accumulate(g.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), backward, "transpose")


def take(x, index):
    """Basic (slice) indexing; gradient is scattered back into the source."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[index] = g
        x.accumulate(full)

    return _result(x.data[index], (x,), backward, "take")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b):
    """Matrix product of rank-2 operands, or batched over one leading axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul: batch extents of {a.shape} and {b.shape} differ")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` along the last axis of ``x`` (any leading shape)."""
    x = as_tensor(x)
    n_out, n_in = weight.shape
    if x.shape[-1] != n_in:
        raise DimensionError(f"linear: input {x.shape} does not end in {n_in} (weight {weight.shape})")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if x.requires_grad:
            x.accumulate(g @ weight.data)
        g2 = g.reshape(-1, n_out)
        if weight.requires_grad:
            weight.accumulate(g2.T @ x.data.reshape(-1, n_in))
        if bias is not None and bias.requires_grad:
            bias.accumulate(g2.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# normalisation

def softmax_lastdim(x, additive_mask=None):
    """Numerically stable softmax over the last axis.

    ``additive_mask`` is a constant array broadcast onto ``x``; entries of
    ``-inf`` get weight exactly zero. A row with no finite entry yields zeros
    and bumps ``diagnostics["all_masked_rows"]``.
    """
    x = as_tensor(x)
    z = x.data
    if additive_mask is not None:
        mask = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(additive_mask, DTYPE)
        try:
            z = z + mask
        except ValueError as exc:
            raise DimensionError(f"softmax: mask {mask.shape} does not broadcast to {x.shape}") from exc
    peak = z.max(axis=-1, keepdims=True)
    dead = ~np.isfinite(peak)
    if dead.any():
        diagnostics["all_masked_rows"] += int(dead.sum())
        peak = np.where(dead, 0.0, peak)
    e = np.exp(z - peak)
    total = e.sum(axis=-1, keepdims=True)
    y = e / np.where(total == 0.0, 1.0, total)

    def backward(g):
        x.accumulate(y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward, "softmax")


def layer_norm(x, gain, offset, eps):
    """Normalise the last axis to zero mean / unit biased variance, then scale and shift."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d == 0:
        raise ContractError("layer_norm: feature dimension is 0")
    if gain.shape != (d,) or offset.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape} vs parameters {gain.shape}/{offset.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std
    out = xhat * gain.data + offset.data

    def backward(g):
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if offset.requires_grad:
            offset.accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x.accumulate(inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return _result(out, (x, gain, offset), backward, "layer_norm")


# ---------------------------------------------------------------------------
# lookups and losses

def embedding(table, ids, scale=1.0, padding_idx=None):
    """Row lookup ``table[ids] * scale``; the padding row never receives gradient."""
    ids = np.asarray(ids)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = np.argwhere((ids < 0) | (ids >= rows))[0]
        raise IndexError(f"embedding: token id {int(ids[tuple(bad)])} at position {tuple(int(i) for i in bad)} "
                         f"is outside the vocabulary of {rows}")

    def backward(g):
        gt = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]) * scale)
        if padding_idx is not None:
            gt[padding_idx] = 0.0
        table.accumulate(gt)

    return _result(table.data[ids] * scale, (table,), backward, "embedding")


def mse(pred, target):
    """Mean over all elements of the squared residual."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    r = pred.data - target

    def backward(g):
        pred.accumulate(float(g) * 2.0 * r / r.size)

    return _result(np.array((r * r).mean()), (pred,), backward, "mse")


def cross_entropy(logits, targets, ignore_index=None):
    """Mean negative log-likelihood over positions whose target is not ignored."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    z = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    keep = np.ones(t.shape, dtype=bool) if ignore_index is None else t != ignore_index
    n = int(keep.sum())
    if np.any(t[keep] >= v) or np.any(t[keep] < 0):
        raise IndexError(f"cross_entropy: target ids must lie in [0, {v})")
    if n == 0:
        return _result(np.array(0.0), (logits,), lambda g: logits.accumulate(np.zeros(logits.shape)), "cross_entropy")
    peak = z.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(z - peak).sum(axis=1))
    rows = np.nonzero(keep)[0]
    nll = lse[rows] - z[rows, t[rows]]
    value = nll.sum() / n

    def backward(g):
        grad = np.zeros_like(z)
        p = np.exp(z[rows] - lse[rows, None])
        p[np.arange(rows.size), t[rows]] -= 1.0
        grad[rows] = p * (float(g) / n)
        logits.accumulate(grad.reshape(logits.shape))

    return _result(np.array(value), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass

class Tape:
    """Operations reachable from a root, in the order they were executed."""

    def __init__(self, nodes):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def record(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, root):
        """Run every recorded backward closure once, newest first.

        Intermediate nodes hold their gradient on ``.grad`` only until their
        closure has run; leaves keep (and accumulate) theirs.
        """
        if root._backward is None:
            root.accumulate(np.ones(root.shape, dtype=DTYPE))
            return
        root.grad = np.ones(root.shape, dtype=DTYPE)
        for node in reversed(self.nodes):
            if node._backward is None:
                continue
            g, node.grad = node.grad, None
            if g is not None:
                node._backward(g)


def backward(loss):
    """Populate ``.grad`` of every requires-grad leaf reachable from a scalar ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([])
    tape = Tape.record(loss)
    tape.replay(loss)
    return tape
