"""Dense tensors with tape-based reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 for training, float64 for
verification). Operations executed while a Tape is active are recorded in
order; Tape.backward replays them in exact reverse order, accumulating
gradients additively into every tensor with requires_grad=True. Frozen
weights (requires_grad=False) are skipped, so adapter-only training prunes
the tape automatically.

Shapes must match exactly for elementwise ops; the only broadcast is the
scalar in `scale`. Batched stacks are handled by explicit ops (matmul over
a leading batch axis, broadcast_batch, reshape, permute) so every backward
rule stays auditable.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, ShapeError

# When True, every op output is checked for NaN/Inf and failures raise.
DEBUG_FINITE = False

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class Tensor:
    """Dense row-major array plus an optional gradient buffer.

    grad is lazily allocated: it exists only once backward() has deposited
    a gradient, and only ever on tensors with requires_grad=True.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Light operator sugar; the functional forms below are the real API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class OpRecord:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs, output, backward_rule):
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered operation log; backward visits records in reverse order."""

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate gradients tape-backwards.

        Every requires_grad tensor reachable from the loss ends up holding
        dLoss/dTensor; contributions from reused tensors add together.
        """
        if loss.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        if loss.grad is None:
            loss.grad = np.zeros((), dtype=loss.data.dtype)
        loss.grad = loss.grad + np.ones((), dtype=loss.data.dtype)
        # Rules return freshly computed arrays, so the first deposit can
        # adopt the array instead of copying; `claimed` guards the case of
        # one array object handed to two tensors (e.g. add's fan-out).
        claimed: set[int] = set()
        for rec in reversed(self.records):
            out_grad = rec.output.grad
            if out_grad is None:
                continue
            for tensor, contribution in rec.backward_rule(out_grad):
                if not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    if id(contribution) in claimed or contribution.dtype != tensor.data.dtype:
                        tensor.grad = np.array(contribution, dtype=tensor.data.dtype)
                    else:
                        claimed.add(id(contribution))
                        tensor.grad = contribution
                else:
                    tensor.grad += contribution


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def backward(loss: Tensor) -> None:
    """Run reverse-mode accumulation from a scalar loss on its tape."""
    if loss._tape is None:
        raise ContractError("loss is not attached to a tape")
    loss._tape.backward(loss)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if DEBUG_FINITE and not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite values produced by {opname}")


def _make_output(data: np.ndarray, inputs: tuple[Tensor, ...], backward_rule, opname: str) -> Tensor:
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    out._tape = None
    tape = active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        tape.records.append(OpRecord(inputs, out, backward_rule))
    return out


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: operand shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def rule(g):
        return ((a, g), (b, g))

    return _make_output(a.data + b.data, (a, b), rule, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def rule(g):
        return ((a, g), (b, -g))

    return _make_output(a.data - b.data, (a, b), rule, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def rule(g):
        return ((a, g * b.data), (b, g * a.data))

    return _make_output(a.data * b.data, (a, b), rule, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def rule(g):
        return ((a, g * c),)

    return _make_output(a.data * np.array(c, dtype=a.data.dtype), (a,), rule, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def rule(g):
        return ((a, g * mask),)

    return _make_output(np.where(mask, a.data, 0).astype(a.data.dtype), (a,), rule, "relu")


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU, the GPT-2 family convention."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_K * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return ((a, g * dx),)

    return _make_output(out, (a,), rule, "gelu")


def log(a: Tensor) -> Tensor:
    """Elementwise natural log; domain x > 0 is the caller's contract."""
    if DEBUG_FINITE and np.any(a.data <= 0):
        raise ContractError("log: non-positive input")
    out = np.log(a.data)

    def rule(g):
        return ((a, g / a.data),)

    return _make_output(out, (a,), rule, "log")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def rule(g):
        return ((a, np.full_like(a.data, g)),)

    return _make_output(out, (a,), rule, "sum_all")


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape

    def rule(g):
        return ((a, g.reshape(old)),)

    return _make_output(a.data.reshape(shape), (a,), rule, "reshape")


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(int(np.argsort(axes)[i]) for i in range(len(axes)))

    def rule(g):
        return ((a, np.ascontiguousarray(g.transpose(inverse))),)

    return _make_output(np.ascontiguousarray(a.data.transpose(axes)), (a,), rule, "permute")


def transpose2d(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose2d: expected 2-d tensor, got shape {a.shape}")
    return permute(a, (1, 0))


def broadcast_batch(a: Tensor, n: int) -> Tensor:
    """Repeat a tensor along a new leading axis; backward sums it back out."""
    if n <= 0:
        raise ShapeError(f"broadcast_batch: batch size {n} must be positive")
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()

    def rule(g):
        return ((a, g.sum(axis=0)),)

    return _make_output(out, (a,), rule, "broadcast_batch")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch axis.

    Accepted forms: (n,k)@(k,m), (B,n,k)@(k,m), (B,n,k)@(B,k,m).
    Reduction order is numpy's fixed row-major loop, so results are
    bit-stable for identical inputs.
    """
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")

        def rule(g):
            return ((a, g @ bd.T), (b, ad.T @ g))

        out = ad @ bd

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
        # One big 2-d product beats a loop over the batch axis.
        bsz, n, k = ad.shape
        flat = ad.reshape(bsz * n, k)

        def rule(g):
            g2 = g.reshape(bsz * n, -1)
            return ((a, (g2 @ bd.T).reshape(ad.shape)), (b, flat.T @ g2))

        out = (flat @ bd).reshape(bsz, n, bd.shape[1])

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError(f"matmul: incompatible batched shapes {a.shape} and {b.shape}")

        def rule(g):
            return ((a, g @ bd.transpose(0, 2, 1)), (b, ad.transpose(0, 2, 1) @ g))

        out = ad @ bd

    else:
        raise ShapeError(f"matmul: unsupported ranks for shapes {a.shape} and {b.shape}")

    return _make_output(out, (a, b), rule, "matmul")


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embed: id out of range for table with {table.shape[0]} rows")

    def rule(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return ((table, dt),)

    return _make_output(table.data[ids], (table,), rule, "embed")


# ---------------------------------------------------------------------------
# normalization and losses

_CAUSAL_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(t: int) -> np.ndarray:
    mask = _CAUSAL_MASKS.get(t)
    if mask is None:
        mask = np.tril(np.ones((t, t), dtype=bool))
        _CAUSAL_MASKS[t] = mask
    return mask


def softmax_last(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability.

    With causal=True the last two axes must be square (T, T) and entry
    (i, j) for j > i is excluded (weight 0): position i attends to <= i.
    """
    data = x.data
    if causal:
        if data.ndim < 2 or data.shape[-1] != data.shape[-2]:
            raise ShapeError(f"softmax_last(causal): last two dims must be square, got {x.shape}")
        t = data.shape[-1]
        e = np.where(_causal_mask(t), data, -np.inf)
        e -= e.max(axis=-1, keepdims=True)
        np.exp(e, out=e)
    else:
        e = data - data.max(axis=-1, keepdims=True)
        np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    out = e

    def rule(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return ((x, (g - dot) * out),)

    return _make_output(out, (x,), rule, "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-d tensor, got shape {x.shape}")
    return softmax_last(x, causal=False)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero mean / unit variance over the last axis, then affine."""
    if eps <= 0:
        raise ContractError(f"layernorm: eps must be positive, got {eps}")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        axes = tuple(range(x.data.ndim - 1))
        dgain = (g * xhat).sum(axis=axes)
        dbias = g.sum(axis=axes)
        gy = g * gain.data
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True) - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        return ((x, dx.astype(g.dtype)), (gain, dgain), (bias, dbias))

    return _make_output(out.astype(x.data.dtype), (x, gain, bias), rule, "layernorm")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over rows (optionally masked).

    mask, when given, is a 0/1 row weight; the mean runs over mask weight.
    Backward is (softmax - onehot) * mask_row / sum(mask).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (n, vocab) logits, got shape {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} does not match {n} rows")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ContractError(f"cross_entropy: target index out of range for vocab {v}")
    if mask is None:
        weights = np.ones(n, dtype=logits.data.dtype)
    else:
        weights = np.asarray(mask, dtype=logits.data.dtype)
        if weights.shape != (n,):
            raise ShapeError(f"cross_entropy: mask shape {weights.shape} does not match {n} rows")
    total = weights.sum()
    if total <= 0:
        raise ContractError("cross_entropy: mask selects no rows")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), targets]
    out = np.asarray((nll * weights).sum() / total, dtype=logits.data.dtype)

    def rule(g):
        probs = np.exp(shifted - lse[:, None])
        probs[np.arange(n), targets] -= 1.0
        probs *= (weights / total)[:, None]
        return ((logits, probs * g),)

    return _make_output(out, (logits,), rule, "cross_entropy")
