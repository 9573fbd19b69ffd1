"""Dense float32 tensor kernels with reverse-mode gradients.

Only the operations a small decoder-only transformer needs are
differentiable; there is no general graph optimizer. Tensors are 1-D
vectors or 2-D row-major matrices (losses are 0-d scalars). Every
reduction delegates to numpy's C-order accumulation, so identical
inputs produce bit-identical outputs within one environment.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "EmptyMaskError",
    "matmul",
    "transpose",
    "add",
    "add_bias",
    "mul",
    "scale",
    "sum_all",
    "slice_cols",
    "concat_cols",
    "silu",
    "softmax_rows",
    "causal_softmax_rows",
    "rmsnorm_rows",
    "rope_rotate_array",
    "rope_rotate",
    "embedding",
    "cross_entropy_masked",
    "RMSNORM_EPS",
]

RMSNORM_EPS = 1e-6


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


class EmptyMaskError(ValueError):
    """A loss mask selected no positions."""


GradFn = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """A float32 array plus an optional place in the backward graph.

    Values are immutable after construction by convention: kernels
    produce new tensors and never write into an operand's ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fns")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fns: tuple[GradFn, ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable parent.

        Traversal order is a fixed topological order, so repeated runs
        accumulate in the same sequence.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, fn in zip(node._parents, node._grad_fns):
                if not parent.requires_grad:
                    continue
                contrib = fn(g)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib
            if node is not self and not isinstance(node, Parameter):
                node.grad = None
                node._parents = ()
                node._grad_fns = ()


class Parameter(Tensor):
    """A tensor with a persistent gradient accumulator.

    Frozen parameters (``trainable=False``) keep a zero gradient buffer:
    backward never routes gradient into them.
    """

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fns: tuple[GradFn, ...]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._grad_fns = fns
    return out


def _require_2d(x: Tensor, op: str) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{op} requires a 2-D tensor, got shape {x.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """c = a @ b for 2-D operands; grads are g@b^T and a^T@g."""
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents disagree, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), (lambda g: g @ bd.T, lambda g: ad.T @ g))


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")
    return _make(x.data.T.copy(), (x,), (lambda g: g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes disagree, {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add of a length-d bias onto an [T, d] matrix."""
    _require_2d(x, "add_bias")
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match columns of {x.shape}")
    return _make(x.data + b.data, (x, b), (lambda g: g, lambda g: g.sum(axis=0)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes disagree, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), (lambda g: g * bd, lambda g: g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * np.float32(c), (x,), (lambda g: g * np.float32(c),))


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=np.float32)
    return _make(out, (x,), (lambda g: np.broadcast_to(g, x.data.shape).astype(np.float32),))


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) of a matrix; backward scatters into the full width."""
    _require_2d(x, "slice_cols")
    if not 0 <= lo < hi <= x.shape[1]:
        raise ShapeError(f"slice_cols[{lo}:{hi}] invalid for shape {x.shape}")

    def grad(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(x.data)
        full[:, lo:hi] = g
        return full

    return _make(x.data[:, lo:hi].copy(), (x,), (grad,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along columns."""
    if not parts:
        raise ShapeError("concat_cols needs at least one part")
    for p in parts:
        _require_2d(p, "concat_cols")
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts disagree, {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def make_grad(i: int) -> GradFn:
        lo, hi = int(offsets[i]), int(offsets[i + 1])
        return lambda g: g[:, lo:hi]

    data = np.concatenate([p.data for p in parts], axis=1)
    return _make(data, tuple(parts), tuple(make_grad(i) for i in range(len(parts))))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x), the gating nonlinearity of the feed-forward blocks."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig
    return _make(out, (x,), (lambda g: g * (sig * (1.0 + x.data * (1.0 - sig))),))


def _softmax_data(x: np.ndarray) -> np.ndarray:
    # max-subtraction keeps exp in range; -inf rows entries become exact zeros
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_grad(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax; each output row is nonnegative and sums to 1."""
    _require_2d(x, "softmax_rows")
    y = _softmax_data(x.data)
    return _make(y, (x,), (lambda g: _softmax_grad(y, g),))


def causal_softmax_rows(x: Tensor) -> Tensor:
    """Softmax over a square score matrix where row t sees columns <= t.

    Future columns get exactly zero weight (masked with -inf before the
    stabilized exp), so position t's output never depends on tokens
    after t.
    """
    _require_2d(x, "causal_softmax_rows")
    t, s = x.shape
    if t != s:
        raise ShapeError(f"causal_softmax_rows requires a square matrix, got {x.shape}")
    masked = np.where(np.tri(t, dtype=bool), x.data, np.float32(-np.inf))
    y = _softmax_data(masked)
    return _make(y, (x,), (lambda g: _softmax_grad(y, g),))


def rmsnorm_rows(x: Tensor, gain: Tensor) -> Tensor:
    """Root-mean-square normalization of each row, scaled by a gain vector."""
    _require_2d(x, "rmsnorm_rows")
    if gain.data.ndim != 1 or gain.shape[0] != x.shape[1]:
        raise ShapeError(f"rmsnorm_rows: gain {gain.shape} does not match columns of {x.shape}")
    xd, gd = x.data, gain.data
    n = xd.shape[1]
    inv_rms = 1.0 / np.sqrt((xd * xd).mean(axis=1, keepdims=True) + np.float32(RMSNORM_EPS))
    xn = xd * inv_rms
    out = xn * gd

    def grad_x(g: np.ndarray) -> np.ndarray:
        gg = g * gd
        dot = (gg * xd).sum(axis=1, keepdims=True)
        return inv_rms * gg - xd * (inv_rms**3) * (dot / np.float32(n))

    def grad_gain(g: np.ndarray) -> np.ndarray:
        return (g * xn).sum(axis=0)

    return _make(out, (x, gain), (grad_x, grad_gain))


def rope_rotate_array(
    x: np.ndarray, pos_offset: int = 0, base: float = 10000.0, inverse: bool = False
) -> np.ndarray:
    """Rotate interleaved (even, odd) column pairs of x by position-dependent angles.

    Row t uses absolute position ``pos_offset + t``. ``inverse`` applies the
    transpose rotation, which is also the backward map.
    """
    t, d = x.shape
    if d % 2:
        raise ShapeError(f"rotary rotation requires an even width, got {d}")
    half = d // 2
    inv_freq = np.float64(base) ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
    ang = (pos_offset + np.arange(t, dtype=np.float64))[:, None] * inv_freq[None, :]
    cos = np.cos(ang).astype(np.float32)
    sin = np.sin(ang).astype(np.float32)
    if inverse:
        sin = -sin
    x1, x2 = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = x1 * cos - x2 * sin
    out[:, 1::2] = x1 * sin + x2 * cos
    return out


def rope_rotate(x: Tensor, pos_offset: int = 0, base: float = 10000.0) -> Tensor:
    _require_2d(x, "rope_rotate")
    out = rope_rotate_array(x.data, pos_offset, base)
    return _make(out, (x,), (lambda g: rope_rotate_array(g, pos_offset, base, inverse=True),))


def embedding(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of an embedding table; backward scatter-adds into it."""
    _require_2d(table, "embedding")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding ids must be a flat sequence")
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise IndexError(f"embedding id out of range for table with {v} rows")
    out = table.data[idx]

    def grad_table(g: np.ndarray) -> np.ndarray:
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx, g)
        return acc

    return _make(out, (table,), (grad_table,))


def cross_entropy_masked(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """Mean of -log softmax(logits[t])[targets[t]] over masked positions.

    Fuses log-softmax so large logits cannot cancel catastrophically.
    Unmasked positions contribute no loss and receive zero gradient.
    """
    _require_2d(logits, "cross_entropy_masked")
    t, v = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    msk = np.asarray(mask, dtype=bool)
    if tgt.shape != (t,) or msk.shape != (t,):
        raise ShapeError(
            f"cross_entropy_masked: targets/mask length must equal {t} rows, "
            f"got {tgt.shape} and {msk.shape}"
        )
    if not msk.any():
        raise EmptyMaskError("cross_entropy_masked: mask selects no positions")
    if tgt.min() < 0 or tgt.max() >= v:
        raise IndexError(f"target id out of range for vocab size {v}")
    ld = logits.data
    m = np.max(ld, axis=1, keepdims=True)
    z = ld - m
    lse = m[:, 0] + np.log(np.exp(z).sum(axis=1))
    rows = np.arange(t)
    per_pos = lse - ld[rows, tgt]
    count = int(msk.sum())
    loss = np.asarray(per_pos[msk].sum() / np.float32(count), dtype=np.float32)

    def grad_logits(g: np.ndarray) -> np.ndarray:
        p = _softmax_data(ld)
        p[rows, tgt] -= 1.0
        p[~msk] = 0.0
        return p * (g / np.float32(count))

    return _make(loss, (logits,), (grad_logits,))
