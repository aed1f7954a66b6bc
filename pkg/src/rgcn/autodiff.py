"""Minimal reverse-mode differentiation over dense matrices.

Tensors wrap 2-D float arrays (losses are rank-0). Operations executed
while a Tape is active append backward closures to it; Tape.backward
replays them in exact reverse order, accumulating vector-Jacobian products
into every reachable tensor that requires gradients. With no active tape,
every primitive is a plain forward computation.

The primitive set is deliberately narrow — just what relational graph
convolution models and their losses need — so each backward rule can be
tested exhaustively against finite differences. There is no broadcasting;
shape mismatches raise ShapeError.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit


class ShapeError(ValueError):
    """Operands with incompatible shapes."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.shapes = shapes


class Tensor:
    """Dense real matrix (or rank-0 scalar) with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        if arr.ndim not in (0, 2):
            raise ShapeError("Tensor", arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, delta: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += delta

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, name: str = "tensor") -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"{name} contains NaN/Inf")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


_ACTIVE = threading.local()


def _tape_stack() -> list:
    if not hasattr(_ACTIVE, "stack"):
        _ACTIVE.stack = []
    return _ACTIVE.stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives for one backward replay."""

    def __init__(self):
        self._records: list[Callable[[], None]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._records)

    def record(self, backward: Callable[[], None]) -> None:
        self._records.append(backward)

    def backward(self, loss: Tensor) -> None:
        """Populate grads of every tensor the scalar `loss` depends on.

        Repeated calls without zero_grad accumulate.
        """
        if loss.data.shape != ():
            raise ShapeError("backward expects a scalar loss", loss.data.shape)
        loss.accumulate_grad(np.ones((), dtype=loss.data.dtype))
        for backward_fn in reversed(self._records):
            backward_fn()


def _register(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    """Mark `out` differentiable and record `backward` if a tape is active."""
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is not None and out.requires_grad:
        def guarded():
            if out.grad is not None:
                backward()
        tape.record(guarded)
    return out


def scatter_add_rows(acc: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """acc[idx[k]] += rows[k], with duplicate indices summed."""
    if len(idx) < 4096:
        np.add.at(acc, idx, rows)
        return
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    srows = rows[order]
    starts = np.concatenate(([0], np.flatnonzero(np.diff(sidx)) + 1))
    acc[sidx[starts]] += np.add.reduceat(srows, starts, axis=0)


class SparseMatrix:
    """Constant sparse adjacency operand with a cached transpose."""

    def __init__(self, matrix):
        self.csr = matrix.tocsr()
        self._transpose: Optional[sp.csr_matrix] = None

    @classmethod
    def from_edges(cls, shape, rows, cols, values) -> "SparseMatrix":
        coo = sp.coo_matrix((np.asarray(values, dtype=np.float64),
                             (np.asarray(rows), np.asarray(cols))), shape=shape)
        return cls(coo.tocsr())

    @property
    def shape(self):
        return self.csr.shape

    @property
    def T(self) -> sp.csr_matrix:
        if self._transpose is None:
            self._transpose = self.csr.T.tocsr()
        return self._transpose

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()


# --- primitives ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, transpose_a: bool = False, transpose_b: bool = False) -> Tensor:
    am = a.data.T if transpose_a else a.data
    bm = b.data.T if transpose_b else b.data
    if am.ndim != 2 or bm.ndim != 2 or am.shape[1] != bm.shape[0]:
        raise ShapeError("matmul", am.shape, bm.shape)
    out = Tensor(am @ bm)

    def backward():
        g = out.grad
        if a.requires_grad:
            da = g @ bm.T
            a.accumulate_grad(da.T if transpose_a else da)
        if b.requires_grad:
            db = am.T @ g
            b.accumulate_grad(db.T if transpose_b else db)
    return _register(out, (a, b), backward)


def sparse_matmul(a: SparseMatrix, h: Tensor) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    if a.shape[1] != h.data.shape[0]:
        raise ShapeError("sparse_matmul", a.shape, h.data.shape)
    out = Tensor(a.csr @ h.data)

    def backward():
        h.accumulate_grad(a.T @ out.grad)
    return _register(out, (h,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError("add", a.data.shape, b.data.shape)
    out = Tensor(a.data + b.data)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(out.grad)
    return _register(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    out = Tensor(a.data * factor)

    def backward():
        a.accumulate_grad(out.grad * factor)
    return _register(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))

    def backward():
        a.accumulate_grad(out.grad * (a.data > 0))
    return _register(out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    out = Tensor(s)

    def backward():
        a.accumulate_grad(out.grad * s * (1.0 - s))
    return _register(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def backward():
        a.accumulate_grad(out.grad / a.data)
    return _register(out, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)

    def backward():
        g = out.grad
        a.accumulate_grad(p * (g - (g * p).sum(axis=1, keepdims=True)))
    return _register(out, (a,), backward)


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError("elementwise_mul", a.data.shape, b.data.shape)
    out = Tensor(a.data * b.data)

    def backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * b.data)
        if b.requires_grad:
            b.accumulate_grad(out.grad * a.data)
    return _register(out, (a, b), backward)


def row_scale(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scale each row of `a` by a constant per-row weight."""
    w = np.asarray(weights, dtype=a.data.dtype)
    if w.ndim != 1 or w.shape[0] != a.data.shape[0]:
        raise ShapeError("row_scale", a.data.shape, w.shape)
    out = Tensor(a.data * w[:, None])

    def backward():
        a.accumulate_grad(out.grad * w[:, None])
    return _register(out, (a,), backward)


def row_gather(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx])

    def backward():
        delta = np.zeros_like(a.data)
        scatter_add_rows(delta, idx, out.grad)
        a.accumulate_grad(delta)
    return _register(out, (a,), backward)


def pick(a: Tensor, rows, cols) -> Tensor:
    """Gather single entries a[rows[k], cols[k]] as an (n, 1) tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape:
        raise ShapeError("pick", rows.shape, cols.shape)
    out = Tensor(a.data[rows, cols][:, None])

    def backward():
        delta = np.zeros_like(a.data)
        np.add.at(delta, (rows, cols), out.grad[:, 0])
        a.accumulate_grad(delta)
    return _register(out, (a,), backward)


def block_diag_apply(blocks: Sequence[Tensor], h: Tensor) -> Tensor:
    """h @ W^T for W = diag(blocks), without materializing W.

    Every block is (out_b, in_b) with identical shapes; h has B*in_b columns.
    """
    num_blocks = len(blocks)
    out_b, in_b = blocks[0].data.shape
    for q in blocks:
        if q.data.shape != (out_b, in_b):
            raise ShapeError("block_diag_apply blocks", q.data.shape, (out_b, in_b))
    if h.data.shape[1] != num_blocks * in_b:
        raise ShapeError("block_diag_apply", h.data.shape, (num_blocks, in_b))
    n = h.data.shape[0]
    h3 = h.data.reshape(n, num_blocks, in_b)
    stacked = np.stack([q.data for q in blocks])  # (B, out_b, in_b)
    out3 = np.einsum("nbi,boi->nbo", h3, stacked)
    out = Tensor(out3.reshape(n, num_blocks * out_b))

    def backward():
        g3 = out.grad.reshape(n, num_blocks, out_b)
        if h.requires_grad:
            h.accumulate_grad(np.einsum("nbo,boi->nbi", g3, stacked).reshape(n, -1))
        for b, q in enumerate(blocks):
            if q.requires_grad:
                q.accumulate_grad(np.einsum("no,ni->oi", g3[:, b], h3[:, b]))
    return _register(out, tuple(blocks) + (h,), backward)


def row_sum(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(axis=1, keepdims=True))

    def backward():
        a.accumulate_grad(np.broadcast_to(out.grad, a.data.shape))
    return _register(out, (a,), backward)


def tensor_sum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype))

    def backward():
        a.accumulate_grad(np.full_like(a.data, out.grad))
    return _register(out, (a,), backward)


def l2_norm_sq(a: Tensor) -> Tensor:
    out = Tensor(np.asarray((a.data * a.data).sum(), dtype=a.data.dtype))

    def backward():
        a.accumulate_grad(2.0 * a.data * out.grad)
    return _register(out, (a,), backward)


def sigmoid_cross_entropy_sum(logits: Tensor, targets) -> Tensor:
    """Sum over entries of -[y log sigma(f) + (1-y) log(1 - sigma(f))].

    Stable softplus form; `targets` is a constant 0/1 array shaped like
    `logits`. Backward is sigma(f) - y.
    """
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.data.shape:
        raise ShapeError("sigmoid_cross_entropy_sum", logits.data.shape, y.shape)
    f = logits.data
    per_element = np.logaddexp(0.0, f) - f * y
    out = Tensor(np.asarray(per_element.sum(), dtype=f.dtype))

    def backward():
        logits.accumulate_grad((expit(f) - y) * out.grad)
    return _register(out, (logits,), backward)


def register_op(out: Tensor, inputs: Sequence[Tensor], backward: Callable[[], None]) -> Tensor:
    """Extension hook: register a custom primitive with an exact VJP."""
    return _register(out, inputs, backward)


# --- gradient verification ---------------------------------------------------

def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                            step: float = 1e-5, max_coords_per_param: int = 25,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic grads of f() and central differences.

    `f` must be a deterministic closure over `params` (dropout off or
    seed-pinned). Error per coordinate is |analytic - fd| / max(1, |fd|);
    coordinates are sampled when a parameter is large.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    analytic = [np.array(p.grad) if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        n = p.data.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            where = np.unravel_index(c, p.data.shape)
            original = p.data[where]
            p.data[where] = original + step
            up = float(f().data)
            p.data[where] = original - step
            down = float(f().data)
            p.data[where] = original
            fd = (up - down) / (2.0 * step)
            err = abs(grad[where] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
