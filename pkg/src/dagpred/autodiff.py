"""A small reverse-mode differentiation engine over float64 numpy arrays.

Only the primitives the predictor needs are provided. Every primitive
returns a new :class:`Tensor` whose ``_backward`` closure maps the output
adjoint to one adjoint per parent. :func:`backward` builds a
:class:`Tape` (reverse topological order) and visits each record once.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import (
    DetachedGraph,
    EmptyRowMask,
    NonDeterministicFunction,
    NonFinite,
    NotScalar,
    ShapeMismatch,
)

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeMismatch(f"tensors are limited to rank 3, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: tuple, backward_fn, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_finite(x: np.ndarray, what: str):
    if not np.isfinite(x).all():
        raise NonFinite(f"non-finite values produced by {what}")


# --- primitives ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim == 3 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape ``(N, k)``; the bias is optional."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"linear of {x.shape} and {w.shape}")
    out = x.data @ w.data
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeMismatch(f"bias shape {b.shape} for output width {w.shape[1]}")
        out += b.data
        parents = (x, w, b)

    def bw(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return _result(out, parents, bw, "linear")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), bw, "add")


def hadamard(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _result(out, (a, b), bw, "hadamard")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _result(out, (a,), lambda g: (g * (out > 0),), "relu")


def concat_cols(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape[:-1] for t in ts}) != 1:
        raise ShapeMismatch(f"concat_cols of {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in ts])

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] if t.requires_grad else None
                     for i, t in enumerate(ts))

    return _result(out, tuple(ts), bw, "concat_cols")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatch("transpose needs rank >= 2")
    return _result(np.swapaxes(a.data, -1, -2), (a,),
                   lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean())
    _check_finite(out, "mean")
    return _result(out, (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def dropout(a, p: float, train: bool, seed=None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``.

    ``seed`` may be an int or a ``numpy.random.Generator`` (consumed in place).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    a = as_tensor(a)
    if not train or p == 0.0:
        return a
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then apply the affine pair."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm affine shapes {gamma.shape}, {beta.shape} for width {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ga = None
        if a.requires_grad:
            gh = g * gamma.data
            ga = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (ga,
                (g * xhat).sum(axis=lead) if gamma.requires_grad else None,
                g.sum(axis=lead) if beta.requires_grad else None)

    return _result(out, (a, gamma, beta), bw, "layer_norm")


def aggregate(matrix, x) -> Tensor:
    """Left-multiply ``x`` by a constant (dense or scipy-sparse) matrix."""
    x = as_tensor(x)
    if matrix.shape[1] != x.shape[0] or x.ndim != 2:
        raise ShapeMismatch(f"aggregate of {matrix.shape} and {x.shape}")
    out = np.asarray(matrix @ x.data)
    mt = matrix.T
    return _result(out, (x,), lambda g: (np.asarray(mt @ g),), "aggregate")


def softmax_rows_masked(logits, mask, scale: float = 1.0) -> Tensor:
    """Row softmax of ``logits / scale`` restricted to ``mask``.

    Masked positions are exactly zero in the output and receive exactly
    zero gradient. Works on ``n x m`` or batched ``b x n x m`` inputs.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs logits {logits.shape}")
    if not mask.any(axis=-1).all():
        raise EmptyRowMask("every mask row needs at least one allowed entry")
    z = np.where(mask, logits.data / scale, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)) / scale,)

    return _result(out, (logits,), bw, "softmax_rows_masked")


@dataclass(frozen=True)
class SparsePattern:
    """Row-sorted (CSR) sparsity structure of a square boolean mask."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    rows: np.ndarray

    @classmethod
    def from_dense(cls, mask) -> "SparsePattern":
        mask = np.asarray(mask, dtype=bool)
        rows, cols = np.nonzero(mask)
        return cls.from_coo(mask.shape[0], rows, cols)

    @classmethod
    def from_coo(cls, n: int, rows: np.ndarray, cols: np.ndarray) -> "SparsePattern":
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
        return cls(n, indptr, cols.astype(np.int32), rows.astype(np.int64))

    def to_dense(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        m[self.rows, self.indices] = True
        return m


def _segment_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, indptr[:-1], axis=0)


def masked_attention(q, k, v, patterns: Sequence[SparsePattern], scale: float,
                     dropout_p: float = 0.0, rng: np.random.Generator | None = None) -> Tensor:
    """Multi-head attention restricted to per-head sparse masks.

    ``q``, ``k``, ``v`` are ``N x (heads * h)``; head ``i`` uses columns
    ``[i*h, (i+1)*h)`` and ``patterns[i]``. Each head computes
    ``softmax_rows_masked(q_i k_i^T, mask_i, scale) @ v_i`` evaluated only
    on allowed entries; the head outputs are concatenated column-wise.
    Dropout, when active, is applied to the attention weights.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    heads = len(patterns)
    n, width = q.shape
    if k.shape != q.shape or v.shape[0] != n or width % heads or v.shape[1] % heads:
        raise ShapeMismatch(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    hd, hv = width // heads, v.shape[1] // heads
    out = np.empty((n, v.shape[1]))
    saved = []
    for i, pat in enumerate(patterns):
        if pat.n != n:
            raise ShapeMismatch(f"pattern for {pat.n} nodes applied to {n} rows")
        if (np.diff(pat.indptr) == 0).any():
            raise EmptyRowMask("every mask row needs at least one allowed entry")
        qi = q.data[:, i * hd:(i + 1) * hd]
        ki = k.data[:, i * hd:(i + 1) * hd]
        vi = v.data[:, i * hv:(i + 1) * hv]
        s = np.einsum("ij,ij->i", qi[pat.rows], ki[pat.indices]) / scale
        s -= np.maximum.reduceat(s, pat.indptr[:-1])[pat.rows]
        e = np.exp(s)
        a = e / _segment_sum(e, pat.indptr)[pat.rows]
        keep = None
        if dropout_p > 0.0 and rng is not None:
            keep = (rng.random(a.shape) >= dropout_p) / (1.0 - dropout_p)
            a_used = a * keep
        else:
            a_used = a
        P = sp.csr_matrix((a_used, pat.indices, pat.indptr), shape=(n, n))
        out[:, i * hv:(i + 1) * hv] = P @ vi
        saved.append((a, keep, P))

    def bw(g):
        gq = np.zeros_like(q.data) if q.requires_grad else None
        gk = np.zeros_like(k.data) if k.requires_grad else None
        gv = np.zeros_like(v.data) if v.requires_grad else None
        for i, (pat, (a, keep, P)) in enumerate(zip(patterns, saved)):
            gi = g[:, i * hv:(i + 1) * hv]
            vi = v.data[:, i * hv:(i + 1) * hv]
            if gv is not None:
                gv[:, i * hv:(i + 1) * hv] = P.T @ gi
            if gq is None and gk is None:
                continue
            ga = np.einsum("ij,ij->i", gi[pat.rows], vi[pat.indices])
            if keep is not None:
                ga = ga * keep
            gs = a * (ga - _segment_sum(a * ga, pat.indptr)[pat.rows]) / scale
            S = sp.csr_matrix((gs, pat.indices, pat.indptr), shape=(n, n))
            if gq is not None:
                gq[:, i * hd:(i + 1) * hd] = S @ k.data[:, i * hd:(i + 1) * hd]
            if gk is not None:
                gk[:, i * hd:(i + 1) * hd] = S.T @ q.data[:, i * hd:(i + 1) * hd]
        return gq, gk, gv

    return _result(out, (q, k, v), bw, "masked_attention")


def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.data.size != t.size or t.size == 0:
        raise ShapeMismatch(f"mse_loss of sizes {pred.data.size} and {t.size}")
    diff = pred.data.reshape(-1) - t.reshape(-1)
    out = np.asarray(np.mean(diff * diff))
    _check_finite(out, "mse_loss")
    n = diff.size
    return _result(out, (pred,), lambda g: ((2.0 * float(g) / n * diff).reshape(pred.shape),),
                   "mse_loss")


# --- backward -----------------------------------------------------------------

class Tape:
    """Recorded primitive applications in topological order (inputs first)."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients accumulate across calls; reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedGraph("loss is not connected to any parameter")
    tape = Tape.from_output(loss)
    adj: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for t in reversed(tape.records):
        g = adj.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, gp in zip(t.parents, t._backward(g)):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in adj:
                adj[key] = adj[key] + gp
            else:
                adj[key] = gp


# --- gradient checking ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                      h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-8,
                      max_per_param: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare backward gradients with central differences.

    Relative error per coordinate is ``|g_a - g_n| / max(|g_a|, |g_n|, floor)``.
    ``max_per_param`` limits the number of coordinates probed per tensor
    (chosen with a seeded generator); ``None`` checks every coordinate.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"h must lie in [1e-7, 1e-3], got {h}")
    for p in params.values():
        p.grad = None
    loss = f()
    with no_grad():
        again = f()
    if not np.array_equal(loss.data, again.data):
        raise NonDeterministicFunction("two forward passes at the same point disagree")
    backward(loss)
    rng = np.random.default_rng(seed)
    worst, worst_name, worst_idx, count = 0.0, None, None, 0
    for name, p in params.items():
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        for j in idx:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                fp = float(f().data)
                flat[j] = orig - h
                fm = float(f().data)
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            ana = float(grad.reshape(-1)[j])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            count += 1
            if err > worst or worst_name is None:
                worst, worst_name = err, name
                worst_idx = np.unravel_index(j, p.shape)
    return GradCheckReport(worst, worst_name, worst_idx, count, tol)
