"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is recorded implicitly: every differentiable operation returns a
Tensor holding references to its parents and a closure that propagates the
adjoint. ``backward`` runs the closures in reverse topological order, which
plays the role of a tape replay. Everything is float64 and single threaded;
reductions always run in numpy's fixed row-major order so results are
bit-reproducible.

Broadcasting is deliberately restricted: elementwise ops require identical
shapes, scalars are applied via ``scale``, and only ``matmul`` broadcasts
over leading batch dimensions. ``broadcast_to`` provides explicit expansion
where a bias or shared vector is needed.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class Tensor:
    """N-dimensional float64 array, optionally participating in autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[], None] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, own: bool = False) -> None:
        # own=True promises g is a writable buffer no other tensor reads,
        # so the first write may alias it instead of copying; shared
        # buffers (e.g. an adjoint fanned out to several parents) must copy
        if self.grad is None:
            self.grad = g if own else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _needs_graph(*parents):
        return Tensor(data, requires_grad=False, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable node from a scalar loss.

    Gradients accumulate additively, so shared subexpressions receive the
    sum of their adjoints.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out_data = a.data + b.data
    out = _make(out_data, (a, b), None)

    def _bw():
        a.accumulate_grad(out.grad)
        b.accumulate_grad(out.grad)

    out._backward = _bw if out._parents else None
    return out


def multiply(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"multiply: shapes {a.shape} and {b.shape} differ")
    out = _make(a.data * b.data, (a, b), None)

    def _bw():
        a.accumulate_grad(out.grad * b.data, own=True)
        b.accumulate_grad(out.grad * a.data, own=True)

    out._backward = _bw if out._parents else None
    return out


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = _make(a.data * s, (a,), None)

    def _bw():
        a.accumulate_grad(out.grad * s, own=True)

    out._backward = _bw if out._parents else None
    return out


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(c (x + a x^3)))."""
    u = GELU_C * (x.data + GELU_A * x.data**3)
    th = np.tanh(u)
    out = _make(0.5 * x.data * (1.0 + th), (x,), None)

    def _bw():
        du = GELU_C * (1.0 + 3.0 * GELU_A * x.data**2)
        d = 0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th**2) * du
        x.accumulate_grad(out.grad * d, own=True)

    out._backward = _bw if out._parents else None
    return out


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    """Explicit expansion to a larger shape (the only non-matmul broadcast)."""
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot expand {x.shape} to {shape}") from e
    out = _make(data, (x,), None)

    def _bw():
        g = out.grad
        # sum over prepended axes, then over axes that were expanded from 1
        extra = len(shape) - x.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        keep = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        x.accumulate_grad(g, own=g is not out.grad)

    out._backward = _bw if out._parents else None
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(x: Tensor) -> Tensor:
    out = _make(np.asarray(x.data.sum()), (x,), None)

    def _bw():
        x.accumulate_grad(np.full_like(x.data, out.grad), own=True)

    out._backward = _bw if out._parents else None
    return out


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    axis = axis if axis >= 0 else axis + x.ndim
    n = x.shape[axis]
    out = _make(x.data.mean(axis=axis), (x,), None)

    def _bw():
        g = np.expand_dims(out.grad / n, axis)
        x.accumulate_grad(np.broadcast_to(g, x.shape).copy(), own=True)

    out._backward = _bw if out._parents else None
    return out


def concat_over_axis(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat_over_axis: empty input list")
    data = np.concatenate([p.data for p in parts], axis=axis)
    out = _make(data, tuple(parts), None)
    sizes = [p.shape[axis] for p in parts]

    def _bw():
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * data.ndim
            idx[axis] = slice(offset, offset + n)
            p.accumulate_grad(out.grad[tuple(idx)])
            offset += n

    out._backward = _bw if out._parents else None
    return out


def transpose(x: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(perm)
    out = _make(np.transpose(x.data, perm), (x,), None)
    inv = tuple(np.argsort(perm))

    def _bw():
        x.accumulate_grad(np.transpose(out.grad, inv))

    out._backward = _bw if out._parents else None
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = _make(np.reshape(x.data, shape), (x,), None)

    def _bw():
        x.accumulate_grad(out.grad.reshape(x.shape))

    out._backward = _bw if out._parents else None
    return out


def slice_(x: Tensor, key) -> Tensor:
    """Basic slicing (tuple of slices/ints); regions must not overlap."""
    out = _make(x.data[key].copy(), (x,), None)

    def _bw():
        g = np.zeros_like(x.data)
        g[key] = out.grad
        x.accumulate_grad(g, own=True)

    out._backward = _bw if out._parents else None
    return out


def gather_rows(table: Tensor, indices) -> Tensor:
    """Select rows of a 2D table by integer index; adjoint scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2D, got {table.shape}")
    out = _make(table.data[idx].copy(), (table,), None)

    def _bw():
        g = np.zeros_like(table.data)
        np.add.at(g, idx, out.grad)
        table.accumulate_grad(g, own=True)

    out._backward = _bw if out._parents else None
    return out


# ---------------------------------------------------------------------------
# linear algebra and nn primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading batch dimensions must agree or be absent."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    if a.ndim == b.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree, {a.shape} x {b.shape}")
    out = _make(np.matmul(a.data, b.data), (a, b), None)

    def _bw():
        ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
        a.accumulate_grad(_reduce_to_shape(ga, a.shape), own=True)
        b.accumulate_grad(_reduce_to_shape(gb, b.shape), own=True)

    out._backward = _bw if out._parents else None
    return out


def _reduce_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def softmax_lastdim(x: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis (max subtraction)."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _make(y, (x,), None)

    def _bw():
        g = out.grad
        dot = (g * y).sum(axis=-1, keepdims=True)
        x.accumulate_grad(y * (g - dot), own=True)

    out._backward = _bw if out._parents else None
    return out


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ShapeError("layernorm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm: affine params must have shape ({d},), got {gamma.shape}, {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta), None)

    def _bw():
        g = out.grad
        lead = tuple(range(g.ndim - 1))
        gamma.accumulate_grad((g * xhat).sum(axis=lead), own=True)
        beta.accumulate_grad(g.sum(axis=lead), own=True)
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        x.accumulate_grad((dxhat - m1 - xhat * m2) * inv, own=True)

    out._backward = _bw if out._parents else None
    return out


def pick(x: Tensor, rows, cols) -> Tensor:
    """Fancy-index a 2D tensor at (rows[i], cols[i]); adjoint scatter-adds."""
    if x.ndim != 2:
        raise ShapeError(f"pick: input must be 2D, got {x.shape}")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = _make(x.data[rows, cols].copy(), (x,), None)

    def _bw():
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, cols), out.grad)
        x.accumulate_grad(g, own=True)

    out._backward = _bw if out._parents else None
    return out


def neg_log_mean(p: Tensor, clamp: float = 1e-12) -> Tensor:
    """Mean of -log(p) over a 1D vector, with the log clamped at ``clamp``."""
    if p.ndim != 1 or p.size == 0:
        raise ContractError(f"neg_log_mean: need a nonempty 1D input, got shape {p.shape}")
    clipped = np.maximum(p.data, clamp)
    out = _make(np.asarray(-np.log(clipped).mean()), (p,), None)
    n = p.size

    def _bw():
        g = np.where(p.data > clamp, -1.0 / (n * clipped), 0.0)
        p.accumulate_grad(out.grad * g, own=True)

    out._backward = _bw if out._parents else None
    return out


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    f: Callable[[dict], Tensor],
    params: dict,
    step: float = 1e-5,
    tol: float = 1e-6,
    max_entries_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
    corrupt: bool = False,
) -> dict:
    """Compare analytic gradients of a scalar function against central differences.

    ``f`` maps the parameter dict (name -> Tensor) to a scalar Tensor, building
    a fresh graph each call. Returns a report with per-tensor max relative
    error; ``passed`` is True iff every error is below ``tol``. With
    ``max_entries_per_tensor`` set, a seeded random subset of entries is
    probed per tensor, which keeps large tables tractable.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    for t in params.values():
        t.zero_grad()
    loss = f(params)
    backward(loss)
    if corrupt:
        # checker self-test hook: a sign-flipped adjoint must be reported
        for t in params.values():
            if t.grad is not None and np.any(t.grad != 0):
                t.grad = -t.grad
                break

    errors: dict[str, float] = {}
    rng = rng or np.random.default_rng(0)
    for name, t in params.items():
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries_per_tensor is not None and n > max_entries_per_tensor:
            idxs = rng.choice(n, size=max_entries_per_tensor, replace=False)
            idxs.sort()
        else:
            idxs = np.arange(n)
        worst = 0.0
        aflat = analytic.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(params).item()
            flat[i] = orig - step
            fm = f(params).item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            a = aflat[i]
            err = abs(a - fd) / (max(abs(a), abs(fd)) + 1e-6)
            if err > worst:
                worst = err
        errors[name] = worst
    worst_name = max(errors, key=errors.get) if errors else ""
    return {
        "errors": errors,
        "passed": all(e < tol for e in errors.values()),
        "worst": worst_name,
        "worst_error": errors.get(worst_name, 0.0),
        "tol": tol,
    }
