"""Dense tensors with reverse-mode gradients, plus an Adam optimizer.

Only the handful of operations a small decoder-only transformer needs are
provided. Broadcasting is limited to adding a 1-D bias over the last axis and
to multiplying a stacked left operand by one shared 2-D right operand.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated."""


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording a graph (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "trainable", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, trainable: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.trainable = trainable
        self.requires_grad = trainable
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, trainable={self.trainable})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag
        if not flag:
            self.grad = None

    def zero_grad(self) -> None:
        if self.trainable:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad = None

    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __add__ = lambda self, other: add(self, other)  # noqa: E731

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __getitem__(self, key):
        return index(self, key)

    def sum(self) -> "Tensor":
        return weighted_sum(self, None)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise ContractError(f"operation produced non-finite values (shape {np.shape(data)})")
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- elementwise and structural ops -------------------------------------------------


def add(a, b) -> Tensor:
    """Same-shape sum, or ``a + bias`` with a 1-D bias over the last axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        bias = False
    elif b.data.ndim == 1 and a.shape[-1:] == b.shape:
        bias = True
    else:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")

    def backward(g):
        if not b.requires_grad:
            return g, None
        return g, (g.reshape(-1, g.shape[-1]).sum(axis=0) if bias else g)

    return _make(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def index(a: Tensor, key) -> Tensor:
    """``a[key]`` for basic or advanced numpy indexing; gradients scatter-add back."""
    out = np.asarray(a.data[key])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(out, (a,), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table of {table.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    d = x.data
    c = float(np.sqrt(2.0 / np.pi))
    d2 = d * d
    t = np.tanh(c * d * (1.0 + 0.044715 * d2))
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray | None) -> Tensor:
    """Scalar ``sum(x * weights)`` with constant weights (plain sum when None)."""
    if weights is None:
        w = np.ones_like(x.data)
    else:
        w = np.asarray(weights, dtype=x.dtype)
        if w.shape != x.shape:
            raise ShapeError(f"weights {w.shape} do not match tensor {x.shape}")
    total = np.sum(x.data.astype(np.float64) * w)
    return _make(np.asarray(total, dtype=x.dtype), (x,), lambda g: (w * g,))


def mean(x: Tensor) -> Tensor:
    return scale(weighted_sum(x, None), 1.0 / x.data.size)


# --- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product.

    ``a`` may carry leading stack axes. ``b`` either has identical leading axes
    (batched product) or is a single 2-D matrix shared by every stack entry.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    shared = b.data.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul stack axes differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            if shared:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def row_softmax_masked(x: Tensor, causal: bool = False) -> Tensor:
    """Softmax over the last axis; with ``causal`` the strictly-upper triangle gets zero mass."""
    d = x.data
    if causal:
        if d.ndim < 2 or d.shape[-1] != d.shape[-2]:
            raise ShapeError(f"causal softmax needs square trailing axes, got {d.shape}")
        n = d.shape[-1]
        mask = np.triu(np.ones((n, n), dtype=bool), k=1)
        z = np.where(mask, -np.inf, d.astype(np.float64))
    else:
        mask = None
        z = d.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p64 = e / e.sum(axis=-1, keepdims=True)
    p = p64.astype(d.dtype)

    def backward(g):
        gp = (g * p).sum(axis=-1, keepdims=True)
        gx = p * (g - gp)
        return (gx,)

    return _make(p, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match last axis {n}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + d.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        if not (gain.requires_grad or bias.requires_grad):
            return gx, None, None
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return _make(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows of a (N, V) tensor.

    A 1-D ``logits`` with a scalar target is treated as a single row. Optional
    per-row ``weights`` give a weighted mean (rows with weight 0 are ignored).
    """
    d = logits.data
    single = d.ndim == 1
    if single:
        d = d[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (d.shape[0],):
        raise ShapeError(f"targets {t.shape} do not match logits {d.shape}")
    if t.size and (t.min() < 0 or t.max() >= d.shape[1]):
        raise IndexError(f"target out of range for vocabulary of {d.shape[1]}")
    w = np.ones(d.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise ContractError("cross_entropy needs positive total weight")
    z = d.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(d.shape[0])
    nll = lse - z[rows, t]
    loss = float((nll * w).sum() / wsum)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        gl = (p * (w / wsum)[:, None] * float(g)).astype(d.dtype)
        return (gl[0] if single else gl,)

    return _make(np.asarray(loss, dtype=d.dtype), (logits,), backward)


# --- reverse pass ---------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into ``.grad`` of every reachable trainable leaf."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.trainable:
                node.grad = g.astype(node.dtype, copy=True) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[int, np.ndarray] = field(default_factory=dict, repr=False)


def adam_step(state: AdamState, params: list[Tensor]) -> None:
    """One bias-corrected Adam update on trainable ``params``; gradients are zeroed afterwards."""
    trainable = [p for p in params if p.trainable]
    for p in trainable:
        if p.grad is None:
            raise ContractError(f"trainable tensor {p.name or p.shape} has no gradient")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p in trainable:
        key = id(p)
        g = p.grad.astype(np.float64)
        m = state.m.get(key)
        if m is None:
            m = np.zeros(p.shape)
            state.v[key] = np.zeros(p.shape)
        v = state.v[key]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[key], state.v[key] = m, v
        upd = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - upd).astype(p.dtype)
        p.grad = np.zeros_like(p.data)
