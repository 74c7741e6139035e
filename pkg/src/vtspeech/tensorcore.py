"""Minimal dense-tensor engine with reverse-mode autodiff.

Tensors wrap row-major numpy arrays (f32 or f64). Each op that touches a
gradient-requiring input registers a backward closure; ``backward`` on a
scalar walks the recorded graph once in reverse topological order. Elementwise
ops broadcast only when one operand's shape is a suffix of the other's
(leading batch dimensions); anything fancier must be made explicit.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

_GRAD_ENABLED = True
_CHECKED = False


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def checked():
    """Raise NumericError on any non-finite op output inside the block."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = True
    try:
        yield
    finally:
        _CHECKED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> list["Tensor"]:
        """Accumulate dSelf/dLeaf into .grad of every reachable tensor.

        Returns the visited nodes in reverse topological order."""
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar, got shape {self.shape}")
        tape: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        return tape

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    if _CHECKED and not np.all(np.isfinite(data)):
        raise NumericError("non-finite value produced in checked mode")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _suffix_reduce(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over broadcast leading axes down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_suffix(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    tail = big[len(big) - len(small):]
    ok = all(m == n or m == 1 or n == 1 for m, n in zip(small, tail))
    if not ok:
        raise ShapeError(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_suffix(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_suffix_reduce(g, a.shape))
        if b.requires_grad:
            b.accumulate(_suffix_reduce(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_suffix(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_suffix_reduce(g, a.shape))
        if b.requires_grad:
            b.accumulate(_suffix_reduce(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_suffix(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a.accumulate(_suffix_reduce(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate(_suffix_reduce(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _make(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul operands must have >= 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim and b.data.ndim != 2 and a.data.ndim != 2:
        raise ShapeError(f"matmul: unsupported rank mix {a.shape} @ {b.shape}")
    if a.data.ndim == b.data.ndim and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_suffix_reduce(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_suffix_reduce(gb, b.shape))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                t.accumulate(g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] outside axis of {a.shape[axis]}")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[sl] = g
            a.accumulate(full)

    return _make(a.data[sl].copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), backward)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"ids outside table of {table.shape[0]} rows")

    def backward(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table.accumulate(full)

    return _make(table.data[ids], (table,), backward)


def index_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0; duplicate indices accumulate in backward."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("index_rows wants a 1-D index vector")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"row index outside axis of {a.shape[0]}")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a.accumulate(full)

    return _make(a.data[idx].copy(), (a,), backward)


def gather(a: Tensor, axis: int, index: np.ndarray) -> Tensor:
    """take_along_axis with a same-rank integer index array."""
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != a.data.ndim:
        raise ShapeError(f"gather index rank {index.ndim} != tensor rank {a.data.ndim}")

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            ix = list(np.indices(index.shape))
            ix[axis] = index
            np.add.at(full, tuple(ix), g)
            a.accumulate(full)

    return _make(np.take_along_axis(a.data, index, axis=axis), (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = np.sum(g * y, axis=axis, keepdims=True)
            a.accumulate((g - dot) * y)

    return _make(y, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - log_z

    def backward(g):
        if a.requires_grad:
            a.accumulate(g - np.exp(y) * np.sum(g, axis=axis, keepdims=True))

    return _make(y, (a,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then scale and shift."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def backward(g):
        if gain.requires_grad:
            gain.accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            mean_gy = gy.mean(axis=-1, keepdims=True)
            mean_gy_x = (gy * xhat).mean(axis=-1, keepdims=True)
            x.accumulate(inv * (gy - mean_gy - xhat * mean_gy_x))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximation GELU (smooth, convenient for gradient checks)."""
    u = _GELU_C * (a.data + 0.044715 * a.data**3)
    t = np.tanh(u)
    y = 0.5 * a.data * (1.0 + t)

    def backward(g):
        if a.requires_grad:
            du = _GELU_C * (1.0 + 3 * 0.044715 * a.data**2)
            a.accumulate(g * (0.5 * (1.0 + t) + 0.5 * a.data * (1.0 - t**2) * du))

    return _make(y, (a,), backward)


def _reduce_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    axis = _reduce_axis(axis, a.data.ndim)

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate(np.full_like(a.data, float(g)))
            else:
                a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(a.data.sum(axis=axis), (a,), backward)


def mean_(a: Tensor, axis: int | None = None) -> Tensor:
    axis = _reduce_axis(axis, a.data.ndim)
    count = a.data.size if axis is None else a.shape[axis]

    def backward(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate(np.full_like(a.data, float(g) / count))
            else:
                a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape) / count)

    return _make(a.data.mean(axis=axis), (a,), backward)


def max_(a: Tensor, axis: int) -> Tensor:
    """Max reduction; gradient routes to the first maximal element."""
    axis = _reduce_axis(axis, a.data.ndim)
    y = a.data.max(axis=axis)
    hit = a.data == np.expand_dims(y, axis)
    first = np.cumsum(hit, axis=axis) == 1
    mask = hit & first

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.expand_dims(g, axis) * mask)

    return _make(y, (a,), backward)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def backward(loss: Tensor, params) -> list[np.ndarray]:
    """Gradients of a scalar loss for each param; zeros when unreachable."""
    zero_grads(params)
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# --- optimizer and schedule ---------------------------------------------------

@dataclass
class AdamWState:
    """Per-parameter first/second moments plus hyperparameters."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def init(cls, params, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            weight_decay=weight_decay,
        )


def adamw_step(params, grads, state: AdamWState, lr: float) -> None:
    """Decoupled-weight-decay Adam update, in place on params and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params/grads/state length mismatch")
    state.step += 1
    b1c = 1.0 - state.beta1**state.step
    b2c = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        p.data -= lr * (update + state.weight_decay * p.data)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))


def clip_grad_norm(grads, max_norm: float) -> list[np.ndarray]:
    """Scale all grads by max_norm/g when the global L2 norm g exceeds it."""
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return [g * factor for g in grads]
    return list(grads)


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at total_steps."""
    if total_steps <= warmup_steps:
        raise ConfigError("total_steps must exceed warmup_steps")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
