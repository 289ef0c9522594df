"""Reverse-mode automatic differentiation over dense numpy tensors.

Model state lives in float32; finite-difference oracles rebuild the same
graphs in float64 (see gradcheck). Every primitive records its parent
tensors and a backward closure on the output. `backward` walks the nodes
reachable from the loss in reverse creation order, which is a valid
topological order because an op can only consume tensors that already
exist. Gradients accumulate additively across fan-out; callers zero them
between steps.

Shapes must match exactly everywhere except `add_bias`, which broadcasts
a 1-d bias over leading axes. Keeping broadcasting out of the other
primitives keeps every backward rule a plain transpose of the forward.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from .errors import ContractError, ShapeError

LOG_FLOOR = 1e-12

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that turns off graph recording (forward only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense n-d value, optionally a recorded node of the backward tape."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Copy of the value, cut out of the graph."""
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {tuple(self.shape)}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, op={self.op!r}, requires_grad={self.requires_grad})"


def _record(data: np.ndarray, parents, op: str, backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_same_dtype(op, *ts):
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise ContractError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


def backward(loss: Tensor):
    """Populate grads of every requires_grad tensor reachable from `loss`.

    Seed gradient is 1.0; the loss must be a recorded scalar.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("backward expects a loss produced by a recorded graph")
    nodes = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id)
    loss.grad = np.ones_like(loss.data)
    for t in reversed(nodes):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


def first_nonfinite(root: Tensor):
    """Earliest-created tensor under `root` holding a non-finite value, or None."""
    nodes = []
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._id)
    for t in nodes:
        if not np.isfinite(t.data).all():
            return t
    return None


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    _check_same_dtype("add", a, b)

    def fn(g):
        _acc(a, g)
        _acc(b, g)

    return _record(a.data + b.data, (a, b), "add", fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    _check_same_dtype("sub", a, b)

    def fn(g):
        _acc(a, g)
        _acc(b, -g)

    return _record(a.data - b.data, (a, b), "sub", fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    _check_same_dtype("mul", a, b)

    def fn(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _record(a.data * b.data, (a, b), "mul", fn)


def smul(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (cast to the tensor's dtype)."""
    s = float(s)

    def fn(g):
        _acc(a, g * s)

    return _record(a.data * s, (a,), "smul", fn)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., D] + b[D], the one broadcast the tape allows."""
    if b.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {tuple(x.shape)} vs {tuple(b.shape)}")
    _check_same_dtype("add_bias", x, b)

    def fn(g):
        _acc(x, g)
        _acc(b, g.reshape(-1, b.shape[0]).sum(axis=0))

    return _record(x.data + b.data, (x, b), "add_bias", fn)


def absolute(x: Tensor) -> Tensor:
    def fn(g):
        _acc(x, g * np.sign(x.data))

    return _record(np.abs(x.data), (x,), "absolute", fn)


def log_clamped(x: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """log(max(x, floor)); derivative 0 where the clamp is active."""

    def fn(g):
        _acc(x, g * np.where(x.data > floor, 1.0 / np.maximum(x.data, floor), 0.0))

    return _record(np.log(np.maximum(x.data, floor)), (x,), "log_clamped", fn)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated gelu with its exact analytic derivative."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)

    def fn(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
        _acc(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _record(0.5 * x.data * (1.0 + t), (x,), "gelu", fn)


# ---------------------------------------------------------------------------
# linear algebra / reshaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; stacked when both carry identical leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}")
    _check_same_dtype("matmul", a, b)

    def fn(g):
        _acc(a, g @ b.data.swapaxes(-1, -2))
        _acc(b, a.data.swapaxes(-1, -2) @ g)

    return _record(a.data @ b.data, (a, b), "matmul", fn)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {tuple(x.shape)}")
    inv = tuple(np.argsort(axes))

    def fn(g):
        _acc(x, g.transpose(inv))

    return _record(x.data.transpose(axes), (x,), "transpose", fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {tuple(x.shape)} as {shape}")

    def fn(g):
        _acc(x, g.reshape(x.data.shape))

    return _record(x.data.reshape(shape), (x,), "reshape", fn)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows of a matrix; backward scatter-adds into the source."""
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got shape {tuple(x.shape)}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ContractError(f"gather_rows: index list must be 1-d, got shape {tuple(idx.shape)}")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ContractError(f"gather_rows: index out of range [0, {n}) in {idx[(idx < 0) | (idx >= n)][:4]}")

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _acc(x, gx)

    return _record(x.data[idx], (x,), "gather_rows", fn)


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Stack n copies of a vector or matrix along rows; backward sums copies."""
    if x.data.ndim not in (1, 2):
        raise ShapeError(f"tile_rows: expected vector or matrix, got shape {tuple(x.shape)}")
    n = int(n)
    if n < 1:
        raise ContractError(f"tile_rows: n must be positive, got {n}")
    base = x.data if x.data.ndim == 2 else x.data[None, :]

    def fn(g):
        s = g.reshape(n, base.shape[0], base.shape[1]).sum(axis=0)
        _acc(x, s.reshape(x.data.shape))

    return _record(np.tile(base, (n, 1)), (x,), "tile_rows", fn)


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Tensor) -> Tensor:
    def fn(g):
        _acc(x, np.broadcast_to(g, x.data.shape))

    return _record(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), "reduce_sum", fn)


def reduce_mean(x: Tensor) -> Tensor:
    size = x.data.size

    def fn(g):
        _acc(x, np.broadcast_to(g / size, x.data.shape))

    return _record(np.asarray(x.data.mean(), dtype=x.data.dtype), (x,), "reduce_mean", fn)


# ---------------------------------------------------------------------------
# normalizations / activations over the last axis


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, max-subtracted for stability."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _acc(x, y * (g - dot))

    return _record(y, (x,), "softmax", fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Per-row zero mean, unit variance (population), then affine."""
    d = x.shape[-1]
    if gain.data.ndim != 1 or bias.data.ndim != 1 or gain.shape[0] != d or bias.shape[0] != d:
        raise ShapeError(
            f"layer_norm: gain/bias {tuple(gain.shape)}/{tuple(bias.shape)} do not match row width {d}"
        )
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    _check_same_dtype("layer_norm", x, gain, bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def fn(g):
        gh = g * gain.data
        m1 = gh.mean(axis=-1, keepdims=True)
        m2 = (gh * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * (gh - m1 - xhat * m2))
        lead = tuple(range(g.ndim - 1))
        _acc(gain, (g * xhat).sum(axis=lead))
        _acc(bias, g.sum(axis=lead))

    return _record(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", fn)


def l2_normalize(x: Tensor, eps: float) -> Tensor:
    """Divide each row by max(its L2 norm, eps)."""
    if eps <= 0:
        raise ContractError(f"l2_normalize: eps must be positive, got {eps}")
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    s = np.maximum(n, eps)
    y = x.data / s

    def fn(g):
        base = g / s
        dot = (x.data * g).sum(axis=-1, keepdims=True)
        corr = x.data * dot / (s * s * s)
        _acc(x, np.where(n > eps, base - corr, base))

    return _record(y, (x,), "l2_normalize", fn)
