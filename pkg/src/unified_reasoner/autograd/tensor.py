"""Dense tensors with a reverse-mode autodiff tape.

Every differentiable op builds its output through :func:`_record`, which
attaches a :class:`Node` holding the op name, the parent tensors and a
closure mapping the output gradient to per-parent gradients. Nodes carry a
monotonically increasing sequence number, so sorting reachable nodes by it
yields a valid reverse topological order for :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_local = threading.local()
_seq = itertools.count()


class AutogradError(ValueError):
    """Raised on shape mismatch, non-finite values or invalid backward calls."""


def _settings():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.dtype = np.float32
    return _local


def default_dtype():
    return _settings().dtype


def grad_enabled() -> bool:
    return _settings().grad_enabled


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    s = _settings()
    prev = s.grad_enabled
    s.grad_enabled = False
    try:
        yield
    finally:
        s.grad_enabled = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the default float dtype (float64 for grad checks)."""
    s = _settings()
    prev = s.dtype
    s.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        s.dtype = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.seq = next(_seq)


class Tensor:
    """An n-d float array, optionally attached to the autodiff tape.

    ``requires_grad`` leaves are parameters; tensors produced by ops on taped
    inputs carry a ``node``. Anything else is a constant and never gets a
    gradient.
    """

    __slots__ = ("data", "requires_grad", "node", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Optional[Node] = None
        self.grad: Optional[np.ndarray] = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def taped(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" op={self.node.op}" if self.node else (" param" if self.requires_grad else "")
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if data.dtype.kind == "f" and not np.isfinite(data).all():
        raise AutogradError(f"{op}: non-finite value in output of shape {data.shape}")
    out = Tensor(data)
    if grad_enabled() and any(p.taped for p in parents):
        out.node = Node(op, parents, backward_fn)
    return out


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    # Only leading-axis expansion: one shape must be a suffix of the other.
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise AutogradError(f"{op}: cannot broadcast shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.reshape((-1,) + tuple(shape)).sum(axis=0)
    return g


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    out = a.data * a.data.dtype.type(c)

    def bw(g):
        return (g * g.dtype.type(c),)

    return _record("scale", out, (a,), bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, a.data.dtype.type(0))

    def bw(g):
        return (g * mask,)

    return _record("relu", out, (a,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    inner = c * (x + k * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bw(g):
        dinner = c * (1 + 3 * k * x ** 2)
        d = 0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner
        return (g * d,)

    return _record("gelu", out, (a,), bw)


def masked_fill(a: Tensor, mask: np.ndarray, value: float = -1e9) -> Tensor:
    """Set positions where ``mask`` is true to ``value``."""
    mask = np.asarray(mask, dtype=bool)
    _broadcast_shape("masked_fill", a.shape, mask.shape)
    out = np.where(mask, a.data.dtype.type(value), a.data)

    def bw(g):
        return (np.where(mask, g.dtype.type(0), g),)

    return _record("masked_fill", out, (a,), bw)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise AutogradError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.taped:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.taped:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), bw)


# ----------------------------------------------------------------------
# reductions and normalisation
# ----------------------------------------------------------------------
def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record("sum", out, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply learned gain and bias."""
    x = a.data
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise AutogradError(f"layer_norm: input {a.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        n = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        flat = x.shape[-1]
        ggain = (g * xhat).reshape(-1, flat).sum(axis=0)
        gbias = g.reshape(-1, flat).sum(axis=0)
        return gx, ggain, gbias

    return _record("layer_norm", out, (a, gain, bias), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean token cross-entropy over positions where ``mask`` is true."""
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise AutogradError(
            f"cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise AutogradError("cross_entropy: empty mask")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    logp = x - m - np.log(z)
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = np.asarray(-(picked * mask).sum() / count, dtype=x.dtype)

    def bw(g):
        p = e / z
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return ((p - onehot) * (mask[..., None] * (g / count)),)

    return _record("cross_entropy", loss, (logits,), bw)


# ----------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise AutogradError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from exc

    def bw(g):
        return (g.reshape(a.shape),)

    return _record("reshape", out, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise AutogradError(f"transpose: axes {axes} invalid for shape {a.shape}")
    out = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _record("transpose", out, (a,), bw)


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis)."""
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)
    out = np.ascontiguousarray(out)

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _record("slice", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise AutogradError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record("concat", out, tensors, bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise AutogradError(f"embedding: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise AutogradError(f"embedding: id out of range for table {table.shape}")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _record("embedding", out, (table,), bw)


# ----------------------------------------------------------------------
# convolution / pooling
# ----------------------------------------------------------------------
def _same_pad(size: int, k: int, s: int):
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: str = "valid") -> Tensor:
    """2-D cross-correlation on (batch, channels, height, width) input."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise AutogradError(f"conv2d: input {x.shape} and kernel {weight.shape} do not conform")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise AutogradError(f"conv2d: bias {bias.shape} for kernel {weight.shape}")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    if padding == "same":
        pt, pb = _same_pad(H, kh, stride)
        pl, pr = _same_pad(W, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise AutogradError(f"conv2d: unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    Hp, Wp = xp.shape[2:]
    if Hp < kh or Wp < kw:
        raise AutogradError(f"conv2d: kernel {weight.shape} larger than input {x.shape}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0) if bias is not None else None
        gx = None
        if x.taped:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i: i + (Ho - 1) * stride + 1: stride,
                        j: j + (Wo - 1) * stride + 1: stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pt: pt + H, pl: pl + W]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", out, parents, bw)


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4:
        raise AutogradError(f"max_pool2d: expected 4-d input, got {x.shape}")
    B, C, H, W = x.shape
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            gx[:, :, i: i + (Ho - 1) * stride + 1: stride,
               j: j + (Wo - 1) * stride + 1: stride] += g * (arg == idx)
        return (gx,)

    return _record("max_pool2d", np.ascontiguousarray(out), (x,), bw)


# ----------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------
def _reachable_nodes(root: Tensor):
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        n = t.node
        if n is None or id(n) in seen:
            continue
        seen.add(id(n))
        nodes.append((n, t))
        stack.extend(n.inputs)
    nodes.sort(key=lambda nt: nt[0].seq, reverse=True)
    return nodes


def _run_backward(loss: Tensor) -> dict:
    if loss.data.size != 1 or loss.ndim != 0:
        raise AutogradError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.taped:
        raise AutogradError("backward: loss is not attached to the tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if loss.node is None:
        leaves[id(loss)] = loss
    for node, out in _reachable_nodes(loss):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.inputs, parent_grads):
            if pg is None or not p.taped:
                continue
            if p.node is None:
                leaves[id(p)] = p
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return {k: (leaves[k], v) for k, v in grads.items() if k in leaves}


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable parameter."""
    for leaf, g in _run_backward(loss).values():
        leaf.grad = g.astype(leaf.data.dtype, copy=False) if leaf.grad is None else leaf.grad + g


def grad(loss: Tensor, params: Iterable[Tensor]) -> list:
    """Gradients of ``loss`` w.r.t. ``params``; zeros for unreachable ones."""
    found = _run_backward(loss)
    out = []
    for p in params:
        hit = found.get(id(p))
        out.append(np.zeros_like(p.data) if hit is None else hit[1].astype(p.data.dtype, copy=False))
    return out
