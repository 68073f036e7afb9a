"""Dense float64 tensors with a minimal reverse-mode tape.

Ops compute eagerly with numpy and are recorded on a :class:`Graph` only
when at least one input requires grad. The tape is append-only, so node
ids are already a topological order; ``backward`` walks it in reverse and
touches only nodes reachable from the loss. Frozen leaves never receive a
gradient entry.

All ops are pure: input arrays are never mutated (enforced by marking
every tensor's buffer read-only).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "Grads", "ShapeError", "tensor",
    "matmul", "add", "sub", "scale", "mul", "add_bias", "gelu", "log",
    "reshape", "transpose", "sum", "mean", "gather", "concat", "conv1d",
    "softmax", "layer_norm", "backward",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    # np.asarray with order="C" keeps 0-d shapes (ascontiguousarray would not)
    out = np.asarray(arr, dtype=np.float64, order="C")
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.setflags(write=False)
    return out


class Tensor:
    """Immutable dense float64 value, optionally bound to a tape node."""

    __slots__ = ("data", "graph", "nid", "name")

    def __init__(self, data, graph: "Graph | None" = None, nid: int | None = None,
                 name: str | None = None):
        self.data = _readonly(np.asarray(data, dtype=np.float64))
        self.graph = graph
        self.nid = nid
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def requires_grad(self) -> bool:
        return self.nid is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


def tensor(data) -> Tensor:
    """Wrap a plain value (constant, no grad)."""
    return Tensor(data)


class _Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple[int, ...],
                 backward: Callable[[np.ndarray], Sequence["np.ndarray | None"]]):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Append-only tape. Node ids increase in topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[tuple[Tensor, bool]] = []  # (tensor, trainable)

    def leaf(self, value, *, trainable: bool, name: str | None = None) -> Tensor:
        """Register a parameter leaf. Frozen leaves are plain constants:
        they are never recorded and never receive gradients."""
        if not trainable:
            t = Tensor(value, name=name)
            self.leaves.append((t, False))
            return t
        nid = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None))
        t = Tensor(value, graph=self, nid=nid, name=name)
        self.leaves.append((t, True))
        return t

    def _record(self, op: str, inputs: Iterable[Tensor], value: np.ndarray,
                backward: Callable) -> Tensor:
        ids = tuple(t.nid if t.requires_grad else -1 for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(_Node(op, ids, backward))
        return Tensor(value, graph=self, nid=nid)


class Grads:
    """Gradient map keyed by leaf tensor identity."""

    def __init__(self, table: dict[int, Tensor]):
        self._table = table

    def __getitem__(self, leaf: Tensor) -> Tensor:
        if leaf.nid is None or leaf.nid not in self._table:
            raise KeyError(f"no gradient for {leaf!r} (frozen or unreachable)")
        return self._table[leaf.nid]

    def __contains__(self, leaf: Tensor) -> bool:
        return leaf.nid is not None and leaf.nid in self._table

    def get(self, leaf: Tensor, default=None):
        return self[leaf] if leaf in self else default


def _tape(*tensors: Tensor) -> Graph | None:
    g = None
    for t in tensors:
        if t.graph is not None and t.requires_grad:
            if g is None:
                g = t.graph
            elif g is not t.graph:
                raise ValueError("operands belong to different graphs")
    return g


def _emit(op: str, inputs: Sequence[Tensor], value: np.ndarray,
          make_backward: Callable[[], Callable]) -> Tensor:
    g = _tape(*inputs)
    if g is None:
        return Tensor(value)
    return g._record(op, inputs, value, make_backward())


# ---------------------------------------------------------------------------
# ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    value = a.data @ b.data
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd():
        def fn(g):
            return (g @ bd.T if need_a else None,
                    ad.T @ g if need_b else None)
        return fn

    return _emit("matmul", (a, b), value, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd():
        return lambda g: (g if need_a else None, g if need_b else None)

    return _emit("add", (a, b), a.data + b.data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd():
        return lambda g: (g if need_a else None, -g if need_b else None)

    return _emit("sub", (a, b), a.data - b.data, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd():
        return lambda g: (g * c,)

    return _emit("scale", (a,), a.data * c, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product. One operand may be a size-1 scalar tensor,
    which broadcasts; its gradient is the full contraction."""
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bwd():
        def fn(g):
            ga = gb = None
            if need_a:
                ga = g * bd
                if ad.size == 1 and ga.shape != ad.shape:
                    ga = ga.sum().reshape(ad.shape)
            if need_b:
                gb = g * ad
                if bd.size == 1 and gb.shape != bd.shape:
                    gb = gb.sum().reshape(bd.shape)
            return (ga, gb)
        return fn

    return _emit("mul", (a, b), ad * bd, bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast-add a 1-D bias over the last axis."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    xd = x.data
    need_x, need_b = x.requires_grad, b.requires_grad

    def bwd():
        def fn(g):
            gb = None
            if need_b:
                gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
            return (g if need_x else None, gb)
        return fn

    return _emit("add_bias", (x, b), xd + b.data, bwd)


# tanh form: gelu(x) = 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    inner = _GELU_C * (xd + _GELU_K * xd ** 3)
    t = np.tanh(inner)
    value = 0.5 * xd * (1.0 + t)

    def bwd():
        def fn(g):
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * xd ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner
            return (g * d,)
        return fn

    return _emit("gelu", (x,), value, bwd)


def log(x: Tensor) -> Tensor:
    xd = x.data
    value = np.log(xd)

    def bwd():
        return lambda g: (g / xd,)

    return _emit("log", (x,), value, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape

    def bwd():
        return lambda g: (g.reshape(old),)

    return _emit("reshape", (x,), x.data.reshape(shape), bwd)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    nd = x.data.ndim
    perm = tuple(axes) if axes is not None else tuple(reversed(range(nd)))
    inv = tuple(np.argsort(perm))

    def bwd():
        return lambda g: (g.transpose(inv),)

    return _emit("transpose", (x,), x.data.transpose(perm), bwd)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    xd = x.data
    value = xd.sum(axis=axis)

    def bwd():
        def fn(g):
            if axis is None:
                return (np.broadcast_to(g, xd.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), xd.shape).copy(),)
        return fn

    return _emit("sum", (x,), value, bwd)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    n = xd.size if axis is None else xd.shape[axis]
    value = xd.mean(axis=axis)

    def bwd():
        def fn(g):
            if axis is None:
                return (np.broadcast_to(g / n, xd.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis) / n, xd.shape).copy(),)
        return fn

    return _emit("mean", (x,), value, bwd)


def gather(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows along axis 0 (embedding-style lookup)."""
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather indices must be 1-D")
    if x.data.shape[0] == 0 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeError(f"gather index out of range for axis-0 size {x.shape[0]}")
    xd = x.data

    def bwd():
        def fn(g):
            dx = np.zeros_like(xd)
            np.add.at(dx, idx, g)
            return (dx,)
        return fn

    return _emit("gather", (x,), xd[idx], bwd)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of empty sequence")
    sizes = [t.shape[axis] for t in xs]
    value = np.concatenate([t.data for t in xs], axis=axis)
    needs = [t.requires_grad for t in xs]

    def bwd():
        def fn(g):
            outs = []
            start = 0
            for n, need in zip(sizes, needs):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + n)
                outs.append(g[tuple(sl)] if need else None)
                start += n
            return tuple(outs)
        return fn

    return _emit("concat", xs, value, bwd)


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """1-D convolution over time: x[T, c_in], w[kernel, c_in, c_out]."""
    if x.data.ndim != 2 or w.data.ndim != 3 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1d shape mismatch: {x.shape} * {w.shape}")
    kernel = w.shape[0]
    frames_in = x.shape[0]
    if frames_in < kernel:
        raise ShapeError(f"conv1d input length {frames_in} < kernel {kernel}")
    stride = int(stride)
    frames = (frames_in - kernel) // stride + 1
    xd, wd = x.data, w.data
    value = np.zeros((frames, w.shape[2]))
    for k in range(kernel):
        value += xd[k:k + (frames - 1) * stride + 1:stride] @ wd[k]
    need_x, need_w = x.requires_grad, w.requires_grad

    def bwd():
        def fn(g):
            gx = gw = None
            if need_x:
                gx = np.zeros_like(xd)
                for k in range(kernel):
                    gx[k:k + (frames - 1) * stride + 1:stride] += g @ wd[k].T
            if need_w:
                gw = np.zeros_like(wd)
                for k in range(kernel):
                    gw[k] = xd[k:k + (frames - 1) * stride + 1:stride].T @ g
            return (gx, gw)
        return fn

    return _emit("conv1d", (x, w), value, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    s = value

    def bwd():
        def fn(g):
            dot = (g * s).sum(axis=axis, keepdims=True)
            return (s * (g - dot),)
        return fn

    return _emit("softmax", (x,), value, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shape mismatch: x {x.shape}, "
                         f"gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    value = xhat * gamma.data + beta.data
    gd = gamma.data
    need_x, need_g, need_b = x.requires_grad, gamma.requires_grad, beta.requires_grad

    def bwd():
        def fn(g):
            gx = gg = gb = None
            if need_x:
                gxh = g * gd
                gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                            - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
            if need_g:
                gg = (g * xhat).reshape(-1, d).sum(axis=0)
            if need_b:
                gb = g.reshape(-1, d).sum(axis=0)
            return (gx, gg, gb)
        return fn

    return _emit("layer_norm", (x, gamma, beta), value, bwd)


# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> Grads:
    """Accumulate d loss / d leaf for every trainable leaf reachable from
    ``loss``. The loss must be a scalar (single element)."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    g = loss.graph
    if g is None or loss.nid is None:
        return Grads({})
    acc: dict[int, np.ndarray] = {loss.nid: np.ones_like(loss.data)}
    for nid in range(loss.nid, -1, -1):
        grad_out = acc.pop(nid, None)
        if grad_out is None:
            continue
        node = g.nodes[nid]
        if node.backward is None:  # leaf
            acc[nid] = grad_out
            continue
        for in_id, contrib in zip(node.inputs, node.backward(grad_out)):
            if in_id < 0 or contrib is None:
                continue
            if in_id in acc:
                acc[in_id] = acc[in_id] + contrib
            else:
                acc[in_id] = contrib
    table = {}
    for leaf, trainable in g.leaves:
        if trainable and leaf.nid in acc:
            table[leaf.nid] = Tensor(acc[leaf.nid])
    return Grads(table)
