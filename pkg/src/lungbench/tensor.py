"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad`` appends a node to
a :class:`Graph`.  ``backward`` walks that graph in strict reverse append
order, so no topological sort is ever needed.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Graph",
    "Tensor",
    "add",
    "backward",
    "conv2d",
    "exp",
    "grad_check",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "max_pool2d",
    "mean",
    "mul",
    "mul_scalar",
    "no_grad",
    "relu",
    "reshape",
    "softmax",
    "sub",
    "sum",
    "transpose",
]

_state = threading.local()
# global creation stamps; merging graphs by stamp keeps append order topological
_stamps = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    stamp: int = field(default_factory=lambda: next(_stamps))


@dataclass
class Graph:
    nodes: list = field(default_factory=list)

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def absorb(self, others) -> None:
        """Merge other graphs into this one in creation order and re-point their tensors."""
        nodes = self.nodes + [n for g in others for n in g.nodes]
        nodes.sort(key=lambda n: n.stamp)
        self.nodes = nodes
        for index, node in enumerate(nodes):
            node.output.graph = self
            node.output.node = index
        for g in others:
            g.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "graph", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.graph: Graph | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.ravel()

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], fn) -> Tensor:
    """Wrap ``out`` and, if any input is tracked, append a graph node."""
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.graph = None
    result.node = None
    result.requires_grad = False
    if not _grad_enabled() or not any(t.requires_grad for t in inputs):
        return result
    graphs = list({id(t.graph): t.graph for t in inputs if t.graph is not None}.values())
    graph = graphs[0] if graphs else Graph()
    if len(graphs) > 1:
        # independent sub-computations (e.g. two ensemble members) meet here
        graph.absorb(graphs[1:])
    result.requires_grad = True
    result.graph = graph
    result.node = graph.append(Node(op, tuple(inputs), result, fn))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("mul_scalar", a.data * s, (a,), lambda g: (g * s,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record("exp", out, (x,), lambda g: (g * out,))


# Probabilities below this are treated as this; keeps log finite.
LOG_FLOOR = 1e-300


def log(x: Tensor) -> Tensor:
    safe = np.maximum(x.data, LOG_FLOOR)
    return _record(
        "log",
        np.log(safe),
        (x,),
        lambda g: (np.where(x.data > LOG_FLOOR, g / safe, 0.0),),
    )


# ------------------------------------------------------------------- shaping


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _record(
        "reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),)
    )


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(
        "transpose",
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out), (x,), fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul_scalar(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------- activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def fn(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = (g * xhat).sum(axis=lead)
        g_beta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, g_gamma, g_beta

    return _record("layer_norm", out, (x, gamma, beta), fn)


# ------------------------------------------------------------ spatial layers


def conv2d(
    x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation over ``[C_in, H, W]`` or batched ``[N, C_in, H, W]``.

    The forward accumulates kernel taps in the fixed order (c_in, row, col),
    starting from zero and adding the bias last, so it matches a plain nested
    loop bit for bit.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} / padding {padding}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ValueError(f"conv2d: bad shapes input {x.shape}, kernels {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernels.shape
    if kc != c_in:
        raise ValueError(
            f"conv2d: input channels {c_in} (input {x.shape}) != kernel channels {kc} "
            f"(kernels {kernels.shape})"
        )
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    kd = kernels.data

    def window(ci, ki, kj):
        return xp[:, ci, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride]

    out = np.zeros((n, c_out, ho, wo))
    for ci in range(c_in):
        for ki in range(kh):
            for kj in range(kw):
                out += kd[:, ci, ki, kj][None, :, None, None] * window(ci, ki, kj)[:, None]
    out += bias.data[None, :, None, None]

    def fn(g):
        g4 = g if batched else g[None]
        gk = np.empty_like(kd)
        gxp = np.zeros_like(xp)
        for ci in range(c_in):
            for ki in range(kh):
                for kj in range(kw):
                    gk[:, ci, ki, kj] = np.tensordot(g4, window(ci, ki, kj), axes=([0, 2, 3], [0, 1, 2]))
                    gxp[:, ci, ki : ki + stride * (ho - 1) + 1 : stride, kj : kj + stride * (wo - 1) + 1 : stride] += (
                        np.tensordot(kd[:, ci, ki, kj], g4, axes=([0], [1]))
                    )
        gb = g4.sum(axis=(0, 2, 3))
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return (gx if batched else gx[0]), gk, gb

    return _record("conv2d", out if batched else out[0], (x, kernels, bias), fn)


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over ``window``-square cells; ties resolve to the first cell in row-major order."""
    if window < 1 or stride < 1:
        raise ValueError(f"max_pool2d: bad window {window} / stride {stride}")
    h, w = x.shape[-2:]
    if x.ndim < 2 or window > h or window > w:
        raise ValueError(f"max_pool2d: window {window} larger than spatial dims {h}x{w}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1

    def view(di, dj):
        return (..., slice(di, di + stride * (ho - 1) + 1, stride), slice(dj, dj + stride * (wo - 1) + 1, stride))

    best = x.data[view(0, 0)].copy()
    arg = np.zeros(best.shape, dtype=np.int64)
    for k in range(1, window * window):
        cand = x.data[view(*divmod(k, window))]
        better = cand > best
        best = np.where(better, cand, best)
        arg[better] = k

    def fn(g):
        gx = np.zeros_like(x.data)
        for k in range(window * window):
            gx[view(*divmod(k, window))] += np.where(arg == k, g, 0.0)
        return (gx,)

    return _record("max_pool2d", best, (x,), fn)


# ------------------------------------------------------------------ backward


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Fill ``grad`` on every tracked leaf that ``loss`` depends on.

    Leaves reached by the graph are reset to zero first, so repeated calls do
    not accumulate.  Intermediate tensors receive their gradient too.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else loss.graph
    if graph is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    if loss.graph is not graph:
        raise ValueError("loss was not produced by the given graph")

    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad and t.node is None:
                t.grad = np.zeros_like(t.data)

    grads: list = [None] * len(graph.nodes)
    grads[loss.node] = np.ones_like(loss.data)
    for index in range(len(graph.nodes) - 1, -1, -1):
        g = grads[index]
        if g is None:
            continue
        node = graph.nodes[index]
        node.output.grad = g
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.node is None:
                t.grad += gi
            elif grads[t.node] is None:
                grads[t.node] = gi
            else:
                grads[t.node] = grads[t.node] + gi


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences of ``f`` at ``x``.

    The relative error of each coordinate is divided by
    ``max(1, |analytic|, |numeric|)``.
    """
    probe = Tensor(x.data, requires_grad=True)
    loss = f(probe)
    backward(loss)
    analytic = probe.grad.ravel().copy()

    base = x.data.astype(np.float64).ravel()
    worst = 0.0
    for i in range(base.size):
        plus = base.copy()
        plus[i] += eps
        minus = base.copy()
        minus[i] -= eps
        with no_grad():
            fp = f(Tensor(plus.reshape(x.shape))).item()
            fm = f(Tensor(minus.reshape(x.shape))).item()
        numeric = (fp - fm) / (2 * eps)
        denom = max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
