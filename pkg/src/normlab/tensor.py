"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op returns a :class:`Tensor` carrying a closure that maps the output
gradient to gradients for its parents. Node ids come from a process-wide
monotonic counter, so sorting reachable nodes by id in descending order is a
valid reverse topological order and :func:`backward` needs no recursion.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_node_counter = itertools.count()


class ShapeError(ValueError):
    pass


class Tensor:
    """An array node in the computation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_counter)
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, float(other))

    __rmul__ = __mul__


def _not_scalar(t: Tensor):
    raise ShapeError(f"item(): tensor of shape {t.shape} is not a scalar")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node_id = next(_node_counter)
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss`` that requires it.

    Gradients are overwritten, not accumulated across calls.
    """
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        for p in t._parents:
            if p.requires_grad and p.node_id not in nodes:
                stack.append(p)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p.node_id in grads:
                grads[p.node_id] = grads[p.node_id] + pg
            else:
                grads[p.node_id] = pg


# ---------------------------------------------------------------------------
# element-wise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw, "add")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def sum_squares(a: Tensor) -> Tensor:
    return _make(np.asarray(np.sum(a.data * a.data)), (a,), lambda g: (2.0 * g * a.data,), "sum_squares")


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(a * w)`` for a constant array ``w`` of the same shape."""
    w = np.asarray(w, dtype=DTYPE)
    if w.shape != a.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match {a.shape}")
    return _make(np.asarray(np.sum(a.data * w)), (a,), lambda g: (g * w,), "weighted_sum")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),), "flatten")


# ---------------------------------------------------------------------------
# linear layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        A, B = a.data, b.data
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return _make(out, (a, b), bw, "matmul")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-feature (2-D input) or per-channel (4-D NCHW input) bias."""
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: input {x.shape} incompatible with bias {b.shape}")
    if x.data.ndim == 2:
        out = x.data + b.data
        return _make(out, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")
    out = x.data + b.data[None, :, None, None]
    return _make(out, (x, b), lambda g: (g, g.sum(axis=(0, 2, 3))), "add_bias")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped (out, in); leading batch dim kept, the rest flattened."""
    if x.data.ndim > 2:
        x = flatten(x)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {w.shape} / bias {b.shape}")
    X, W = x.data, w.data
    out = X @ W.T + b.data

    def bw(g):
        return (g @ W if x.requires_grad else None, g.T @ X if w.requires_grad else None, g.sum(axis=0))

    return _make(out, (x, w, b), bw, "dense")


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Patches of a 3x3 zero-padded window as an (N, C*9, H*W) array."""
    n, c, h, w = x.shape
    cols = np.zeros((n, c, 3, 3, h, w))
    for i in range(3):
        hs, he = max(0, 1 - i), min(h, h + 1 - i)
        for j in range(3):
            ws, we = max(0, 1 - j), min(w, w + 1 - j)
            cols[:, :, i, j, hs:he, ws:we] = x[:, :, hs + i - 1:he + i - 1, ws + j - 1:we + j - 1]
    return cols.reshape(n, c * 9, h * w)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3, stride 1, zero 'same' padding convolution on NCHW input.

    ``w`` has shape (out_channels, in_channels, 3, 3). The input gradient is
    itself a same-padded convolution with the flipped, channel-transposed kernel.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col3(x.data)
    out = np.matmul(w.data.reshape(o, -1), cols).reshape(n, o, h, wd)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gm = g.reshape(n, o, h * wd)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            wf = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gx = np.matmul(wf, _im2col3(g)).reshape(n, c, h, wd)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Gradient goes to the first maximal element of each window in row-major order.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xs = x.data[:, :, : ho * 2, : wo * 2]
    win = xs.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((n, c, ho, wo, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape)
        gx[:, :, : ho * 2, : wo * 2] = (
            gw.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * 2, wo * 2)
        )
        return (gx,)

    return _make(out, (x,), bw, "maxpool2d")


# ---------------------------------------------------------------------------
# batch normalization


TRAIN = "train"
EVAL = "eval"


@dataclass
class BatchNormState:
    """Learnable affine parameters plus running statistics for one BN layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = TRAIN

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def _bn_axes(x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batchnorm: expected 2-D or 4-D input, got {x.shape}")


def batch_statistics(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over batch (and spatial) axes."""
    axes, _ = _bn_axes(x)
    mu = x.mean(axis=axes)
    return mu, x.var(axis=axes)


def batchnorm(x: Tensor, state: BatchNormState, mode: str | None = None, update_stats: bool = True) -> Tensor:
    mode = state.mode if mode is None else mode
    if x.data.ndim not in (2, 4) or x.shape[1] != state.channels:
        raise ShapeError(f"batchnorm: input {x.shape} incompatible with {state.channels} channels")
    axes, bshape = _bn_axes(x.data)
    gamma, beta = state.gamma, state.beta
    G = gamma.data.reshape(bshape)

    if mode == EVAL:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv.reshape(bshape)
        out = G * xhat + beta.data.reshape(bshape)

        def bw_eval(g):
            return g * (G * inv.reshape(bshape)), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return _make(out, (x, gamma, beta), bw_eval, "batchnorm")

    if x.shape[0] < 2:
        raise ValueError("batchnorm requires batch >= 2")
    mu, var = batch_statistics(x.data)
    inv = 1.0 / np.sqrt(var + state.eps)
    xc = x.data - mu.reshape(bshape)
    xhat = xc * inv.reshape(bshape)
    out = G * xhat + beta.data.reshape(bshape)
    if update_stats:
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
    m_count = x.data.size // state.channels

    def bw_train(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gx = (G * inv.reshape(bshape) / m_count) * (
                m_count * g - gb.reshape(bshape) - xhat * gg.reshape(bshape)
            )
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw_train, "batchnorm")


# ---------------------------------------------------------------------------
# probabilities and losses


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    s = _softmax_np(x.data)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Batch-mean cross-entropy of one-hot ``labels`` under softmax(``logits``)."""
    y = np.asarray(labels, dtype=DTYPE)
    z = logits.data
    if z.ndim != 2 or z.shape[1] < 2 or y.shape != z.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} incompatible with labels {y.shape}")
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
    n = z.shape[0]
    loss = np.asarray(np.sum(y * (lse - z)) / n)
    p = np.exp(z - lse)

    def bw(g):
        return (g * (p * y.sum(axis=1, keepdims=True) - y) / n,)

    return _make(loss, (logits,), bw, "softmax_cross_entropy")


def mse_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_mean: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def bw(g):
        ga = g * 2.0 * d / n
        return ga, -ga

    return _make(np.asarray(np.mean(d * d)), (a, b), bw, "mse_mean")


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], k))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ---------------------------------------------------------------------------


def forward_primitive(kind: str, inputs: Sequence[Tensor], params: dict | None = None) -> Tensor:
    """Dispatch a named primitive. ``params`` carries non-tensor arguments."""
    params = params or {}
    table = {
        "matmul": lambda: matmul(*inputs),
        "add_bias": lambda: add_bias(*inputs),
        "relu": lambda: relu(*inputs),
        "conv2d": lambda: conv2d(*inputs),
        "maxpool2d": lambda: maxpool2d(*inputs),
        "flatten": lambda: flatten(*inputs),
        "batchnorm": lambda: batchnorm(inputs[0], params["state"], params.get("mode")),
        "softmax": lambda: softmax(*inputs),
        "mean": lambda: mean(*inputs),
    }
    if kind not in table:
        raise ValueError(f"unknown primitive {kind!r}")
    return table[kind]()


@dataclass
class Graph:
    """Snapshot of the nodes reachable from a tensor, ordered parents-first."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def of(cls, root: Tensor) -> "Graph":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t.node_id not in seen:
                seen[t.node_id] = t
                stack.extend(t._parents)
        return cls([seen[k] for k in sorted(seen)])
