"""Dense float64 reverse-mode automatic differentiation.

Tensors wrap numpy arrays and remember the operation that produced them;
``backward`` walks the recorded graph in reverse topological order and
accumulates gradients into every tensor that requires them. Everything is
64-bit and single-threaded per graph, so identical inputs give bit-identical
results on one platform.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, ndtr

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_MASKED_SCORE = -1e30   # additive attention bias; exp() underflows to exactly 0


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class MaskError(ValueError):
    """Raised when an attention row has no valid key to attend to."""


class Tensor:
    """A node in the computation graph.

    ``data`` is always a float64 ndarray. ``grad`` is populated during
    backward for tensors with ``requires_grad``; for parameters it is a
    persistent buffer that accumulates across backward calls until
    ``zero_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # Small amount of operator sugar; model code mostly calls the module
    # functions directly.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named, trainable tensor with a persistent gradient buffer.

    A frozen parameter keeps requires_grad False, so its gradient stays
    identically zero through any backward pass.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False

    def unfreeze(self) -> None:
        self.trainable = True
        self.requires_grad = True


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to produce it."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward_fn)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward_fn(g):
        a._accumulate(g * s)

    return _make(a.data * s, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    """Batched matrix product; leading batch dimensions broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires at least 2-d operands, got {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, (a, b), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias, with weight of shape (in, out)."""
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= weight.shape[0]:
        raise ShapeError(f"embedding ids outside [0, {weight.shape[0]})")
    data = weight.data[ids]

    def backward_fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        weight._accumulate(gw)

    return _make(data, (weight,), backward_fn)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward_fn(g):
        x._accumulate(g.reshape(x.data.shape))

    return _make(data, (x,), backward_fn)


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    data = np.swapaxes(x.data, axis1, axis2)

    def backward_fn(g):
        x._accumulate(np.swapaxes(g, axis1, axis2))

    return _make(data, (x,), backward_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learnable scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_sigma = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_sigma
    data = xhat * gamma.data + beta.data

    def backward_fn(g):
        sum_axes = tuple(range(g.ndim - 1))
        gamma._accumulate((g * xhat).sum(axis=sum_axes))
        beta._accumulate(g.sum(axis=sum_axes))
        ghat = g * gamma.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        x._accumulate((ghat - m1 - xhat * m2) * inv_sigma)

    return _make(data, (x, gamma, beta), backward_fn)


def rms_norm(x: Tensor, gamma: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis (no recentering)."""
    ms = (x.data ** 2).mean(axis=-1, keepdims=True)
    inv_r = 1.0 / np.sqrt(ms + eps)
    xhat = x.data * inv_r
    data = xhat * gamma.data

    def backward_fn(g):
        sum_axes = tuple(range(g.ndim - 1))
        gamma._accumulate((g * xhat).sum(axis=sum_axes))
        g2 = g * gamma.data
        n = x.data.shape[-1]
        # d/dx of x / sqrt(mean(x^2)+eps): diagonal term minus the
        # projection of the upstream gradient onto x.
        dot = (g2 * x.data).sum(axis=-1, keepdims=True)
        x._accumulate(g2 * inv_r - x.data * (dot / n) * inv_r ** 3)

    return _make(data, (x, gamma), backward_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        x._accumulate((g - dot) * y)

    return _make(y, (x,), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    x = _as_tensor(x)
    phi_cdf = ndtr(x.data)
    data = x.data * phi_cdf

    def backward_fn(g):
        pdf = np.exp(-0.5 * x.data ** 2) * _INV_SQRT_2PI
        x._accumulate(g * (phi_cdf + x.data * pdf))

    return _make(data, (x,), backward_fn)


def rotate_half(x: Tensor) -> Tensor:
    """(x1, x2) -> (-x2, x1) over the two halves of the last axis."""
    d = x.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"rotate_half needs an even last axis, got {x.shape}")
    h = d // 2
    data = np.concatenate([-x.data[..., h:], x.data[..., :h]], axis=-1)

    def backward_fn(g):
        gx = np.concatenate([g[..., h:], -g[..., :h]], axis=-1)
        x._accumulate(gx)

    return _make(data, (x,), backward_fn)


def take_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """Gather one sequence position per batch row: out[b] = x[b, positions[b]]."""
    positions = np.asarray(positions, dtype=np.int64)
    batch = np.arange(x.shape[0])
    data = x.data[batch, positions]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[batch, positions] = g
        x._accumulate(gx)

    return _make(data, (x,), backward_fn)


ATTENTION_MODES = ("bidirectional", "causal", "cross")


def attention(q: Tensor, k: Tensor, v: Tensor, mode: str, pad_mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention over (batch, heads, time, head_dim).

    ``pad_mask`` is a boolean (batch, key_time) array marking valid keys.
    Causal mode additionally blocks attention to future positions. Cross
    mode is bidirectional attention against a separate key/value source.
    Masked keys receive an additive bias whose exp underflows to exactly
    zero, so padding cannot leak into any output.
    """
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    if q.ndim != 4 or k.ndim != 4 or v.ndim != 4:
        raise ShapeError(f"attention expects 4-d q/k/v, got {q.shape}, {k.shape}, {v.shape}")
    head_dim = q.shape[-1]
    tq, tk = q.shape[2], k.shape[2]

    allowed = np.asarray(pad_mask, dtype=bool)[:, None, None, :]
    allowed = np.broadcast_to(allowed, (q.shape[0], 1, tq, tk)).copy()
    if mode == "causal":
        if tq != tk:
            raise ShapeError(f"causal attention needs square time axes, got {tq} and {tk}")
        allowed &= np.tril(np.ones((tq, tk), dtype=bool))[None, None]
    if not allowed.any(axis=-1).all():
        raise MaskError("attention row with every key masked")

    bias = np.where(allowed, 0.0, _MASKED_SCORE)
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(head_dim))
    weights = softmax_lastdim(add(scores, Tensor(bias)))
    return matmul(weights, v)


def l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over the cells where mask is 1."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    if mask is None:
        mask = np.ones_like(target)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != target.shape:
        raise ShapeError(f"l1_loss: mask {mask.shape} vs target {target.shape}")
    n = mask.sum()
    if n == 0:
        raise ValueError("l1_loss: mask selects no cells")
    diff = pred.data - target
    data = np.array((np.abs(diff) * mask).sum() / n)

    def backward_fn(g):
        pred._accumulate(g * np.sign(diff) * mask / n)

    return _make(data, (pred,), backward_fn)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable binary cross-entropy on raw logits.

    Uses max(x, 0) - x*t + log(1 + exp(-|x|)), averaged over all elements.
    """
    t = np.asarray(targets, dtype=np.float64)
    if logits.shape != t.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    x = logits.data
    n = x.size
    if n == 0:
        raise ValueError("bce_with_logits: empty input")
    data = np.array((np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))).sum() / n)

    def backward_fn(g):
        logits._accumulate(g * (expit(x) - t) / n)

    return _make(data, (logits,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    data = np.array(x.data.sum())

    def backward_fn(g):
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _make(data, (x,), backward_fn)


def backward(loss: Tensor) -> None:
    """Populate gradients of every requires_grad tensor reachable from loss."""
    if loss.data.shape != ():
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            stack.append((parent, False))

    loss._accumulate(np.array(1.0))
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
