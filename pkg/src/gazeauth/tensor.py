"""Minimal numpy-backed reverse-mode autodiff engine.

Tensors wrap an ndarray and record the operations that produced them;
``backward()`` on a scalar loss walks the graph in reverse topological
order and accumulates gradients into every tensor that requires them.
The op set is exactly what the classifier backends need: broadcasting
arithmetic, (batched) matmul, shape moves, concat, relu/exp/log,
reductions, softmax, layer norm, dilated 1-D convolution, dropout, and
cross-entropy. Dtype follows the input arrays; gradient-check tests run
in float64, training may run in float32.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeMismatch(Exception):
    pass


class NoTape(Exception):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def _accumulate(self, g: np.ndarray):
        # copy on first touch: g may be shared with a sibling's gradient
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from this scalar through the recorded graph."""
        if self.data.size != 1:
            raise ShapeMismatch("backward() requires a scalar tensor")
        if not self._parents and self._backward_fn is None:
            raise NoTape("no forward pass recorded for this tensor")
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def backward(loss: Tensor) -> None:
    """Populate gradients of everything the scalar ``loss`` depends on."""
    loss.backward()


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.maximum(x.data, 0)

    def bwd(g):
        x._accumulate(g * mask)

    return _make(out_data, (x,), bwd)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def bwd(g):
        x._accumulate(g * out_data)

    return _make(out_data, (x,), bwd)


def log(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.log(x.data)

    def bwd(g):
        x._accumulate(g / x.data)

    return _make(out_data, (x,), bwd)


# shape ------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def bwd(g):
        x._accumulate(g.reshape(old_shape))

    return _make(out_data, (x,), bwd)


def swapaxes(x, axis_a: int, axis_b: int) -> Tensor:
    x = as_tensor(x)
    out_data = np.swapaxes(x.data, axis_a, axis_b)

    def bwd(g):
        x._accumulate(np.swapaxes(g, axis_a, axis_b))

    return _make(out_data, (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _make(out_data, tensors, bwd)


# reductions ---------------------------------------------------------------

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _make(out_data, (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / out_data.size

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape) / count)

    return _make(out_data, (x,), bwd)


# linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics on leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch("matmul expects >= 2-D tensors")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(
            f"inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


# neural primitives --------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = as_tensor(x)
    out_data = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out_data, out=out_data)
    out_data /= out_data.sum(axis=axis, keepdims=True)

    def bwd(g):
        # dL/dx = y * (g - sum(g * y))
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate(out_data * (g - inner))

    return _make(out_data, (x,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out_data = xhat * gamma.data + beta.data

    def bwd(g):
        if gamma.requires_grad:
            gamma._accumulate(_unbroadcast(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta._accumulate(_unbroadcast(g, beta.data.shape))
        if x.requires_grad:
            gx_hat = g * gamma.data
            term = gx_hat - gx_hat.mean(axis=-1, keepdims=True)
            term -= xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv_std)

    return _make(out_data, (x, gamma, beta), bwd)


def conv1d(x, kernels, dilation: int = 1) -> Tensor:
    """Same-length dilated 1-D convolution.

    ``x`` is (B, C_in, T) (or (C_in, T), promoted), ``kernels`` is
    (C_out, C_in, k) with odd k; borders are zero-padded so the output
    keeps length T. Implemented as one matmul per kernel tap.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3 or kernels.data.ndim != 3:
        raise ShapeMismatch("conv1d expects (B, C_in, T) input and (C_out, C_in, k) kernels")
    B, C_in, T = xd.shape
    C_out, C_in_k, k = kernels.data.shape
    if C_in_k != C_in:
        raise ShapeMismatch(f"kernel C_in {C_in_k} != input C_in {C_in}")
    if k % 2 == 0:
        raise ShapeMismatch("kernel size must be odd for symmetric same-padding")
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")

    pad = (k - 1) // 2 * dilation
    xpad = np.zeros((B, C_in, T + 2 * pad), dtype=xd.dtype)
    xpad[:, :, pad : pad + T] = xd
    out_data = np.zeros((B, C_out, T), dtype=xd.dtype)
    for j in range(k):
        # tap j reads input at offset (j - (k-1)/2) * dilation
        seg = xpad[:, :, j * dilation : j * dilation + T]
        out_data += np.einsum("oc,bct->bot", kernels.data[:, :, j], seg, optimize=True)

    def bwd(g):
        gb = g[None] if squeeze and g.ndim == 2 else g
        if x.requires_grad:
            gx_pad = np.zeros_like(xpad)
            for j in range(k):
                gx_pad[:, :, j * dilation : j * dilation + T] += np.einsum(
                    "oc,bot->bct", kernels.data[:, :, j], gb, optimize=True
                )
            gx = gx_pad[:, :, pad : pad + T]
            x._accumulate(gx[0] if squeeze else gx)
        if kernels.requires_grad:
            gk = np.empty_like(kernels.data)
            for j in range(k):
                seg = xpad[:, :, j * dilation : j * dilation + T]
                gk[:, :, j] = np.einsum("bot,bct->oc", gb, seg, optimize=True)
            kernels._accumulate(gk)

    return _make(out_data[0] if squeeze else out_data, (x, kernels), bwd)


def dropout(x, rate: float, rng: Optional[np.random.Generator] = None, train: bool = False) -> Tensor:
    """Inverted dropout: train mode zeroes with prob ``rate`` and rescales
    survivors by 1/(1-rate); eval mode is the identity."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    draw_dtype = np.float32 if x.data.dtype == np.float32 else np.float64
    mask = (rng.random(x.data.shape, dtype=draw_dtype) >= rate).astype(x.data.dtype)
    mask /= 1.0 - rate
    out_data = x.data * mask

    def bwd(g):
        x._accumulate(g * mask)

    return _make(out_data, (x,), bwd)


class InvalidTarget(Exception):
    pass


def cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeMismatch("cross_entropy expects (B, N) logits")
    B, N = logits.data.shape
    if targets.shape != (B,):
        raise ShapeMismatch(f"targets shape {targets.shape} != ({B},)")
    if targets.min() < 0 or targets.max() >= N:
        raise InvalidTarget(f"targets must lie in [0, {N})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    out_data = np.asarray(-log_probs[np.arange(B), targets].mean(), dtype=logits.data.dtype)

    def bwd(g):
        probs = np.exp(log_probs)
        probs[np.arange(B), targets] -= 1.0
        logits._accumulate(g * probs / B)

    return _make(out_data, (logits,), bwd)
