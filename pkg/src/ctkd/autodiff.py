"""Dense tensors with reverse-mode automatic differentiation.

Every op that touches a tensor with ``requires_grad`` records a node holding
its parents and a closure mapping the output gradient to parent gradients.
``backward`` walks the reachable nodes in exact reverse creation order.

Only the op set a wide residual network needs is provided: convolution,
batch normalization, relu, linear, average pooling, elementwise arithmetic,
softmax/log-softmax and reductions.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ParameterError, ShapeError, StateError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_sequence = itertools.count()


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the precision used for newly created tensors."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(_DEFAULT_DTYPE)
    return arr


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_sequence)
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> Tensor:
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _lift(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph traversal ----------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored; callers zero them between
    optimizer steps. The recorded graph is released afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StateError("graph already consumed by a previous backward; re-run the forward pass")
    if not loss.requires_grad:
        raise StateError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        if t._consumed:
            raise StateError("graph shares nodes already consumed by another backward")
        stack.extend(p for p in t._parents if p.requires_grad)

    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if t._backward is None:
            if g is not None:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg

    for t in order:
        if t._backward is not None:
            t._backward = None
            t._parents = ()
            t._consumed = True
    loss._consumed = True


def detach(t: Tensor) -> Tensor:
    """Same data, cut from the graph: nothing upstream receives gradient through it."""
    return Tensor(t.data, requires_grad=False)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return _node(xd**exponent, (x,), lambda g: (g * exponent * xd ** (exponent - 1),))


def abs_pow(x: Tensor, p: float) -> Tensor:
    """|x|**p, differentiable everywhere for p > 1."""
    xd = x.data
    ax = np.abs(xd)
    return _node(ax**p, (x,), lambda g: (g * p * ax ** (p - 1) * np.sign(xd),))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _node(out, (x,), lambda g: (g * (out > 0),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


# -- shape and reductions -------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


def norm(x: Tensor, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at the origin is zero."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis))

    def bw(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1)
        return (np.where(nk > 0, np.expand_dims(g, axis) * xd / safe, 0).astype(xd.dtype, copy=False),)

    return _node(n, (x,), bw)


def l2_normalize(x: Tensor, eps: float = 1e-8, axis: int = -1) -> Tensor:
    """x / (||x|| + eps) along ``axis``; all-zero rows map to zero without NaN."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = n + eps
    out = xd / denom

    def bw(g):
        dot = (g * xd).sum(axis=axis, keepdims=True)
        safe = np.where(n > 0, n, 1)
        corr = np.where(n > 0, xd * dot / (safe * denom * denom), 0)
        return (g / denom - corr,)

    return _node(out, (x,), bw)


# -- probability ----------------------------------------------------------

def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise softmax of logits / tau, stabilized by max subtraction."""
    _check_tau(tau)
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return ((out * (g - (g * out).sum(axis=-1, keepdims=True))) / tau,)

    return _node(out, (logits,), bw)


softmax_with_temperature = softmax


def log_softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def bw(g):
        return ((g - probs * g.sum(axis=-1, keepdims=True)) / tau,)

    return _node(out, (logits,), bw)


# -- layers ---------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias with weight shaped [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output length along one axis, flooring partial windows."""
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigError(
            f"conv2d: kernel {kernel} with padding {padding} does not fit input size {size}"
        )
    return out


def _im2col(xd: np.ndarray, r: int, s: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Patches as a [N*Ho*Wo, R*S*C] matrix (channel fastest)."""
    xh = xd.transpose(0, 2, 3, 1)
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    win = sliding_window_view(xh, (r, s), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, r * s * xd.shape[1])


def _kernel_matrix(kd: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(kd.transpose(0, 2, 3, 1)).reshape(kd.shape[0], -1)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x [N,C,H,W] with kernel [K,C,R,S]."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, w = x.shape
    k, _, r, s = kernel.shape
    ho = conv_output_size(h, r, stride, padding)
    wo = conv_output_size(w, s, stride, padding)

    xd, kd = x.data, kernel.data
    cols = _im2col(xd, r, s, stride, padding, ho, wo)
    kmat = _kernel_matrix(kd)
    out = np.ascontiguousarray((cols @ kmat.T).reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def bw(g):
        grows = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, k)
        gk = np.ascontiguousarray((grows.T @ cols).reshape(k, r, s, c).transpose(0, 3, 1, 2))
        if stride == 1 and r == s and padding <= r - 1:
            # input gradient: full correlation with the flipped, channel-swapped kernel
            fmat = _kernel_matrix(kd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gcols = _im2col(g, r, s, 1, r - 1 - padding, h, w)
            gx = (gcols @ fmat.T).reshape(n, h, w, c)
        else:
            dcols = (grows @ kmat).reshape(n, ho, wo, r, s, c)
            gx = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=xd.dtype)
            for i in range(r):
                for j in range(s):
                    gx[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, :, i, j]
            gx = gx[:, padding : padding + h, padding : padding + w]
        return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), gk

    return _node(out, (x, kernel), bw)


class RunningStats:
    """Batch-norm running mean/variance for one layer."""

    def __init__(self, mean: np.ndarray | None = None, var: np.ndarray | None = None):
        self.mean = mean
        self.var = var

    @classmethod
    def fresh(cls, channels: int, dtype=None) -> RunningStats:
        dtype = dtype or _DEFAULT_DTYPE
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None

    def copy(self) -> RunningStats:
        if not self.initialized:
            return RunningStats()
        return RunningStats(self.mean.copy(), self.var.copy())


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics and folds them into ``stats`` as an
    exponential moving average (unbiased variance); eval mode reads ``stats``.
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    n, c, h, w = x.shape
    count = n * h * w
    xd, gd = x.data, gamma.data
    view = (1, c, 1, 1)

    if train:
        if count < 2:
            raise ShapeError(f"batch_norm: train mode needs N*H*W >= 2, got {count}")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if not stats.initialized:
            stats.mean = np.zeros(c, dtype=xd.dtype)
            stats.var = np.ones(c, dtype=xd.dtype)
        stats.mean = ((1 - momentum) * stats.mean + momentum * mu).astype(stats.mean.dtype)
        stats.var = ((1 - momentum) * stats.var + momentum * var * (count / (count - 1))).astype(stats.var.dtype)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu.reshape(view)) * inv.reshape(view)
        out = xhat * gd.reshape(view) + beta.data.reshape(view)

        def bw(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gd.reshape(view)
            gx = (inv / count).reshape(view) * (
                count * dxhat
                - dxhat.sum(axis=(0, 2, 3)).reshape(view)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(view)
            )
            return gx, ggamma, gbeta

    else:
        if not stats.initialized:
            raise StateError("batch_norm: eval mode requires initialized running statistics")
        inv = (1.0 / np.sqrt(stats.var + eps)).astype(xd.dtype)
        xhat = (xd - stats.mean.reshape(view)) * inv.reshape(view)
        out = xhat * gd.reshape(view) + beta.data.reshape(view)

        def bw(g):
            return (
                g * (gd * inv).reshape(view),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    return _node(out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def avg_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping size x size average pooling."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"avg_pool2d: spatial dims {(h, w)} not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))

    def bw(g):
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size),)

    return _node(out, (x,), bw)
