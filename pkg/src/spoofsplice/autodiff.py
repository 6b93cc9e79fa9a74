"""A small reverse-mode autodiff engine over numpy arrays.

Only the operations the detector needs are provided.  Every op records its
parents and a backward closure; ``Tensor.backward`` replays the recorded
nodes in exact reverse construction order.  Channels are always the last
axis (``[B, H, W, C]`` images, ``[B, T, C]`` sequences).
"""
from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

Array = np.ndarray


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class DegenerateError(ValueError):
    pass


class GradCheckError(RuntimeError):
    pass


_order = itertools.count()


def _released(g):
    raise RuntimeError("graph already released")


_grad_enabled = True
_check_finite = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (inference, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_order", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: Array = arr
        self.grad: Optional[Array] = None
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._order = next(_order)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> Array:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def backward(self, grad: Optional[Array] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            if node._backward is _released:
                raise RuntimeError("backward through a graph that was already differentiated")
            nodes[id(node)] = node
            stack.extend(node._parents)
        # ascending, so popping yields consumers before producers
        order = sorted(nodes.values(), key=lambda n: n._order)
        del nodes, stack
        pending: Dict[int, Array] = {id(self): np.asarray(grad, dtype=self.dtype)}
        while order:
            node = order.pop()
            g = pending.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parents, backward = node._parents, node._backward
            # drop the closure so saved activations are freed as the pass goes
            node._parents, node._backward = (), _released
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
            del parents, backward, g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def record(data: Array, parents: Sequence[Tensor], backward: Callable[[Array], Sequence[Optional[Array]]],
           name: Optional[str] = None) -> Tensor:
    """Wrap an op result; ``backward(g)`` returns one gradient per parent."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {name or 'op'}")
    out = Tensor(data, name=name)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: Array, shape: Tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                  "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return record(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return record(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def swish(x: Tensor) -> Tensor:
    s = expit(x.data)
    return record(x.data * s, (x,), lambda g: (g * (s + x.data * s * (1 - s)),), "swish")


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: first half * sigmoid(second half)."""
    d2 = x.shape[-1]
    if d2 % 2:
        raise ShapeError(f"glu needs an even last axis, got {d2}")
    d = d2 // 2
    a, b = x.data[..., :d], x.data[..., d:]
    s = expit(b)

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=-1),)

    return record(a * s, (x,), backward, "glu")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (x,), backward, "softmax")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; no gradient where the floor is active."""
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data
    active = x.data > floor if floor > 0 else np.ones(x.shape, dtype=bool)
    return record(np.log(clipped), (x,), lambda g: (np.where(active, g / clipped, 0),), "log")


# -- shape ---------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Slice ``[start:stop]`` along ``axis``."""
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record(x.data[index], (x,), backward, "take")


def split(x: Tensor, parts: int, axis: int = -1) -> Tuple[Tensor, ...]:
    n = x.shape[axis]
    if n % parts:
        raise ShapeError(f"cannot split axis of {n} into {parts} equal parts")
    w = n // parts
    return tuple(take(x, i * w, (i + 1) * w, axis) for i in range(parts))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return tuple(out)

    return record(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward, "concat")


# -- reductions and pools ------------------------------------------------

def reduce_sum(x: Tensor, axis: Union[int, Tuple[int, ...], None] = None) -> Tensor:
    axes = tuple(range(x.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    axes = tuple(a % x.ndim for a in axes)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return record(np.asarray(x.data.sum(axis=axes)), (x,), backward, "sum")


def mean(x: Tensor, axis: Union[int, Tuple[int, ...], None] = None) -> Tensor:
    axes = tuple(range(x.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    axes = tuple(a % x.ndim for a in axes)
    count = math.prod(x.shape[a] for a in axes)

    def backward(g):
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return record(x.data.mean(axis=axes), (x,), backward, "mean")


def global_avg_pool_2d(x: Tensor) -> Tensor:
    """[B, H, W, C] -> [B, C]."""
    if x.ndim != 4:
        raise ShapeError(f"expected [B,H,W,C], got {x.shape}")
    return mean(x, (1, 2))


def avg_pool_axis(x: Tensor, axis: int = 2) -> Tensor:
    """Average one axis away; ``[B, T, F, C] -> [B, T, C]`` for the default."""
    if x.ndim != 4:
        raise ShapeError(f"expected [B,T,F,C], got {x.shape}")
    return mean(x, axis)


def global_avg_pool_1d(x: Tensor) -> Tensor:
    """[B, T, C] -> [B, C]."""
    if x.ndim != 3:
        raise ShapeError(f"expected [B,T,C], got {x.shape}")
    return mean(x, 1)


# -- linear layers -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with identical leading dims."""
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return record(a.data @ b.data, (a, b), backward, "matmul")


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        return (gx, gw, g2.sum(axis=0)) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return record(out.reshape(*lead, w.shape[1]), parents, backward, "dense")


def _pair(v) -> Tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def same_padding(size: int, k: int, stride: int) -> Tuple[int, int, int]:
    """(pad_low, pad_high, out_size) for 'same' padding; extra pad goes high."""
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2, out


def conv2d(x: Tensor, k: Tensor, stride=1, padding: str = "same") -> Tensor:
    """Cross-correlation of ``x[B,H,W,Cin]`` with ``k[kh,kw,Cin,Cout]``."""
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape}, {k.shape}")
    bsz, h, w, cin = x.shape
    kh, kw, kcin, cout = k.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {kcin}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ShapeError("stride must be >= 1")
    if padding == "same":
        pt, pb, ho = same_padding(h, kh, sh)
        pl, pr, wo = same_padding(w, kw, sw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
        ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise ShapeError("conv2d valid: kernel larger than input")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    kmat = k.data.reshape(kh * kw * cin, cout)
    pointwise = kh == kw == 1 and sh == sw == 1 and not (pt or pb or pl or pr)

    def padded():
        if pt or pb or pl or pr:
            return np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        return x.data

    def columns(xp):
        s = xp.strides
        win = np.lib.stride_tricks.as_strided(
            xp, shape=(bsz, ho, wo, kh, kw, cin),
            strides=(s[0], s[1] * sh, s[2] * sw, s[1], s[2], s[3]), writeable=False)
        return win.reshape(bsz * ho * wo, kh * kw * cin)

    if pointwise:
        out = (x.data.reshape(-1, cin) @ kmat).reshape(bsz, ho, wo, cout)
    else:
        out = (columns(padded()) @ kmat).reshape(bsz, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if pointwise:
            return (g2 @ kmat.T).reshape(x.shape), (x.data.reshape(-1, cin).T @ g2).reshape(k.shape)
        # columns are recomputed rather than kept alive across the pass
        gk = (columns(padded()).T @ g2).reshape(k.shape)
        gcols = (g2 @ kmat.T).reshape(bsz, ho, wo, kh, kw, cin)
        gxp = np.zeros((bsz, h + pt + pb, w + pl + pr, cin), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw, :] += gcols[:, :, :, i, j, :]
        return gxp[:, pt:pt + h, pl:pl + w, :], gk

    return record(out, (x, k), backward, "conv2d")


def depthwise_padding(kw: int) -> Tuple[int, int]:
    left = (kw - 1) // 2
    return left, kw - 1 - left


def depthwise_conv1d(x: Tensor, k: Tensor) -> Tensor:
    """Per-channel 'same' cross-correlation of ``x[B,T,C]`` with ``k[kw,C]``.

    Even kernels pad ``kw/2 - 1`` on the left and ``kw/2`` on the right.
    """
    if x.ndim != 3 or k.ndim != 2 or k.shape[1] != x.shape[2]:
        raise ShapeError(f"depthwise_conv1d: input {x.shape} vs kernel {k.shape}")
    bsz, t, c = x.shape
    kw = k.shape[0]
    left, right = depthwise_padding(kw)
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(kw):
        out += xp[:, j:j + t, :] * k.data[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(k.data)
        for j in range(kw):
            gxp[:, j:j + t, :] += g * k.data[j]
            gk[j] = (g * xp[:, j:j + t, :]).sum(axis=(0, 1))
        return gxp[:, left:left + t, :], gk

    return record(out, (x, k), backward, "depthwise_conv1d")


# -- normalization -------------------------------------------------------

def _normalize_backward(g, xhat, inv_std, gamma, axes, count):
    gxhat = g * gamma
    return inv_std / count * (
        count * gxhat
        - gxhat.sum(axis=axes, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
    )


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Array, running_var: Array,
               mode: str = "train", eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Per-channel batch norm over every axis but the last.

    In train mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm parameters must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        count = x.size // c
        if count == 0:
            raise DegenerateError("batch_norm on an empty batch")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std

        def backward(g):
            # recomputed so the graph holds only the input, not a normalized copy
            xhat = (x.data - mu) * inv_std
            gx = _normalize_backward(g, xhat, inv_std, gamma.data, axes, count)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    elif mode == "infer":
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.astype(x.dtype)) * inv_std

        def backward(g):
            return g * gamma.data * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return record(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm parameters must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = _normalize_backward(g, xhat, inv_std, gamma.data, -1, d)
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


# -- attention and regularization ---------------------------------------

def mhsa(x: Tensor, heads: int, head_size: int, wq: Tensor, bq: Tensor, wk: Tensor, bk: Tensor,
         wv: Tensor, bv: Tensor, wo: Tensor, bo: Tensor) -> Tensor:
    """Unmasked multi-head scaled dot-product self-attention over ``x[B,T,D]``."""
    bsz, t, d = x.shape
    inner = heads * head_size
    for w in (wq, wk, wv):
        if w.shape != (d, inner):
            raise ShapeError(f"mhsa projection {w.shape} != ({d}, {inner})")
    if wo.shape != (inner, d):
        raise ShapeError(f"mhsa output projection {wo.shape} != ({inner}, {d})")

    def heads_first(y):
        return transpose(reshape(y, (bsz, t, heads, head_size)), (0, 2, 1, 3))

    q = heads_first(dense(x, wq, bq))
    k = heads_first(dense(x, wk, bk))
    v = heads_first(dense(x, wv, bv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_size))
    ctx = matmul(softmax(scores, axis=-1), v)
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, t, inner))
    return dense(ctx, wo, bo)


def dropout(x: Tensor, rate: float, mode: str = "train", seed: Optional[int] = None) -> Tensor:
    """Inverted dropout; identity in infer mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "infer" or rate == 0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= rate
    factor = (keep / (1.0 - rate)).astype(x.dtype)
    return record(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


# -- verification --------------------------------------------------------

def grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-4,
               coords_per_param: int = 100, seed: int = 0, floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from ``params`` and returns a scalar.
    Up to ``coords_per_param`` random coordinates of each parameter are
    scanned; the denominator is ``max(|analytic|, |numeric|, floor)``.  The
    floor keeps parameters with an exactly zero gradient (a key bias under
    softmax, say) from turning finite-difference round-off into a failure.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise GradCheckError("loss is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if n <= coords_per_param else rng.choice(n, coords_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError("loss became non-finite under perturbation")
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
