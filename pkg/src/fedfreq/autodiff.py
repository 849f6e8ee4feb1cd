"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op returns a new :class:`Tensor`; parents and a backward closure are
recorded only when some input requires a gradient and grad mode is on.
Arrays are never mutated after an op writes them, so shallow copies of
parameter trees are safe to share.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested for a batch of one."""


class LabelError(ValueError):
    """Class label outside [0, n_classes)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior grads are not needed after propagation
                if node._parents:
                    node.grad = None

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: _accum(a, 2.0 * a.data * g))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accum(a, g / a.data))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: _accum(a, g * out))


def tensor_sum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: _accum(a, g.reshape(a.shape)))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def take_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather along axis 0; ``index`` must be a permutation or subset without repeats."""
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        _accum(a, full)

    return _make(a.data[index], (a,), backward)


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    out = x.data * slope
    np.maximum(x.data, out, out=out)  # valid for 0 <= slope <= 1
    return _make(out, (x,), lambda g: _accum(x, np.where(x.data > 0, g, g * slope)))


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accum(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _make(out, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        _accum(x, g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, mode: str) -> Tensor:
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: _accum(x, g * keep))


# ---------------------------------------------------------------------------
# layers
#
# Layer ops accept optional leading group dims on both input and weights
# (e.g. input [G, B, C, L] with kernel [G, O, C, K]); each group is an
# independent layer. This lets several same-shaped encoders run as one op.


def _padded(x: np.ndarray, pads: Sequence[int]) -> np.ndarray:
    """Zero-pad the trailing ``len(pads)`` axes symmetrically; always contiguous."""
    if not any(pads):
        return np.ascontiguousarray(x)
    k = len(pads)
    shape = x.shape[:-k] + tuple(n + 2 * p for n, p in zip(x.shape[-k:], pads))
    out = np.zeros(shape)
    out[(Ellipsis,) + tuple(slice(p, p + n) for n, p in zip(x.shape[-k:], pads))] = x
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: _accum(a, g.transpose(inv)))


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    if x.shape[-1] != weight.shape[-2]:
        raise DimensionError(f"dense input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data + bias.data[..., None, :]

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ np.swapaxes(weight.data, -1, -2))
        if weight.requires_grad:
            _accum(weight, _unbroadcast(np.swapaxes(x.data, -1, -2) @ g, weight.shape))
        if bias.requires_grad:
            _accum(bias, _unbroadcast(g.sum(axis=-2), bias.shape))

    return _make(out, (x, weight, bias), backward)


def _shifted(xp: np.ndarray, offsets: Sequence[tuple[int, ...]], out_shape, stride: int) -> np.ndarray:
    """Stack strided slices of the trailing axes: [..., n_offsets, *out_shape]."""
    idx = [
        (Ellipsis,) + tuple(slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_shape))
        for off in offsets
    ]
    return np.stack([xp[i] for i in idx], axis=-1 - len(out_shape)), idx


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if kernel.data.ndim < 3 or x.data.ndim != kernel.data.ndim:
        raise DimensionError("conv1d expects input [..., B, C, L] and kernel [..., O, C, K]")
    *G, B, C, L = x.shape
    O, Ck, K = kernel.shape[-3:]
    G = tuple(G)
    if Ck != C:
        raise DimensionError(f"kernel has {Ck} input channels, input has {C}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    Lp = L + 2 * padding
    if K > Lp:
        raise DimensionError(f"kernel length {K} exceeds padded input length {Lp}")
    xp = _padded(x.data, (padding,))
    Lo = (Lp - K) // stride + 1
    # cols[..., B, C*K, Lo], ordered (c, k) to match the kernel layout
    stacked, idx = _shifted(xp, [(k,) for k in range(K)], (Lo,), stride)
    cols = stacked.reshape(G + (B, C * K, Lo))
    wmat = kernel.data.reshape(G + (1, O, C * K))
    out = wmat @ cols + bias.data[..., None, :, None]

    def backward(g):
        if kernel.requires_grad:
            dw = (g @ np.swapaxes(cols, -1, -2)).sum(axis=-3)
            _accum(kernel, dw.reshape(kernel.shape))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(-3, -1)))
        if x.requires_grad:
            dcols = (np.swapaxes(wmat, -1, -2) @ g).reshape(G + (B, C, K, Lo))
            dxp = np.zeros(xp.shape)
            for k, sl in enumerate(idx):
                dxp[sl] += dcols[..., k, :]
            _accum(x, dxp[..., padding : padding + L] if padding else dxp)

    return _make(out, (x, kernel, bias), backward)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if kernel.data.ndim < 4 or x.data.ndim != kernel.data.ndim:
        raise DimensionError("conv2d expects input [..., B, C, H, W] and kernel [..., O, C, KH, KW]")
    *G, B, C, H, W = x.shape
    O, Ck, KH, KW = kernel.shape[-4:]
    G = tuple(G)
    if Ck != C:
        raise DimensionError(f"kernel has {Ck} input channels, input has {C}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if KH > Hp or KW > Wp:
        raise DimensionError(f"kernel {KH}x{KW} exceeds padded input {Hp}x{Wp}")
    xp = _padded(x.data, (padding, padding))
    Ho, Wo = (Hp - KH) // stride + 1, (Wp - KW) // stride + 1
    if stride == 1:
        return _conv2d_flat(x, kernel, bias, xp, padding, Ho, Wo)
    offsets = [(i, j) for i in range(KH) for j in range(KW)]
    stacked, idx = _shifted(xp, offsets, (Ho, Wo), stride)
    cols = stacked.reshape(G + (B, C * KH * KW, Ho * Wo))
    wmat = kernel.data.reshape(G + (1, O, C * KH * KW))
    out = (wmat @ cols).reshape(G + (B, O, Ho, Wo)) + bias.data[..., None, :, None, None]

    def backward(g):
        g2 = g.reshape(G + (B, O, Ho * Wo))
        if kernel.requires_grad:
            dw = (g2 @ np.swapaxes(cols, -1, -2)).sum(axis=-3)
            _accum(kernel, dw.reshape(kernel.shape))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(-4, -2, -1)))
        if x.requires_grad:
            dcols = (np.swapaxes(wmat, -1, -2) @ g2).reshape(G + (B, C, KH * KW, Ho, Wo))
            dxp = np.zeros(xp.shape)
            for k, sl in enumerate(idx):
                dxp[sl] += dcols[..., k, :, :]
            _accum(x, dxp[..., padding : padding + H, padding : padding + W] if padding else dxp)

    return _make(out, (x, kernel, bias), backward)


def _conv2d_flat(x: Tensor, kernel: Tensor, bias: Tensor, xp: np.ndarray, padding: int, Ho: int, Wo: int) -> Tensor:
    """Stride-1 conv2d on the row-major flattened padded image.

    Output (r, c) reads flat positions r*Wp + c + i*Wp + j, so every kernel tap
    is one contiguous slice; the Wp - Wo wrap-around columns are dropped.
    """
    *G, B, C, H, W = x.shape
    G = tuple(G)
    O, _, KH, KW = kernel.shape[-4:]
    Hp, Wp = xp.shape[-2:]
    n = Ho * Wp - (Wp - Wo)  # last valid flat output + 1
    flat = xp.reshape(G + (B, C, Hp * Wp))
    taps = [i * Wp + j for i in range(KH) for j in range(KW)]
    cols = np.stack([flat[..., t : t + n] for t in taps], axis=-2).reshape(G + (B, C * KH * KW, n))
    wmat = kernel.data.reshape(G + (1, O, C * KH * KW))
    full = np.zeros(G + (B, O, Ho * Wp))
    full[..., :n] = wmat @ cols
    out = full.reshape(G + (B, O, Ho, Wp))[..., :Wo] + bias.data[..., None, :, None, None]

    def backward(g):
        gf = np.zeros(G + (B, O, Ho, Wp))
        gf[..., :Wo] = g
        gf = gf.reshape(G + (B, O, Ho * Wp))[..., :n]
        if kernel.requires_grad:
            dw = (gf @ np.swapaxes(cols, -1, -2)).sum(axis=-3)
            _accum(kernel, dw.reshape(kernel.shape))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(-4, -2, -1)))
        if x.requires_grad:
            dcols = (np.swapaxes(wmat, -1, -2) @ gf).reshape(G + (B, C, KH * KW, n))
            dflat = np.zeros(G + (B, C, Hp * Wp))
            for k, t in enumerate(taps):
                dflat[..., t : t + n] += dcols[..., k, :]
            dxp = dflat.reshape(xp.shape)
            _accum(x, dxp[..., padding : padding + H, padding : padding + W] if padding else dxp)

    return _make(out, (x, kernel, bias), backward)


def maxpool1d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise DimensionError("window and stride must be >= 1")
    L = x.shape[-1]
    if window > L:
        raise DimensionError(f"pool window {window} exceeds input length {L}")
    xd = np.ascontiguousarray(x.data)
    Lo = (L - window) // stride + 1
    s = xd.strides
    win = np.lib.stride_tricks.as_strided(
        xd, xd.shape[:-1] + (Lo, window), s[:-1] + (s[-1] * stride, s[-1]), writeable=False
    )
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros(x.shape)
        span = stride * (Lo - 1) + 1
        for k in range(window):
            dx[..., k : k + span : stride] += np.where(arg == k, g, 0.0)
        _accum(x, dx)

    return _make(out, (x,), backward)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation of [..., B, C] or [..., B, C, L] input.

    Leading dims shared with ``gamma`` are independent groups. In train mode
    the running statistics tensors get fresh arrays (unbiased variance).
    """
    ng = gamma.data.ndim - 1
    if x.data.ndim == ng + 2:
        axes, bshape = (ng,), gamma.shape[:-1] + (1, gamma.shape[-1])
    elif x.data.ndim == ng + 3:
        axes, bshape = (ng, ng + 2), gamma.shape[:-1] + (1, gamma.shape[-1], 1)
    else:
        raise DimensionError(f"batchnorm input {x.shape} vs gamma {gamma.shape}")
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var.data.reshape(bshape) + eps)
        xhat = (x.data - running_mean.data.reshape(bshape)) * inv

        def backward_eval(g):
            if x.requires_grad:
                _accum(x, g * g_ * inv)
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).sum(axis=axes))
            if beta.requires_grad:
                _accum(beta, g.sum(axis=axes))

        return _make(xhat * g_ + b_, (x, gamma, beta), backward_eval)

    if x.shape[ng] < 2:
        raise DegenerateBatchError("batch norm in train mode needs at least 2 samples")
    n = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    running_mean.data = (1 - momentum) * running_mean.data + momentum * mu.reshape(gamma.shape)
    running_var.data = (1 - momentum) * running_var.data + momentum * var.reshape(gamma.shape) * (n / (n - 1))

    def backward(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=axes))
        if x.requires_grad:
            dxhat = g * g_
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            _accum(x, inv * (dxhat - s1 / n - xhat * s2 / n))

    return _make(xhat * g_ + b_, (x, gamma, beta), backward)


def cross_entropy_loss(
    logits: Tensor, labels, l2_rate: float = 0.0, params: Iterable[Tensor] = ()
) -> Tensor:
    """Mean negative log-likelihood plus ``l2_rate * sum(w**2)`` over ``params``."""
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    picked = np.zeros((n, c))
    picked[np.arange(n), labels] = -1.0 / n
    loss = tensor_sum(mul(logp, picked))
    params = list(params)
    if l2_rate and params:
        reg = concat([reshape(tensor_sum(square(p)), (1,)) for p in params])
        loss = add(loss, mul(tensor_sum(reg), l2_rate))
    return loss


# ---------------------------------------------------------------------------
# initialisation and optimiser


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-4
    batch_size: int = 32
    l2_rate: float = 1e-4
    dropout_rate: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    leaky_slope: float = 0.01

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: dict[str, int] = field(default_factory=dict)
    # flat moment buffers per leaf set; the per-leaf m/v entries are views into them
    _flat: dict = field(default_factory=dict, repr=False, compare=False)


def _flat_moments(state: AdamState, names: tuple[str, ...], shapes: list[tuple[int, ...]]):
    cached = state._flat.get(names)
    if cached is not None and all(state.m.get(n) is mv for n, mv in zip(names, cached[2])):
        return cached
    sizes = [int(np.prod(s)) for s in shapes]
    bounds = np.concatenate([[0], np.cumsum(sizes)]).tolist()
    m = np.concatenate([state.m[n].ravel() if n in state.m else np.zeros(k) for n, k in zip(names, sizes)])
    v = np.concatenate([state.v[n].ravel() if n in state.v else np.zeros(k) for n, k in zip(names, sizes)])
    mv = [m[lo:hi].reshape(s) for lo, hi, s in zip(bounds, bounds[1:], shapes)]
    vv = [v[lo:hi].reshape(s) for lo, hi, s in zip(bounds, bounds[1:], shapes)]
    for n, a, b in zip(names, mv, vv):
        state.m[n], state.v[n] = a, b
    cached = (m, v, mv, bounds)
    state._flat[names] = cached
    return cached


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hp: HyperParams,
) -> AdamState:
    """Bias-corrected Adam on every leaf named in ``grads``.

    Leaves without a gradient are skipped entirely (no momentum drift), which
    keeps untouched branches bit-identical. Updated leaves receive new arrays.
    """
    b1, b2 = hp.adam_beta1, hp.adam_beta2
    groups: dict[int, list[str]] = {}
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise DimensionError(f"grad for {name!r} has shape {g.shape}, param {params[name].shape}")
        groups.setdefault(state.step.get(name, 0) + 1, []).append(name)
    # leaves sharing a step count are updated as one flat vector
    for t, names in groups.items():
        names = tuple(names)
        shapes = [params[n].shape for n in names]
        m, v, _, bounds = _flat_moments(state, names, shapes)
        g = np.concatenate([grads[n].ravel() for n in names])
        p = np.concatenate([params[n].data.ravel() for n in names])
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - hp.learning_rate * mhat / (np.sqrt(vhat) + hp.adam_eps)
        for n, lo, hi, s in zip(names, bounds, bounds[1:], shapes):
            params[n].data = p[lo:hi].reshape(s)
            state.step[n] = t
    return state
