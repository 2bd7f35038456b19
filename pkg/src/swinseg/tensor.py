"""Small reverse-mode autodiff engine on numpy arrays.

Tensors carry a contiguous row-major payload (float32 by default, float64 for
gradient checking) in the axis order (batch, channel, H, W, L). Every
differentiable op records per-parent backward closures; ``backward`` replays
them in reverse topological order. All ops are pure and single-threaded, so
repeated runs are bit-identical.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True
_debug_checks = False


def set_debug_checks(flag: bool) -> None:
    """Enable per-op NaN/Inf assertions on forward outputs."""
    global _debug_checks
    _debug_checks = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # list of (parent, vjp) pairs; empty for leaves
        self._parents: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]] = []

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flags})"

    # tracked == participates in the current graph
    @property
    def _tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _coerce(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents) -> Tensor:
    """Wrap an op result, recording only tracked parents."""
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    out = Tensor(data)
    if _grad_enabled:
        out._parents = [(p, fn) for p, fn in parents if p._tracked]
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data + b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data - b.data, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data * b.data, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data / b.data, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [(a, lambda g: -g)])


def pow_scalar(a: Tensor, p: float) -> Tensor:
    return _make(a.data ** p, [(a, lambda g: g * p * a.data ** (p - 1))])


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, [(a, lambda g: g * out_data)])


def tlog(a: Tensor) -> Tensor:
    return _make(np.log(a.data), [(a, lambda g: g / a.data)])


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _make(out_data, [(a, lambda g: g * 0.5 / out_data)])


def tabs(a: Tensor) -> Tensor:
    # subgradient 0 at x == 0
    return _make(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))])


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data >= 0
    factor = np.where(mask, 1.0, slope).astype(a.dtype)
    return _make(a.data * factor, [(a, lambda g: g * factor)])


# -- reductions -----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).astype(a.dtype, copy=True)
        gx = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gx, a.shape).astype(a.dtype, copy=True)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.shape[ax] for ax in axes)

    def vjp(g):
        if axis is None:
            gx = g
        else:
            gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, a.shape) / count).astype(a.dtype)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), [(a, vjp)])


# -- shape manipulation ----------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), [(a, lambda g: g.transpose(inv))])


def take(a: Tensor, idx) -> Tensor:
    """Basic slicing (slices/ints/ellipsis); gradient scatters back."""
    def vjp(g):
        gx = np.zeros(a.shape, dtype=a.dtype)
        gx[idx] = g
        return gx

    return _make(a.data[idx], [(a, vjp)])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return vjp

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, [(t, make_vjp(i)) for i, t in enumerate(tensors)])


def roll(a: Tensor, shifts, axes) -> Tensor:
    """Cyclic shift toward higher indices along the given axes."""
    shifts = tuple(int(s) for s in shifts)
    axes = tuple(axes)
    neg_shifts = tuple(-s for s in shifts)
    return _make(np.roll(a.data, shifts, axis=axes),
                 [(a, lambda g: np.roll(g, neg_shifts, axis=axes))])


# -- fused neural-net ops ---------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return out_data * (g - (g * out_data).sum(axis=axis, keepdims=True))

    return _make(out_data, [(a, vjp)])


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def vjp(g):
        return g - sm * g.sum(axis=axis, keepdims=True)

    return _make(out_data, [(a, vjp)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    def vjp_a(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.data.ndim == 1:
            ga = np.multiply.outer(g, b.data) if a.data.ndim > 1 else g * b.data
        return _unbroadcast(ga, a.shape)

    def vjp_b(g):
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(gb, b.shape)

    if a.data.ndim == 1 or b.data.ndim == 1:
        # keep the common 2D+ path simple; 1-D operands are rare in this net
        raise ShapeError("matmul requires operands with ndim >= 2")
    return _make(np.matmul(a.data, b.data), [(a, vjp_a), (b, vjp_b)])


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: x @ weight + bias."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: trailing axis {x.shape[-1]} does not match weight rows "
            f"{weight.shape[0]}")
    out = matmul(x, weight) if x.ndim >= 2 else matmul(reshape(x, (1, -1)), weight)
    if x.ndim < 2:
        out = reshape(out, (weight.shape[1],))
    if bias is not None:
        out = add(out, bias)
    return out


def _norm_core(a: Tensor, axes: tuple[int, ...], eps: float) -> Tensor:
    mu = a.data.mean(axis=axes, keepdims=True)
    var = a.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=axes, keepdims=True)
        gx = (g * xhat).mean(axis=axes, keepdims=True)
        return (g - gm - xhat * gx) * inv

    return _make(xhat.astype(a.dtype), [(a, vjp)])


def instance_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each (batch, channel) slice over its spatial axes."""
    if a.ndim < 3:
        raise ShapeError("instance_norm needs at least one spatial axis")
    return _norm_core(a, tuple(range(2, a.ndim)), eps)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the trailing feature axis."""
    return _norm_core(a, (a.ndim - 1,), eps)


def _pad_amount(extent: int, kernel: int, stride: int, padding: str):
    if padding == "same":
        out = -(-extent // stride)  # ceil
        total = max((out - 1) * stride + kernel - extent, 0)
        return out, total // 2, total - total // 2
    if padding == "valid":
        if extent < kernel:
            raise ShapeError(f"valid conv: extent {extent} < kernel {kernel}")
        return (extent - kernel) // stride + 1, 0, 0
    raise ValueError(f"unknown padding {padding!r}")


def conv3d(x: Tensor, weight: Tensor, stride=(1, 1, 1), padding: str = "same") -> Tensor:
    """3D cross-correlation over (B, C, H, W, L) input.

    Same-padding keeps ``out = ceil(extent / stride)`` per axis. Implemented as
    im2col + one BLAS matmul; the input gradient is scattered back with one
    strided add per kernel offset.
    """
    B, C, H, W, L = x.shape
    Co, Ci, kh, kw, kl = weight.shape
    if C != Ci:
        raise ShapeError(
            f"conv3d: input has {C} channels but weight expects {Ci} "
            f"(input {x.shape}, weight {weight.shape})")
    for k in (kh, kw, kl):
        if k % 2 == 0:
            raise ShapeError(f"conv3d kernel extents must be odd, got {weight.shape[2:]}")
    sh, sw, sl = stride
    Ho, phb, pha = _pad_amount(H, kh, sh, padding)
    Wo, pwb, pwa = _pad_amount(W, kw, sw, padding)
    Lo, plb, pla = _pad_amount(L, kl, sl, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (phb, pha), (pwb, pwa), (plb, pla)))
    win = sliding_window_view(xp, (kh, kw, kl), axis=(2, 3, 4))
    win = win[:, :, 0:(Ho - 1) * sh + 1:sh, 0:(Wo - 1) * sw + 1:sw, 0:(Lo - 1) * sl + 1:sl]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))
    cols = cols.reshape(B * Ho * Wo * Lo, C * kh * kw * kl)
    wmat = weight.data.reshape(Co, -1).T
    out_data = (cols @ wmat).reshape(B, Ho, Wo, Lo, Co).transpose(0, 4, 1, 2, 3)

    def vjp_w(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, Co)
        return (cols.T @ gmat).T.reshape(weight.shape)

    def vjp_x(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, Co)
        gxp = np.zeros_like(xp)
        wd = weight.data
        for i in range(kh):
            for j in range(kw):
                for k in range(kl):
                    contrib = (gmat @ wd[:, :, i, j, k]).reshape(B, Ho, Wo, Lo, C)
                    gxp[:, :,
                        i:i + sh * (Ho - 1) + 1:sh,
                        j:j + sw * (Wo - 1) + 1:sw,
                        k:k + sl * (Lo - 1) + 1:sl] += contrib.transpose(0, 4, 1, 2, 3)
        return gxp[:, :, phb:phb + H, pwb:pwb + W, plb:plb + L]

    return _make(out_data, [(x, vjp_x), (weight, vjp_w)])


def upsample_x2(x: Tensor, axes) -> Tensor:
    """Nearest-neighbour doubling of the selected axes."""
    axes = tuple(axes)
    out_data = x.data
    for ax in axes:
        out_data = np.repeat(out_data, 2, axis=ax)

    def vjp(g):
        for ax in axes:
            shp = list(g.shape)
            shp[ax] //= 2
            shp.insert(ax + 1, 2)
            g = g.reshape(shp).sum(axis=ax + 1)
        return g

    return _make(out_data, [(x, vjp)])


def _interp_axis_coords(src: int, dst: int):
    """Corner-aligned source coordinates for a resampled axis."""
    if dst < 1:
        raise ShapeError("target extent must be positive")
    if dst == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, max(src - 1, 0))
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    return lo, hi, frac


def trilinear_resample(x, target_shape) -> np.ndarray:
    """Corner-aligned trilinear interpolation over the trailing axes.

    Inference-only: accepts a Tensor or ndarray, returns a plain ndarray with
    the trailing ``len(target_shape)`` axes resampled.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    target_shape = tuple(int(t) for t in target_shape)
    nsp = len(target_shape)
    out = arr
    for i, tgt in enumerate(target_shape):
        ax = arr.ndim - nsp + i
        src = out.shape[ax]
        lo, hi, frac = _interp_axis_coords(src, tgt)
        shape = [1] * out.ndim
        shape[ax] = tgt
        w = frac.reshape(shape)
        out = np.take(out, lo, axis=ax) * (1.0 - w) + np.take(out, hi, axis=ax) * w
    return out.astype(arr.dtype)


# -- backward pass ----------------------------------------------------------


def backward(out: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad tensor.

    ``out`` must be a scalar (single-element) tensor produced on the graph.
    """
    if out.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        for parent, vjp in node._parents:
            pg = vjp(g)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# -- optimizer ---------------------------------------------------------------


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: dict,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update, in place on ``params``.

    ``state`` holds the step counter and first/second moments; pass the same
    dict back on every call. Deterministic given identical inputs and state.
    """
    if "t" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p.data) for p in params]
        state["v"] = [np.zeros_like(p.data) for p in params]
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return state


class Adam:
    """Convenience wrapper around :func:`adam_step` over a fixed param list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict = {}

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.lr,
                  self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
