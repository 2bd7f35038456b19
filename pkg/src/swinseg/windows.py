"""Window partitioning, cyclic shifting, and windowed multi-head attention.

One code path serves 2D and 3D inputs: 2D data rides along with a length-1
axial axis and an axial window edge of 1, so attention never mixes content
across slices in 2D mode. Volumes are channel-last here, ``[B?, H, W, L, C]``;
extents that do not divide the window edge are zero-padded before
partitioning and cropped after the reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry: in-plane edge, axial edge, and cyclic shift offsets.

    Shift components are 0 for plain window attention or half the matching
    window edge (integer floor) for the shifted variant; a length-1 axial
    axis therefore never shifts, which makes the 2D case a pure in-plane roll.
    """

    edge: int
    axial: int
    shift: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.edge < 1 or self.axial < 1:
            raise ValueError("window edges must be >= 1")
        halves = (self.edge // 2, self.edge // 2, self.axial // 2)
        for s, h in zip(self.shift, halves):
            if s not in (0, h):
                raise ValueError(
                    f"shift {self.shift} must be 0 or half-window {halves} per axis")

    @property
    def tokens_per_window(self) -> int:
        return self.edge * self.edge * self.axial

    def shifted(self) -> "WindowSpec":
        return replace(self, shift=(self.edge // 2, self.edge // 2, self.axial // 2))

    def unshifted(self) -> "WindowSpec":
        return replace(self, shift=(0, 0, 0))

    @classmethod
    def for_mode(cls, edge: int, dim_mode: str) -> "WindowSpec":
        if dim_mode not in ("2d", "3d"):
            raise ValueError(f"dim_mode must be '2d' or '3d', got {dim_mode!r}")
        return cls(edge=edge, axial=edge if dim_mode == "3d" else 1)


@dataclass
class WindowBatch:
    """Tokens of shape (num_windows, tokens_per_window, channels) plus the
    originating spatial shape and spec needed to reverse the partition."""

    tokens: Tensor
    source_shape: tuple[int, ...]
    spec: WindowSpec

    def grid(self) -> tuple[int, int, int, int]:
        """(B, nH, nW, nL) window counts of the padded source."""
        b, h, w, l, _ = _with_batch(self.source_shape)
        return (b, -(-h // self.spec.edge), -(-w // self.spec.edge),
                -(-l // self.spec.axial))


@dataclass
class AttentionParams:
    """Per-head projection stacks: query/key/value are (heads, C, d_k) and the
    output projection is (heads * d_k, C)."""

    query: Tensor
    key: Tensor
    value: Tensor
    out_proj: Tensor

    def __post_init__(self):
        if self.query.ndim != 3 or self.query.shape != self.key.shape \
                or self.query.shape != self.value.shape:
            raise T.ShapeError("query/key/value stacks must share shape (heads, C, d_k)")
        heads, channels, d_k = self.query.shape
        if heads * d_k != channels:
            raise T.ShapeError(
                f"heads * d_k must equal channels: {heads} * {d_k} != {channels}")
        if self.out_proj.shape != (heads * d_k, channels):
            raise T.ShapeError(
                f"out_proj must be ({heads * d_k}, {channels}), got {self.out_proj.shape}")
        for t in (self.query, self.key, self.value, self.out_proj):
            if not np.all(np.isfinite(t.data)):
                raise ValueError("attention parameters must be finite")

    @property
    def heads(self) -> int:
        return self.query.shape[0]

    @property
    def channels(self) -> int:
        return self.query.shape[1]

    @property
    def d_k(self) -> int:
        return self.query.shape[2]


def _with_batch(shape: tuple[int, ...]) -> tuple[int, int, int, int, int]:
    if len(shape) == 4:
        return (1, *shape)
    if len(shape) == 5:
        return shape  # type: ignore[return-value]
    raise T.ShapeError(f"expected [H,W,L,C] or [B,H,W,L,C], got {shape}")


def window_partition(x: Tensor, spec: WindowSpec) -> WindowBatch:
    """Tile the (padded) volume into disjoint windows of spec size.

    Token order inside a window is row-major over (h, w, l).
    """
    src_shape = x.shape
    B, H, W, L, C = _with_batch(src_shape)
    N, NL = spec.edge, spec.axial
    ph, pw, pl = (-H) % N, (-W) % N, (-L) % NL
    nH, nW, nL = (H + ph) // N, (W + pw) // N, (L + pl) // NL

    def fwd(arr):
        a = arr.reshape(B, H, W, L, C)
        if ph or pw or pl:
            a = np.pad(a, ((0, 0), (0, ph), (0, pw), (0, pl), (0, 0)))
        a = a.reshape(B, nH, N, nW, N, nL, NL, C)
        a = a.transpose(0, 1, 3, 5, 2, 4, 6, 7)
        return np.ascontiguousarray(a).reshape(B * nH * nW * nL, N * N * NL, C)

    def vjp(g):
        a = g.reshape(B, nH, nW, nL, N, N, NL, C)
        a = a.transpose(0, 1, 4, 2, 5, 3, 6, 7)
        a = np.ascontiguousarray(a).reshape(B, H + ph, W + pw, L + pl, C)
        return a[:, :H, :W, :L, :].reshape(src_shape)

    tokens = T._make(fwd(x.data), [(x, vjp)])
    return WindowBatch(tokens=tokens, source_shape=src_shape, spec=spec)


def window_reverse(wb: WindowBatch) -> Tensor:
    """Exact inverse of :func:`window_partition`, including the pad crop."""
    src_shape = wb.source_shape
    B, H, W, L, C = _with_batch(src_shape)
    spec = wb.spec
    N, NL = spec.edge, spec.axial
    ph, pw, pl = (-H) % N, (-W) % N, (-L) % NL
    nH, nW, nL = (H + ph) // N, (W + pw) // N, (L + pl) // NL
    expect = (B * nH * nW * nL, N * N * NL, C)
    if wb.tokens.shape != expect:
        raise ValueError(
            f"window batch inconsistent: tokens {wb.tokens.shape}, expected {expect} "
            f"for source {src_shape} with spec {spec}")

    def fwd(arr):
        a = arr.reshape(B, nH, nW, nL, N, N, NL, C)
        a = a.transpose(0, 1, 4, 2, 5, 3, 6, 7)
        a = np.ascontiguousarray(a).reshape(B, H + ph, W + pw, L + pl, C)
        return a[:, :H, :W, :L, :].reshape(src_shape)

    def vjp(g):
        a = g.reshape(B, H, W, L, C)
        if ph or pw or pl:
            a = np.pad(a, ((0, 0), (0, ph), (0, pw), (0, pl), (0, 0)))
        a = a.reshape(B, nH, N, nW, N, nL, NL, C)
        a = a.transpose(0, 1, 3, 5, 2, 4, 6, 7)
        return np.ascontiguousarray(a).reshape(expect)

    return T._make(fwd(wb.tokens.data), [(wb.tokens, vjp)])


def cyclic_shift(x: Tensor, offsets: tuple[int, int, int]) -> Tensor:
    """Roll the spatial axes toward higher indices by the given offsets."""
    ndim = x.ndim
    if ndim not in (4, 5):
        raise T.ShapeError(f"expected [H,W,L,C] or [B,H,W,L,C], got {x.shape}")
    axes = (ndim - 4, ndim - 3, ndim - 2)
    return T.roll(x, offsets, axes)


def mhsa(wb: WindowBatch, params: AttentionParams, return_weights: bool = False):
    """Scaled dot-product attention run independently inside every window.

    head_i = softmax(M Q_i (M K_i)^T / sqrt(d_k)) (M V_i), heads concatenated
    and projected. Token positions carry no bias, so attention is equivariant
    to any permutation of tokens within one window.
    """
    tokens = wb.tokens
    nw, tn, c = tokens.shape
    if c != params.channels:
        raise T.ShapeError(
            f"window channels {c} do not match attention params {params.channels}")
    t4 = T.reshape(tokens, (nw, 1, tn, c))
    q = T.matmul(t4, params.query)                      # (nw, heads, T, d_k)
    k = T.matmul(t4, params.key)
    v = T.matmul(t4, params.value)
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(params.d_k))
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)                             # (nw, heads, T, d_k)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (nw, tn, c))
    out = T.matmul(merged, params.out_proj)
    result = WindowBatch(tokens=out, source_shape=wb.source_shape, spec=wb.spec)
    if return_weights:
        return result, attn.data
    return result


def w_sa(x: Tensor, spec: WindowSpec, params: AttentionParams,
         embed_weight: Tensor, embed_bias: Tensor | None = None) -> Tensor:
    """Window attention: partition, per-window MHSA, embedding linear, reverse."""
    if spec.shift != (0, 0, 0):
        raise ValueError("w_sa expects an unshifted spec; use sw_sa for shifts")
    wb = mhsa(window_partition(x, spec), params)
    tokens = T.linear(wb.tokens, embed_weight, embed_bias)
    return window_reverse(WindowBatch(tokens, wb.source_shape, wb.spec))


def sw_sa(x: Tensor, spec: WindowSpec, params: AttentionParams,
          embed_weight: Tensor, embed_bias: Tensor | None = None) -> Tensor:
    """Shifted-window attention: roll, window attention, roll back."""
    off = spec.shift
    shifted = cyclic_shift(x, (-off[0], -off[1], -off[2]))
    out = w_sa(shifted, spec.unshifted(), params, embed_weight, embed_bias)
    return cyclic_shift(out, off)


@dataclass
class SwinLayerParams:
    """Both attention sub-modules of one transformer layer."""

    spec: WindowSpec
    wsa: AttentionParams
    wsa_embed_w: Tensor
    wsa_embed_b: Tensor
    swsa: AttentionParams
    swsa_embed_w: Tensor
    swsa_embed_b: Tensor


def swin_layer(x: Tensor, params: SwinLayerParams) -> Tensor:
    """Window attention followed by shifted-window attention.

    Channel-wise layer norm follows each sub-module's embedding linear; shape
    is preserved end to end.
    """
    h = w_sa(x, params.spec.unshifted(), params.wsa,
             params.wsa_embed_w, params.wsa_embed_b)
    h = T.layer_norm(h)
    y = sw_sa(h, params.spec.shifted(), params.swsa,
              params.swsa_embed_w, params.swsa_embed_b)
    return T.layer_norm(y)
