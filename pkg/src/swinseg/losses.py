"""Training objectives: masked-reconstruction MAE, contrastive NT-Xent, Dice-CE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ContrastiveBatch:
    """2B embedding rows where rows (2i, 2i+1) form the i-th (anchor, positive)
    pair; every other row in the batch acts as a negative."""

    embeddings: Tensor
    temperature: float = 0.5

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] % 2 != 0:
            raise T.ShapeError(
                f"embeddings must be (2B, D), got {self.embeddings.shape}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not np.all(np.isfinite(self.embeddings.data)):
            raise ValueError("embeddings must be finite")

    @property
    def num_pairs(self) -> int:
        return self.embeddings.shape[0] // 2


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; subgradient 0 where pred == target."""
    if pred.shape != target.shape:
        raise T.ShapeError(f"mae_loss shapes differ: {pred.shape} vs {target.shape}")
    return T.tmean(T.tabs(T.sub(pred, target)))


def nt_xent(batch: ContrastiveBatch) -> Tensor:
    """Normalized temperature-scaled cross entropy over in-batch negatives.

    For anchor i with positive j:
    -log( exp(cos(z_i, z_j)/tau) / sum_{k != i} exp(cos(z_i, z_k)/tau) ),
    averaged over all 2B anchors. Cosine similarity on normalized embeddings,
    so the loss is invariant to a common positive rescaling.
    """
    z = batch.embeddings
    n = z.shape[0]
    sq = T.tsum(T.mul(z, z), axis=-1, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise ValueError("nt_xent: zero embedding vector has undefined cosine")
    zn = T.div(z, T.tsqrt(sq))
    logits = T.matmul(zn, T.transpose(zn, (1, 0))) * (1.0 / batch.temperature)
    # exclude self-similarity from the denominator; exp(-1e9) underflows to 0
    diag_mask = T.Tensor(np.where(np.eye(n), -1e9, 0.0).astype(z.dtype))
    logits = T.add(logits, diag_mask)
    denom = T.tlog(T.tsum(T.texp(logits), axis=-1))
    partner = np.arange(n) ^ 1  # 2i <-> 2i+1
    pos_mask = T.Tensor(np.eye(n)[partner].astype(z.dtype))
    pos = T.tsum(T.mul(logits, pos_mask), axis=-1)
    return T.tmean(T.sub(denom, pos))


def _split_label(logits: Tensor, labels) -> np.ndarray:
    arr = getattr(labels, "data", labels)
    arr = np.asarray(arr)
    want = logits.shape[:1] + logits.shape[2:]
    if arr.shape == logits.shape[2:]:
        arr = np.broadcast_to(arr, want)
    if arr.shape != want:
        raise T.ShapeError(
            f"labels shape {arr.shape} does not align with logits {logits.shape}")
    return arr.astype(logits.dtype)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Voxelwise two-class cross entropy; channel axis is 1."""
    if logits.ndim < 2 or logits.shape[1] != 2:
        raise T.ShapeError(f"expected two-channel logits, got {logits.shape}")
    fg = _split_label(logits, labels)
    onehot = np.stack([1.0 - fg, fg], axis=1)
    logp = T.log_softmax(logits, axis=1)
    picked = T.tsum(T.mul(logp, T.Tensor(onehot)), axis=1)
    return T.neg(T.tmean(picked))


def dice_loss(logits: Tensor, labels, eps: float = 1e-5) -> Tensor:
    """Soft Dice on the foreground softmax channel: 1 - 2*sum(pg)/(sum p + sum g + eps)."""
    if logits.ndim < 2 or logits.shape[1] != 2:
        raise T.ShapeError(f"expected two-channel logits, got {logits.shape}")
    fg = _split_label(logits, labels)
    p = T.softmax(logits, axis=1)
    pf = p[(slice(None), 1)]
    inter = T.tsum(T.mul(pf, T.Tensor(fg)))
    denom = T.add(T.tsum(pf), T.Tensor(np.asarray(fg.sum() + eps, dtype=logits.dtype)))
    return T.sub(T.Tensor(np.asarray(1.0, dtype=logits.dtype)),
                 T.div(inter * 2.0, denom))


def dice_ce_loss(logits: Tensor, labels, eps: float = 1e-5) -> Tensor:
    """Equal-weight sum of soft Dice and cross entropy."""
    return T.add(dice_loss(logits, labels, eps), cross_entropy_loss(logits, labels))
