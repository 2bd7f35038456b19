"""Dimension-unified windowed-attention lesion segmentation, self-contained on numpy."""

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
