"""Desk-scale diffusion-transformer virtual try-on.

A trainable rectified-flow transformer with garment-feature injection and a
decoupled semantic-attention adapter, plus a deterministic synthetic data
generator and an image-metric suite, all on a double-precision autodiff core.
"""

from .tensor import Tensor, Tape, GradientMap, apply_primitive, backward, grad_check

__all__ = [
    "Tensor",
    "Tape",
    "GradientMap",
    "apply_primitive",
    "backward",
    "grad_check",
]

__version__ = "0.1.0"
