"""Anchor-token weighted training for grounded dialogue answer generation."""

__version__ = "0.1.0"

from .autograd import Tensor, Tape, apply, backward, grad_check  # noqa: F401
