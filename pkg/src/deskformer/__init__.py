"""Desk-scale transformer encoder, ReLU nets and structural probes on numpy autodiff."""

from .tensor import Tensor, grad, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "grad", "no_grad", "__version__"]
