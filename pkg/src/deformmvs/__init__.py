"""Deformable multi-view stereo: cascade depth estimation with learned
view-space sampling offsets and adaptive depth-range discretization."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
