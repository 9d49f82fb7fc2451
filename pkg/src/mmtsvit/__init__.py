"""Multi-modal temporo-spatial vision transformer for satellite image
time series segmentation, on a self-contained float64 autodiff core."""

from .tensor import Tensor, backward, grad_check

__all__ = ["Tensor", "backward", "grad_check"]
__version__ = "0.1.0"
