"""Depth-granularity attention and cross-modal fusion for RGB-D saliency, on a small numpy autograd."""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError, no_grad  # noqa: E402
from .gradcheck import grad_check  # noqa: E402

__all__ = ["Tensor", "ShapeError", "no_grad", "grad_check", "__version__"]
