"""Edge-guided lightweight monocular depth estimation on a small numpy autodiff engine."""

from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "no_grad", "__version__"]
