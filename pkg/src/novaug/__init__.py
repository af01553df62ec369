"""Novel-class augmentation for deep metric learning on feature vectors."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check, l2_normalize, no_grad

__all__ = ["Tensor", "backward", "grad_check", "l2_normalize", "no_grad", "__version__"]
