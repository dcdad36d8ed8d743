from .tensor import Tensor, precision

__version__ = "0.1.0"
