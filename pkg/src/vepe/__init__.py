"""Video multi-person pose estimation with spatio-temporal transformers,
trained end to end on synthetic clips."""

__version__ = "0.1.0"

from .tensor import Tensor, ConfigError, ShapeError, no_grad

__all__ = ["Tensor", "ConfigError", "ShapeError", "no_grad", "__version__"]
