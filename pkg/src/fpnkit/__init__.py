"""fpnkit: feature-pyramid image classifiers with attention-gated fusion.

A self-contained training and introspection stack: a numpy tensor core with
reverse-mode autodiff (convolutions lowered through a compiled kernel backend
with a pure-numpy fallback), pre-activation ResNet backbones, four pyramid
fusion variants, dataset tooling, an SGD trainer, and a CLI.
"""

from . import backend
from .errors import ConfigurationError, FpnkitError, ShapeError, TrainingError
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "FpnkitError",
    "ShapeError",
    "Tensor",
    "TrainingError",
    "backend",
    "no_grad",
    "__version__",
]
