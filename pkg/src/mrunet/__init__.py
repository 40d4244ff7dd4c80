"""U-Net and multiresolution U-Net segmentation on a small numpy autodiff engine."""

from .errors import (
    CompatibilityError,
    DegenerateVarianceError,
    DivergenceError,
    FormatError,
    GraphError,
    MrunetError,
    ShapeError,
    UnreliableCheckError,
    ValidationError,
)
from .netbuilder import ArchitectureSpec, Model, Variant, build_model, forward, load_weights, param_count, save_weights
from .tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec", "CompatibilityError", "DegenerateVarianceError", "DivergenceError", "FormatError",
    "GraphError", "Model", "MrunetError", "ShapeError", "Tape", "Tensor", "UnreliableCheckError",
    "ValidationError", "Variant", "backward", "build_model", "forward", "load_weights", "param_count",
    "save_weights",
]
