"""cyclematch: one-shot segmentation prompting via cycle-consistent matching."""

from .errors import (
    ArgumentError,
    BridgeError,
    CycleMatchError,
    DegenerateMask,
    EmptyForeground,
    FormatError,
    NumericsError,
)
from .params import CycleParams

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "BridgeError",
    "CycleMatchError",
    "CycleParams",
    "DegenerateMask",
    "EmptyForeground",
    "FormatError",
    "NumericsError",
    "__version__",
]
