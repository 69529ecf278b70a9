"""Change detection between image pairs with 2-D selective-scan state spaces.

Everything runs on CPU over numpy.  The public surface is re-exported here;
the CLI lives in `changescan.cli`.
"""

from .tensor import (
    BroadcastError,
    KernelTooLarge,
    NotScalarError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    precision,
)

__all__ = [
    "BroadcastError",
    "KernelTooLarge",
    "NotScalarError",
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "precision",
]

__version__ = "0.1.0"
