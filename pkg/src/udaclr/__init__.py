"""Category-level regularized domain adaptation for nested (disc/cup) segmentation."""

from udaclr.errors import TrainingAbort, ValidationError

CLASSES = ("disc", "cup")

__all__ = ["CLASSES", "TrainingAbort", "ValidationError"]
__version__ = "0.1.0"
