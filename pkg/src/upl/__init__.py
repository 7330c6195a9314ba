"""Few-shot point-cloud segmentation with uncertainty-aware prototypes."""

__version__ = "0.1.0"

from upl.errors import DataError, NumericError, UplError

__all__ = ["DataError", "NumericError", "UplError", "__version__"]
