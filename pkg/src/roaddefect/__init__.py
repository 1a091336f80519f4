"""Road-defect instance segmentation with spatial and channel-wise attention."""

from .errors import (CompatibilityError, ConfigError, DataParseError, DomainError,
                     NumericDomainError, RoadDefectError, ShapeError)

__version__ = "0.1.0"

__all__ = ["CompatibilityError", "ConfigError", "DataParseError", "DomainError",
           "NumericDomainError", "RoadDefectError", "ShapeError", "__version__"]
