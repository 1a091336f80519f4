"""Exception hierarchy. Each category maps to a distinct CLI exit code."""


class RoadDefectError(Exception):
    exit_code = 1
    category = "error"


class ConfigError(RoadDefectError, ValueError):
    exit_code = 2
    category = "config"


class ShapeError(RoadDefectError, ValueError):
    exit_code = 3
    category = "shape"


class NumericDomainError(RoadDefectError, ArithmeticError):
    exit_code = 4
    category = "numeric"


class DomainError(RoadDefectError, ValueError):
    """Argument outside the mathematical domain of an operation."""

    exit_code = 5
    category = "domain"


class DataParseError(RoadDefectError):
    exit_code = 6
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CompatibilityError(RoadDefectError):
    """Checkpoint/dataset or checkpoint/checkpoint mismatch."""

    exit_code = 7
    category = "compatibility"
