"""
exceptions.py - Custom exceptions for trajsight
"""


class TrajSightError(Exception):
    """Base exception for trajsight errors."""
    pass


class InputError(TrajSightError):
    """Bad user input: missing files, unparsable JSON/CSV, invalid flags."""
    pass


class MalformedInputError(InputError):
    """Input data violates its format (duplicate rows, missing columns)."""
    pass


class ConfigurationError(InputError):
    """Configuration or environment variable errors."""
    pass


class ScenarioInvalidError(InputError):
    """Scenario script cannot be simulated (e.g. vehicles collide)."""
    pass


class ContractError(TrajSightError):
    """A function precondition was violated."""
    pass


class DimensionError(ContractError):
    """Array shapes do not line up."""

    def __init__(self, message: str, shapes: tuple | None = None):
        super().__init__(message)
        self.shapes = shapes


class GeometryError(TrajSightError):
    """3D box recovery failures."""
    pass


class BehindCameraError(GeometryError):
    """A point to project has non-positive depth."""
    pass


class DegenerateGeometryError(GeometryError):
    """The constraint system for a configuration is rank deficient."""
    pass


class NoSolutionError(GeometryError):
    """No vertex configuration produced a usable translation."""
    pass


class NoWindowError(TrajSightError):
    """The requested target cannot anchor a trajectory window."""
    pass


class CorruptedWeightsError(TrajSightError):
    """Weights contain non-finite values or do not match the model."""
    pass


class DivergenceError(TrajSightError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, weight_name: str | None = None):
        super().__init__(message)
        self.weight_name = weight_name
