from typing import Optional


class FuseError(ValueError):
    """Base class for every error raised by the toolkit."""


class FormatError(FuseError):
    """A file on disk does not match its declared format."""


class ParameterError(FuseError):
    """An argument is outside its allowed range."""


class PreconditionError(FuseError):
    """The input lacks something the operation requires."""


class DegenerateDirectionError(FuseError):
    """A direction vector has zero length in the relevant plane."""


class BehindCameraError(FuseError):
    """A point projects with depth at or below the near-plane epsilon."""


class InsufficientControlsError(FuseError):
    """Fewer than three control points were given to the spline fit."""


class DegenerateGeometryError(FuseError):
    """Control points are collinear or too few correspondences exist."""


class NumericalError(FuseError):
    """
    The spline system could not be solved reliably.

    Args:
        message (str): Human readable description
        condition (Optional[float], optional): Condition estimate of the system. Defaults to None.
    """

    def __init__(self, message: str, condition: Optional[float] = None):
        super().__init__(message)
        self.condition = condition


class ShapeError(FuseError):
    """Two grids that must agree in shape do not."""
