"""Exception types shared across the package."""


class CaveSegError(Exception):
    """Base class for all package errors."""


class ShapeError(CaveSegError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(CaveSegError, ValueError):
    """An argument value is outside its valid range."""


class DataError(CaveSegError, ValueError):
    """Input data (labels, masks, images) is malformed."""


class UsageError(CaveSegError, RuntimeError):
    """An API was called in a state where it cannot work."""


class ConfigError(CaveSegError, ValueError):
    """A model or run configuration is inconsistent."""


class FormatError(CaveSegError, ValueError):
    """A file does not follow the expected on-disk format."""


class TrainingError(CaveSegError, RuntimeError):
    """Training diverged or otherwise could not continue."""


class DegenerateGeometryError(CaveSegError, ValueError):
    """Triangulation input has no well-defined solution."""


class ParallelRayError(DegenerateGeometryError):
    """A back-projected ray is parallel to the triangulation plane."""


class BehindCameraError(DegenerateGeometryError):
    """The ray-plane intersection lies behind the ray's camera."""
