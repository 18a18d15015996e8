"""Exception types shared across the package."""


class GradspaceError(Exception):
    """Base class for all package errors."""


class ShapeError(GradspaceError, ValueError):
    pass


class DomainError(GradspaceError, ValueError):
    """Input lies outside the domain an operation is defined on."""


class DegenerateProjectionError(GradspaceError):
    """The decoder gradient used as a projection space is identically zero."""


class UndefinedCorrelationError(GradspaceError, ValueError):
    """Correlation requested on a constant vector."""


class TrainingDivergedError(GradspaceError, RuntimeError):
    pass


class ImageFormatError(GradspaceError, ValueError):
    pass


class CheckpointError(GradspaceError, ValueError):
    pass


class ManifestError(GradspaceError, ValueError):
    pass
