"""Exception types shared across the package."""


class MorphAtlasError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(MorphAtlasError):
    """Operands live on different grids or have inconsistent layouts."""


class DiffeomorphismError(MorphAtlasError):
    """A generated map folded (nonpositive Jacobian determinant).

    Carries enough context (integration step, squaring, or atlas iteration)
    to locate the first offending stage.
    """


class NonConvergenceError(MorphAtlasError):
    """Iterative optimization diverged; ``trace`` holds the energy history."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace) if trace is not None else []


class ZeroVarianceError(MorphAtlasError):
    """Correlation requested on a constant image (undefined)."""


class VolumeFormatError(MorphAtlasError):
    """Malformed or unsupported volume file; message names the offending field."""


class ProviderError(MorphAtlasError):
    """A velocity prior could not be obtained for a subject.

    ``subject_id`` and ``iteration`` identify the failing request.
    """

    def __init__(self, message, subject_id=None, iteration=None):
        super().__init__(message)
        self.subject_id = subject_id
        self.iteration = iteration
