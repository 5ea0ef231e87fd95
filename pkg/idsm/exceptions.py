"""Exceptions raised by the reconstruction library."""


class IdsmError(Exception):

    """Base class of every library error."""


class MeshError(IdsmError, ValueError):

    """A mesh cannot be built, read, or mapped onto another mesh."""


class CoefficientError(IdsmError, ValueError):

    """A PDE coefficient leaves its admissible range."""


class SolverError(IdsmError, RuntimeError):

    """A linear or Newton solve failed."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PreconditionError(IdsmError, ValueError):

    """A resolver update was called with nonpositive dual pairings."""


class DataMismatchError(IdsmError):

    """A data bundle does not match the configured mesh or partition."""


class VerificationError(IdsmError):

    """A finished reconstruction violates one of its invariants."""

    def __init__(self, invariant, message):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant
