"""Exception hierarchy shared by all verification modules."""


class VerificationError(Exception):
    """Base class for every error raised by ddnnv."""


class DimensionError(VerificationError, ValueError):
    """Array shapes do not chain the way the model requires."""


class SectorError(VerificationError, ValueError):
    """Invalid sector parameters (alpha > beta, bad multiplier, unknown activation)."""


class ExcitationError(VerificationError):
    """Trajectory data fails the rank conditions needed by the data-driven programs."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EquilibriumError(VerificationError):
    """The network does not map the origin onto its sector centres."""


class CompilationError(VerificationError):
    """A sum-of-squares constraint cannot be expressed over the requested basis."""
