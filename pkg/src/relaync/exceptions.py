"""Exception hierarchy shared by the analytic, oracle and simulation layers."""


class RelayModelError(Exception):
    """Base class for every error raised by :mod:`relaync`."""


class ValidationError(RelayModelError, ValueError):
    """A parameter or state violates its documented range."""


class UnsupportedModeError(RelayModelError):
    """The operation is only defined for a different coding mode."""


class DegenerateBlocksError(RelayModelError):
    """QBD blocks are malformed or lead to a singular linear system."""


class InstabilityError(RelayModelError):
    """A level-structured chain is not positive recurrent.

    ``R`` carries the last rate-matrix iterate (or ``None`` when instability
    was detected from the drift condition before iterating) and
    ``spectral_radius`` its dominant eigenvalue estimate.
    """

    def __init__(self, message, R=None, spectral_radius=None, chain=None):
        super().__init__(message)
        self.R = R
        self.spectral_radius = spectral_radius
        self.chain = chain


class SaturatedRelayError(InstabilityError):
    """The relay itself saturates, so the requested analysis has no steady state."""


class UndefinedDelayError(RelayModelError):
    """Delay is N/S with S == 0 and N > 0."""


class StateSpaceTooLargeError(RelayModelError):
    """A truncated chain would exceed the configured memory budget."""
