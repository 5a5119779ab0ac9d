"""Exception hierarchy shared by the engines and the command line front end."""


class AtomLaserError(Exception):
    """Base class for all package errors."""


class ConfigError(AtomLaserError, ValueError):
    """Invalid configuration; the message names the offending key."""


class GridMismatchError(AtomLaserError, ValueError):
    """Fields or profiles that must share a grid do not."""


class NumericalError(AtomLaserError, RuntimeError):
    """A numerical procedure could not deliver its accuracy contract."""


class AiryRangeError(NumericalError, ValueError):
    """Airy argument too negative for the oscillation phase to be resolved."""


class UnconvergedQuadratureError(NumericalError):
    """Quadrature grid does not resolve the integrand oscillation."""


class TruncatedSpectrumError(NumericalError):
    """Energy grid cuts off a non-negligible part of the spectrum."""


class UnresolvedError(NumericalError):
    """Time or energy step too coarse for a beat, sinc lobe or smoothing time."""


class GridOverflowError(NumericalError):
    """The wave packet reached the edge of the spatial grid."""


class ConvergenceError(NumericalError):
    """Iterative solver did not converge within its iteration budget."""


class InstabilityError(NumericalError):
    """Norm drift exceeded the unitarity bound."""


class UndersampledError(NumericalError):
    """Snapshot cadence too coarse for the beat being analysed."""


class TooFewPeriodsError(NumericalError):
    """Analysis window holds fewer than three beat periods."""


class ToleranceError(AtomLaserError):
    """A cross-engine comparison exceeded its tolerance."""
