"""Exception hierarchy shared by every layer of the package."""


class KamtoriError(Exception):
    """Base class for all package errors."""


class ConfigurationError(KamtoriError, ValueError):
    """Invalid grid sizes, parameters or run configuration."""


class ResonanceError(KamtoriError, ArithmeticError):
    """A small divisor vanished exactly."""

    def __init__(self, wave_vector, value=0.0):
        self.wave_vector = tuple(int(k) for k in wave_vector)
        self.value = value
        super().__init__(f"resonant wave vector k={self.wave_vector} (divisor {value:.3e})")


class DegenerateParameterizationError(KamtoriError, ArithmeticError):
    """D_theta K lost rank somewhere on the grid."""


class NoTwistError(KamtoriError, ArithmeticError):
    """The averaged torsion is singular; the Newton step cannot be solved."""


class UnsupportedCaseError(KamtoriError, NotImplementedError):
    """Requested a geometric setting other than the canonical one."""


class ModelDomainError(KamtoriError, ValueError):
    """A Hamiltonian was evaluated outside its domain."""


class IntegrationError(KamtoriError, RuntimeError):
    """The flow integrator failed (step-size underflow or similar)."""


class PeriodicOrbitError(KamtoriError, RuntimeError):
    """An orbit expected to be periodic did not close."""


class DivergenceError(KamtoriError, RuntimeError):
    """The Newton iteration diverged."""


class ResolutionExhaustedError(KamtoriError, RuntimeError):
    """The grid would need to grow past its configured cap."""


class TruncationWarning(UserWarning):
    """A continued fraction ended before the requested depth."""


class ResonanceWarning(UserWarning):
    """A resonance was met while estimating Diophantine constants."""


class ConvergenceWarning(UserWarning):
    """A diagnostic did not reach its convergence threshold."""
