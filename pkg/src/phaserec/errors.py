"""Exception hierarchy shared by all phaserec modules."""


class PhaserecError(Exception):
    """Base class for all package errors."""


class ValidationError(PhaserecError):
    """Invalid input: bad config values, out-of-range fields, broken meshes."""


class SolverError(PhaserecError):
    """Numerical failure: CG breakdown, Newton divergence, PDAS cycling."""


class VerificationError(PhaserecError):
    """A verification check did not pass."""
