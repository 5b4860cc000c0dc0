"""Shared exception types."""


class ValidationError(ValueError):
    """A spec or input violated a declared precondition or invariant."""


class CollinearityError(ValueError):
    """The design matrix is rank deficient; the message names a dependent column."""


class ConvergenceError(RuntimeError):
    """An iterative solver failed to converge; the message reports the final state."""
