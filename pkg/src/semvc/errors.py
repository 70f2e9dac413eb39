"""Exception types shared across the package."""


class SemvcError(Exception):
    """Base class; the CLI reports ``type(exc).__name__`` as the error class."""


class ContractError(SemvcError, ValueError):
    """An argument violates an operation's precondition."""


class FormatError(SemvcError, ValueError):
    """A file could not be parsed or has an unsupported version."""


class UnknownModeError(SemvcError, KeyError):
    """A trace environment was queried for a mode it never recorded."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CapExceededError(SemvcError):
    """Exhaustive search would enumerate more modes than the configured cap."""


class BdError(SemvcError, ValueError):
    """Bjontegaard metrics cannot be computed for the given curves."""


class TrainingError(SemvcError, FloatingPointError):
    """Training produced a non-finite loss."""


class LockError(SemvcError):
    """Another command holds the run directory's lock file."""
