"""Exception types shared across the package."""


class FedkeiError(Exception):
    """Base class for all package errors."""


class InputError(FedkeiError):
    """Rejected input: bad shape, non-finite value, or invalid argument."""


class ConflictError(FedkeiError):
    """Attempt to insert a duplicate key into the knowledge pool."""


class EmptyPoolError(FedkeiError):
    """The pool has no history for the requested task time (t == 1)."""


class OracleError(FedkeiError):
    """A test oracle (e.g. finite differences) hit a non-finite value."""


class DivergenceError(FedkeiError):
    """An optimization loop produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ProtocolError(FedkeiError):
    """A federation message violated the per-task phase ordering."""


class IncompleteRoundError(FedkeiError):
    """A server barrier fired before all clients reported."""


class UndefinedMetricError(FedkeiError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class ConfigError(FedkeiError):
    """Run configuration failed validation."""
