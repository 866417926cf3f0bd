"""Exception types shared across the package."""


class GtopError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInput(GtopError, ValueError):
    """Malformed problem data (bad shapes, signs, or non-finite values)."""


class TopologyMismatch(GtopError, ValueError):
    """Operation asked of a projector that does not serve this graph."""


class SizeBoundExceeded(GtopError, ValueError):
    """Dense reference computation requested beyond its size budget."""


class Infeasible(GtopError, RuntimeError):
    """No admissible point exists for a constraint, with context in the message."""


class NumericalFailure(GtopError, RuntimeError):
    """A numeric routine could not reach its target accuracy."""


class VerificationFailure(GtopError, RuntimeError):
    """A self-check enabled in verify mode was violated."""


class ConfigError(GtopError, ValueError):
    """Run configuration rejected; message carries the path to the bad field."""
