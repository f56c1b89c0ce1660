"""Exception taxonomy shared across the package.

Every exception raised intentionally by this package derives from ExmemError,
so callers can catch one type at the boundary.  The CLI maps subclasses to
exit codes: usage-type errors to 1, I/O-type errors to 2, compatibility to 3.
"""


class ExmemError(Exception):
    """Base class for all errors raised by exmem."""


class ConfigError(ExmemError):
    """Invalid configuration value or inconsistent option combination."""


class UsageError(ExmemError):
    """An operation was called in a way its contract forbids."""


class ShapeError(ExmemError):
    """A tensor argument has the wrong shape for the given config."""


class InputError(ExmemError):
    """Bad input data: empty sequence, out-of-range id, over-long chunk."""


class StateError(ExmemError):
    """Object is in the wrong state for the call (stale cache, untrained codebook)."""


class NotFoundError(ExmemError):
    """A requested record id is absent."""


class FormatError(ExmemError):
    """A file or blob does not parse: bad magic, truncation, length mismatch."""


class CompatibilityError(ExmemError):
    """Artifacts built against different configs or versions were mixed."""


class TrainingError(ExmemError):
    """Quantizer training cannot proceed (for example, too few samples)."""


class NumericError(ExmemError):
    """A computation produced non-finite values despite stabilization."""


class TransportError(ExmemError):
    """Network-level failure talking to a remote service."""


class ProtocolError(ExmemError):
    """The remote peer sent a frame we cannot accept."""
