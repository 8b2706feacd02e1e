"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: validation/format/corruption
problems exit 1, OS-level I/O failures exit 2, numerical failures exit 3.
"""


class VopError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(VopError):
    """Input data or arguments violate a documented contract."""


class FormatError(ValidationError):
    """A binary container does not start with the expected magic/version."""


class CorruptionError(VopError):
    """A binary container is truncated or internally inconsistent."""


class SamplingError(ValidationError):
    """A batch sampler cannot satisfy the requested composition."""


class NumericalError(VopError):
    """A computation produced non-finite values (e.g. NaN training loss)."""
