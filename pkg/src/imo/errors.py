"""Exception types shared across the package."""


class IMOError(Exception):
    """Base class for all package errors."""


class ShapeError(IMOError, ValueError):
    """Operand shapes violate an operation's contract."""


class ValidationError(IMOError, ValueError):
    """A configuration value or argument is out of its documented range."""


class ContractError(IMOError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NonFiniteError(IMOError, FloatingPointError):
    """A NaN or Inf was produced where finite values are required."""


class FormatError(IMOError):
    """Base class for on-disk format problems."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    def __init__(self, name):
        super().__init__(f"checksum mismatch in entry {name!r}")
        self.name = name


class ConfigError(ValidationError):
    """A config file or override is malformed or names an unknown key."""
