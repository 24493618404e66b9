"""Exception hierarchy shared across the package.

Every error carries a short ``category`` string so the CLI can emit a
single machine-parseable line per failure.
"""


class EgnetError(Exception):
    """Base class for all errors raised by this package."""

    category = "error"


class DimensionError(EgnetError):
    """Shape mismatch between operands; ``axis`` names the offending axis."""

    category = "shape"

    def __init__(self, message: str, axis: str | None = None):
        super().__init__(message)
        self.axis = axis


class ConfigError(EgnetError):
    """Invalid configuration value (even kernel size, bad sigma, bad stage...)."""

    category = "config"


class DomainError(EgnetError):
    """Input outside an operation's numerical domain."""

    category = "domain"


class DegenerateInputError(EgnetError):
    """Statistics requested over an empty reduction set."""

    category = "degenerate"


class ContractError(EgnetError):
    """API contract violation (non-scalar loss, mixed tapes, dtype mismatch)."""

    category = "contract"


class VerificationError(EgnetError):
    """Gradient verification failed in a way that is not a tolerance miss."""

    category = "verify"

    def __init__(self, message: str, param: str | None = None, coord: int | None = None):
        super().__init__(message)
        self.param = param
        self.coord = coord


class ParseError(EgnetError):
    """Malformed file content; ``offset`` is the byte position when known."""

    category = "parse"

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message)
        self.offset = offset


class WeightFormatError(ParseError):
    """Weight file violates the container format."""

    category = "weights"


class ImageFormatError(ParseError):
    """Image input is not a valid binary PPM or raw tensor file."""

    category = "image"
